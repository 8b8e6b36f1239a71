"""Factors as partitions of the experimental units.

A factor is stored extensionally: one level code per unit.  Infima and suprema
are then exact set operations, which is what the Hasse diagrams, strata and
degrees of freedom are built from.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .exceptions import StructuralError

ROLES = ("fixed", "random", "dependent-random", "universal", "equality")

# Names of the well-known factors in the order used for display and for
# canonical interaction names (Interventions, Centres, Therapists, Batches).
BASE_ORDER = ("I", "C", "T", "B")
DISPLAY_NAMES = {
    "U": "Mean",
    "I": "Interventions",
    "C": "Centres",
    "T": "Therapists",
    "B": "Batches",
    "E": "Patients",
}


def _canonical_codes(codes: np.ndarray) -> np.ndarray:
    # relabel levels 0..k-1 in order of first occurrence
    codes = np.asarray(codes)
    if codes.ndim != 1:
        raise StructuralError("a factor needs one level per unit")
    if codes.size == 0:
        return np.zeros(0, dtype=np.int64)
    _, first, inverse = np.unique(codes, return_index=True, return_inverse=True)
    rank = np.empty(first.size, dtype=np.int64)
    rank[np.argsort(first, kind="stable")] = np.arange(first.size)
    return rank[inverse.reshape(-1)]


def pretty(name: str) -> str:
    """Render an interaction name with the infimum symbol: ``I:T`` -> ``I∧T``."""
    return name.replace(":", "∧")


@dataclass(frozen=True, eq=False)
class Factor:
    """A partition of ``n_units`` units into ``n_levels`` occupied levels.

    ``level_of`` is relabelled on construction so that levels are numbered by
    first occurrence in unit order; two factors are the same partition exactly
    when their ``level_of`` arrays are equal.
    """

    name: str
    level_of: np.ndarray
    role: str = "random"
    n_levels: int = field(init=False)

    def __post_init__(self):
        if self.role not in ROLES:
            raise StructuralError(f"unknown role {self.role!r} for factor {self.name}")
        codes = _canonical_codes(self.level_of)
        codes.setflags(write=False)
        object.__setattr__(self, "level_of", codes)
        object.__setattr__(self, "n_levels", int(codes.max()) + 1 if codes.size else 0)

    @classmethod
    def universal(cls, n_units: int) -> "Factor":
        return cls("U", np.zeros(n_units, dtype=np.int64), "universal")

    @classmethod
    def equality(cls, n_units: int) -> "Factor":
        return cls("E", np.arange(n_units), "equality")

    @property
    def n_units(self) -> int:
        return self.level_of.size

    @property
    def counts(self) -> np.ndarray:
        return np.bincount(self.level_of, minlength=self.n_levels)

    @property
    def is_uniform(self) -> bool:
        counts = self.counts
        return bool(counts.size) and bool(np.all(counts == counts[0]))

    def same_partition(self, other: "Factor") -> bool:
        return self.n_units == other.n_units and np.array_equal(self.level_of, other.level_of)

    def with_role(self, role: str) -> "Factor":
        return Factor(self.name, self.level_of, role)

    def renamed(self, name: str) -> "Factor":
        return Factor(name, self.level_of, self.role)

    def averaging(self) -> np.ndarray:
        """Dense N x N operator replacing each entry by its level mean."""
        indicator = np.zeros((self.n_units, self.n_levels))
        indicator[np.arange(self.n_units), self.level_of] = 1.0
        return (indicator / self.counts) @ indicator.T

    def level_means(self, y: np.ndarray) -> np.ndarray:
        """Level means of ``y`` broadcast back to the units (P_F y)."""
        y = np.asarray(y, dtype=float)
        sums = np.bincount(self.level_of, weights=y, minlength=self.n_levels)
        return (sums / self.counts)[self.level_of]

    def __repr__(self):
        return f"Factor({self.name!r}, n_levels={self.n_levels}, role={self.role!r})"


def _check_same_units(f: Factor, g: Factor):
    if f.n_units != g.n_units:
        raise StructuralError(
            f"factors {f.name} and {g.name} are defined on {f.n_units} and {g.n_units} units"
        )


def infimum(f: Factor, g: Factor, name: str | None = None, role: str | None = None) -> Factor:
    """Factor whose levels are the occupied combinations of levels of ``f`` and ``g``."""
    _check_same_units(f, g)
    codes = f.level_of * max(g.n_levels, 1) + g.level_of
    return Factor(name or f"{f.name}:{g.name}", codes, role or f.role)


def supremum(f: Factor, g: Factor, name: str | None = None, role: str | None = None) -> Factor:
    """Coarsest factor on which agreement of ``f`` or of ``g`` forces agreement.

    Computed as the connected components of the bipartite graph joining a level
    of ``f`` to a level of ``g`` whenever some unit carries both.
    """
    _check_same_units(f, g)
    ng = g.n_levels
    pairs = np.unique(f.level_of * ng + g.level_of)
    fl, gl = pairs // ng, pairs % ng
    # min-label propagation over the occupied (f, g) level pairs; the graphs
    # here are tiny and shallow, so this beats building a sparse matrix
    label = np.arange(f.n_levels)
    while True:
        g_label = np.full(ng, f.n_levels)
        np.minimum.at(g_label, gl, label[fl])
        new = label.copy()
        np.minimum.at(new, fl, g_label[gl])
        new = new[new]
        if np.array_equal(new, label):
            break
        label = new
    return Factor(name or f"{f.name}∨{g.name}", label[f.level_of], role or f.role)


def is_finer(f: Factor, g: Factor) -> bool:
    """True when every level class of ``f`` lies inside a level class of ``g``."""
    _check_same_units(f, g)
    pairs = np.unique(f.level_of * max(g.n_levels, 1) + g.level_of)
    return pairs.size == f.n_levels


def are_orthogonal(f: Factor, g: Factor) -> bool:
    """Whether the averaging operators of ``f`` and ``g`` commute.

    Uses counts only: within every class of the supremum the two factors must
    be proportionally crossed, n(f, g) = n(f) n(g) / n(f v g).
    """
    _check_same_units(f, g)
    sup = supremum(f, g)
    nf, ng = f.counts, g.counts
    cell = np.zeros((f.n_levels, g.n_levels))
    np.add.at(cell, (f.level_of, g.level_of), 1.0)
    sup_of_f = np.zeros(f.n_levels, dtype=np.int64)
    sup_of_f[f.level_of] = sup.level_of
    sup_of_g = np.zeros(g.n_levels, dtype=np.int64)
    sup_of_g[g.level_of] = sup.level_of
    same_class = sup_of_f[:, None] == sup_of_g[None, :]
    expected = np.outer(nf, ng) / sup.counts[sup_of_f][:, None]
    return bool(np.allclose(cell[same_class], expected[same_class]))


def canonical_term(name: str, order: Sequence[str] = BASE_ORDER) -> str:
    """Order the components of an interaction name, e.g. ``T:I`` -> ``I:T``."""
    parts = name.split(":")
    rank = {p: i for i, p in enumerate(order)}
    seen = list(dict.fromkeys(parts))
    ordered = sorted(enumerate(seen), key=lambda kv: (rank.get(kv[1], len(rank)), kv[0]))
    return ":".join(p for _, p in ordered)


@dataclass(frozen=True, eq=False)
class FactorLattice:
    """Fixed and random factor structures over one set of units.

    ``random`` holds U, the random factors (closed under suprema, with
    dependent-random ones tagged) and E.  ``fixed`` holds U and the fixed
    factors.  Each tuple is ordered from coarse to fine.
    """

    n_units: int
    random: tuple
    fixed: tuple

    def __post_init__(self):
        object.__setattr__(self, "_by_name", {f.name: f for f in self.random + self.fixed})
        object.__setattr__(self, "_order", _finer_matrix(self.random))

    def __getitem__(self, name: str) -> Factor:
        return self._by_name[name]

    def __contains__(self, name) -> bool:
        return name in self._by_name

    @property
    def factors(self) -> tuple:
        seen = {}
        for f in self.random + self.fixed:
            seen.setdefault(f.name, f)
        return tuple(seen.values())

    @property
    def roles(self) -> dict:
        return {f.name: f.role for f in self.factors}

    @property
    def strata(self) -> tuple:
        """Factors indexing the strata: the whole random structure."""
        return self.random

    @property
    def variance_factors(self) -> tuple:
        """Random factors carrying their own variance parameter, E last."""
        own = tuple(f for f in self.random if f.role == "random")
        return own + (self.random[-1],)

    def names(self, structure: str = "random") -> list:
        return [f.name for f in getattr(self, structure)]

    def finer_or_equal(self, a: str, b: str) -> bool:
        idx = {f.name: i for i, f in enumerate(self.random)}
        return bool(self._order[idx[a], idx[b]])

    def coarser_than(self, name: str) -> list:
        """Random-structure factors strictly coarser than ``name``."""
        idx = {f.name: i for i, f in enumerate(self.random)}
        i = idx[name]
        return [g for j, g in enumerate(self.random) if j != i and self._order[i, j]]

    def edges(self, structure: str = "random") -> list:
        """Covering pairs (finer, coarser) of the chosen Hasse diagram."""
        nodes = list(getattr(self, structure))
        order = _finer_matrix(nodes)
        out = []
        for i, j in zip(*np.nonzero(order)):
            if i == j:
                continue
            between = any(
                order[i, k] and order[k, j] for k in range(len(nodes)) if k not in (i, j)
            )
            if not between:
                out.append((nodes[i].name, nodes[j].name))
        return out

    def rank(self, name: str) -> int:
        """Length of the longest chain from ``name`` up to U in the random structure."""
        covers = {}
        for fine, coarse in self.edges("random"):
            covers.setdefault(fine, []).append(coarse)
        memo = {}

        def depth(n):
            if n not in memo:
                memo[n] = 0 if n not in covers else 1 + max(depth(c) for c in covers[n])
            return memo[n]

        return depth(name)

    def stratum_of_fixed(self, name: str) -> Factor:
        """Stratum holding the fixed factor ``name``.

        The supremum of every random-structure factor finer than the fixed
        factor, so in the randomised block designs this lands on the
        dependent-random copy of I itself.
        """
        fixed = self[name]
        below = [f for f in self.random if is_finer(f, fixed)]
        sup = below[0]
        for f in below[1:]:
            sup = supremum(sup, f)
        for f in self.random:
            if f.same_partition(sup):
                return f
        raise StructuralError(f"stratum for fixed factor {name} is not in the random structure")


def _finer_matrix(nodes: Sequence[Factor]) -> np.ndarray:
    n = len(nodes)
    out = np.zeros((n, n), dtype=bool)
    for i in range(n):
        for j in range(n):
            out[i, j] = i == j or is_finer(nodes[i], nodes[j])
    return out


def _find(f: Factor, pool: Iterable[Factor]):
    for g in pool:
        if g.same_partition(f):
            return g
    return None


def build_lattice(factors: Sequence[Factor], roles: Mapping[str, str] | None = None) -> FactorLattice:
    """Assemble the fixed and random Hasse structures from declared factors.

    Random factors are closed under pairwise suprema.  A random-structure factor
    whose partition coincides with a declared fixed factor is kept under the
    fixed factor's name and tagged ``dependent-random``: it indexes a stratum
    but carries no variance parameter of its own.
    """
    factors = list(factors)
    if not factors:
        raise StructuralError("no factors given")
    roles = dict(roles or {})
    n = factors[0].n_units
    for f in factors:
        if f.n_units != n:
            raise StructuralError(f"factor {f.name} has {f.n_units} units, expected {n}")
    tagged = [f.with_role(roles.get(f.name, f.role)) for f in factors]

    top = next((f for f in tagged if f.role == "universal"), None) or Factor.universal(n)
    bottom = next((f for f in tagged if f.role == "equality"), None) or Factor.equality(n)
    if top.n_levels > 1 or bottom.n_levels != n:
        raise StructuralError("U must have one level and E one level per unit")

    fixed = []
    for f in tagged:
        if f.role == "fixed" and not f.same_partition(top) and _find(f, fixed) is None:
            fixed.append(f)

    nodes = []

    def admit(f: Factor, role: str):
        if f.same_partition(top) or f.same_partition(bottom) or _find(f, nodes) is not None:
            return False
        twin = _find(f, fixed)
        if twin is not None:
            nodes.append(Factor(twin.name, f.level_of, "dependent-random"))
        else:
            nodes.append(Factor(f.name, f.level_of, role))
        return True

    for f in tagged:
        if f.role in ("random", "dependent-random"):
            admit(f, "random")

    # each pair of nodes is joined once; new nodes are paired as they appear
    k = 0
    while k < len(nodes):
        for j in range(k):
            admit(supremum(nodes[j], nodes[k]), "dependent-random")
        k += 1

    key = lambda f: f.n_levels
    random = (top,) + tuple(sorted(nodes, key=key)) + (bottom,)
    return FactorLattice(n_units=n, random=random, fixed=(top,) + tuple(sorted(fixed, key=key)))


def degrees_of_freedom(lattice: FactorLattice) -> dict:
    """Dimension of each stratum: levels minus the df of everything coarser."""
    df = {}
    for f in lattice.random:
        value = f.n_levels - sum(df[g.name] for g in lattice.coarser_than(f.name))
        if value < 0:
            raise StructuralError(f"negative degrees of freedom for {f.name}; invalid design")
        df[f.name] = value
    return df


_NODE_STYLE = {
    "fixed": 'style=filled, fillcolor=white, fontcolor=black',
    "universal": 'style=filled, fillcolor=white, fontcolor=black',
    "random": 'style=filled, fillcolor=black, fontcolor=white',
    "equality": 'style=filled, fillcolor=black, fontcolor=white',
    "dependent-random": 'style=filled, fillcolor="black;0.5:white", gradientangle=90, fontcolor=red',
}


def emit_hasse_dot(lattice: FactorLattice, structure: str = "random") -> str:
    """Graphviz DOT text for the fixed or random Hasse diagram.

    Open diamonds are fixed factors, filled diamonds random ones and
    half-filled diamonds dependent-random ones.  Edges are covering pairs
    drawn from the coarser factor down to the finer one.
    """
    if structure not in ("random", "fixed"):
        raise ValueError("structure must be 'random' or 'fixed'")
    nodes = getattr(lattice, structure)
    df = degrees_of_freedom(lattice) if structure == "random" else {}
    lines = [f'graph "{structure}" {{', "  rankdir=TB;", "  node [shape=diamond];"]
    for f in nodes:
        role = f.role if structure == "random" else ("universal" if f.role == "universal" else "fixed")
        tip = f"levels={f.n_levels}" + (f" df={df[f.name]}" if f.name in df else "")
        lines.append(
            f'  "{f.name}" [label="{pretty(f.name)}", tooltip="{tip}", {_NODE_STYLE[role]}];'
        )
    for fine, coarse in lattice.edges(structure):
        lines.append(f'  "{coarse}" -- "{fine}";')
    lines.append("}")
    return "\n".join(lines) + "\n"
