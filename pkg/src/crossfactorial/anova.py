"""Stratum decomposition, expected mean squares and F-tests for orthogonal designs.

Each factor F of the random structure indexes a stratum W_F.  Its projector is
Q_F = P_F - sum(Q_G for G strictly coarser than F), where P_F replaces each
entry by its F-level mean.  Under the random-effects model Cov(Y) acts on W_F
as the scalar xi_F = sum(k_G * sigma2_G) over parameter-carrying factors G
finer than or equal to F, with k_G = N / n_levels(G) the replication of G.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy import stats

from .exceptions import StructuralError
from .factors import DISPLAY_NAMES, FactorLattice, build_lattice, degrees_of_freedom, pretty

IDEMPOTENCE_TOL = 1e-10
COEF_TOL = 1e-9


@dataclass(frozen=True, eq=False)
class StratumProjector:
    """Orthogonal projector onto one stratum."""

    factor: object
    projector: np.ndarray
    df: int

    @property
    def name(self) -> str:
        return self.factor.name


def xi_symbol(name: str) -> str:
    return "ξ_0" if name == "U" else f"ξ_{{{pretty(name)}}}" if ":" in name else f"ξ_{name}"


@dataclass(frozen=True)
class EmsExpression:
    """Expected mean square as a fixed-effect norm plus a signed sum of stratum eigenvalues.

    Parameters
    ----------
    fixed_part : str or None
        Name of the fixed factor whose squared norm appears (``U`` for the
        grand mean, ``I`` for interventions).
    xi_terms : tuple of (str, int)
        Stratum names with integer coefficients.
    """

    fixed_part: str | None
    xi_terms: tuple

    def render(self) -> str:
        parts = []
        if self.fixed_part is not None:
            sub = "0" if self.fixed_part == "U" else pretty(self.fixed_part)
            parts.append(f"‖τ_{sub}‖²")
        for k, (name, coef) in enumerate(self.xi_terms):
            sym = xi_symbol(name)
            mag = "" if abs(coef) == 1 else f"{abs(coef)}"
            if not parts:
                parts.append(("−" if coef < 0 else "") + mag + sym)
            else:
                parts.append(("− " if coef < 0 else "+ ") + mag + sym)
        return " ".join(parts)

    def __str__(self):
        return self.render()

    def evaluate(self, xi: Mapping[str, float], fixed_norms: Mapping[str, float] | None = None) -> float:
        total = math.fsum(coef * xi[name] for name, coef in self.xi_terms)
        if self.fixed_part is not None and fixed_norms:
            total += fixed_norms.get(self.fixed_part, 0.0)
        return total


@dataclass(frozen=True)
class TestResult:
    """Outcome of an F (or t) test.

    ``p_value`` is None when the denominator combination is not positive and
    the test is undefined.
    """

    __test__ = False

    effect: str
    statistic: float | None
    df_num: float
    df_den: float | None
    p_value: float | None
    kind: str
    denominator: tuple = ()
    note: str = ""

    @property
    def defined(self) -> bool:
        return self.p_value is not None


@dataclass(frozen=True)
class AnovaRow:
    stratum: str
    source: str
    df: int
    sum_sq: float
    mean_sq: float | None
    ems: EmsExpression | None


@dataclass(frozen=True, eq=False)
class AnovaTable:
    """Rows in display order plus the F-tests and the structure they came from."""

    rows: tuple
    tests: tuple
    lattice: FactorLattice
    residual_ms: dict
    residual_df: dict
    fixed_name: str | None = None
    fixed_stratum: str | None = None
    extras: dict = field(default_factory=dict)

    @property
    def n_units(self) -> int:
        return self.lattice.n_units

    def row(self, stratum: str, source: str) -> AnovaRow:
        for r in self.rows:
            if r.stratum == stratum and r.source == source:
                return r
        raise KeyError((stratum, source))

    def keys(self) -> list:
        return [(r.stratum, r.source) for r in self.rows]

    def test(self, effect: str) -> TestResult:
        for t in self.tests:
            if t.effect == effect:
                return t
        raise KeyError(effect)

    def source_rows(self) -> list:
        """Rows that partition the data (excluding the Total rows)."""
        return [r for r in self.rows if r.source != "Total"]

    def to_records(self) -> list:
        tests = {t.effect: t for t in self.tests}
        out = []
        for r in self.rows:
            effect = _effect_of_row(r)
            t = tests.get(effect) if effect else None
            out.append({
                "stratum": "Total" if r.stratum == "*" else stratum_label(r.stratum),
                "source": r.source,
                "df": r.df,
                "sum_sq": r.sum_sq,
                "mean_sq": r.mean_sq,
                "ems": r.ems.render() if r.ems else "",
                "F": t.statistic if t else None,
                "df_den": t.df_den if t else None,
                "p": t.p_value if t else None,
            })
        return out

    def to_markdown(self) -> str:
        head = "| Stratum | Source | df | SS | MS | EMS | F | df_den | p |"
        lines = [head, "|" + "---|" * 9]
        for rec in self.to_records():
            cells = [rec["stratum"], rec["source"], str(rec["df"]), _fmt(rec["sum_sq"]),
                     _fmt(rec["mean_sq"]), rec["ems"], _fmt(rec["F"]), _fmt(rec["df_den"]), _fmt(rec["p"])]
            lines.append("| " + " | ".join(cells) + " |")
        return "\n".join(lines) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        cols = ["stratum", "source", "df", "sum_sq", "mean_sq", "ems", "F", "df_den", "p"]
        w.writerow(["Stratum", "Source", "df", "SS", "MS", "EMS", "F", "df_den", "p"])
        for rec in self.to_records():
            w.writerow(["" if rec[c] is None else rec[c] for c in cols])
        return buf.getvalue()


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float) and not math.isfinite(v):
        return "NA"
    return f"{v:.6g}"


def stratum_label(name: str) -> str:
    if name == "U":
        return "W_0"
    return f"W_{{{pretty(name)}}}" if ":" in name else f"W_{name}"


def source_label(name: str) -> str:
    return DISPLAY_NAMES.get(name, pretty(name))


def _effect_of_row(r: AnovaRow) -> str | None:
    if r.source in ("Total", "Mean", "Residual", "Patients") or r.stratum == "*":
        return None
    return "I" if r.source == "Interventions" else r.stratum


# ---------------------------------------------------------------------------
# projectors and the xi map


_DISPLAY_PRIORITY = {"I": 0, "C": 1, "T": 1, "B": 2}


def _display_key(f) -> tuple:
    # within one lattice level: treatment-side letters first, blocking letters last
    prio = tuple(_DISPLAY_PRIORITY.get(p, 3) for p in f.name.split(":"))
    return max(prio), prio, f.n_levels, f.name


def decompose(lattice: FactorLattice, check: bool = True) -> list:
    """Dense stratum projectors for every factor of the random structure."""
    out = []
    done = {}
    df = degrees_of_freedom(lattice)
    for f in lattice.random:
        q = f.averaging()
        for g in lattice.coarser_than(f.name):
            q -= done[g.name]
        q = 0.5 * (q + q.T)
        if check:
            err = np.max(np.abs(q @ q - q)) if q.size else 0.0
            if err > IDEMPOTENCE_TOL:
                raise StructuralError(
                    f"stratum projector for {f.name} is not idempotent (error {err:.2e}); design is not orthogonal"
                )
        done[f.name] = q
        out.append(StratumProjector(f, q, df[f.name]))
    return out


def stratum_components(y: np.ndarray, lattice: FactorLattice) -> dict:
    """Q_F y for every stratum, by recursion on level means (no dense operators)."""
    y = np.asarray(y, dtype=float)
    comps = {}
    for f in lattice.random:
        v = f.level_means(y)
        for g in lattice.coarser_than(f.name):
            v = v - comps[g.name]
        comps[f.name] = v
    return comps


def _project_stratum(v: np.ndarray, lattice: FactorLattice, name: str) -> np.ndarray:
    return stratum_components(v, lattice)[name]


def replication(lattice: FactorLattice) -> dict:
    """k_F = N / n_levels(F) for the parameter-carrying factors."""
    n = lattice.n_units
    return {f.name: n / f.n_levels for f in lattice.variance_factors}


def xi_matrix(lattice: FactorLattice) -> tuple:
    """Matrix K with xi_S = sum_F K[S, F] sigma2_F.

    Returns
    -------
    K : ndarray, shape (n_strata, n_params)
    strata : list of str
    params : list of str
    """
    params = [f.name for f in lattice.variance_factors]
    strata = [f.name for f in lattice.random]
    k = replication(lattice)
    out = np.zeros((len(strata), len(params)))
    for i, s in enumerate(strata):
        for j, p in enumerate(params):
            if lattice.finer_or_equal(p, s):
                out[i, j] = k[p]
    return out, strata, params


def xi_values(lattice: FactorLattice, components: Mapping[str, float]) -> dict:
    """Stratum eigenvalues for given variance components (missing ones are zero)."""
    K, strata, params = xi_matrix(lattice)
    sigma = np.array([float(components.get(p, 0.0)) for p in params])
    return dict(zip(strata, K @ sigma))


def _as_combination(target: np.ndarray, lattice: FactorLattice) -> tuple:
    # express a row of K (in sigma-space) through the xi of parameter strata
    K, strata, params = xi_matrix(lattice)
    rows = [strata.index(p) for p in params]
    coefs = np.linalg.solve(K[rows].T, target)
    levels = {f.name: f.n_levels for f in lattice.random}
    out = []
    for p, c in zip(params, coefs):
        if abs(c) > COEF_TOL:
            r = round(c)
            out.append((p, int(r) if abs(c - r) < COEF_TOL else float(c)))
    # positive terms first, finer factors first within sign
    out.sort(key=lambda pc: (pc[1] < 0, -levels[pc[0]]))
    return tuple(out)


def stratum_ems(lattice: FactorLattice, name: str) -> tuple:
    """xi of a stratum written through parameter-carrying strata (U keeps xi_0)."""
    f = next((g for g in lattice.random if g.name == name), None)
    if name == "U" or f is None:
        return ((name, 1),)
    if f.role != "dependent-random":
        return ((name, 1),)
    K, strata, _ = xi_matrix(lattice)
    return _as_combination(K[strata.index(name)], lattice)


def _fixed_setup(lattice: FactorLattice):
    fixed = [f for f in lattice.fixed if f.role != "universal"]
    if len(fixed) > 1:
        raise StructuralError("only one non-trivial fixed factor is supported")
    if not fixed:
        return None, None
    stratum = lattice.stratum_of_fixed(fixed[0].name)
    return fixed[0], stratum


def ems_table(lattice: FactorLattice) -> dict:
    """Map (stratum, source) -> EmsExpression for every source row."""
    fixed, stratum = _fixed_setup(lattice)
    out = {("U", "Mean"): EmsExpression("U", (("U", 1),))}
    for f in lattice.random[1:]:
        terms = stratum_ems(lattice, f.name)
        if stratum is not None and f.name == stratum.name:
            out[(f.name, "Interventions" if fixed.name == "I" else source_label(fixed.name))] = EmsExpression(fixed.name, terms)
            if f.name != fixed.name and f.role != "dependent-random":
                out[(f.name, "Residual")] = EmsExpression(None, terms)
        else:
            out[(f.name, source_label(f.name))] = EmsExpression(None, terms)
    return out


# ---------------------------------------------------------------------------
# Satterthwaite


def linear_combination_df(coefs: Sequence[float], ms: Sequence[float], dfs: Sequence[float]) -> float:
    """Satterthwaite df of sum(c * MS); NaN when the combination is not positive."""
    terms = [c * m for c, m in zip(coefs, ms)]
    total = math.fsum(terms)
    if not total > 0:
        return float("nan")
    denom = math.fsum(t * t / d for t, d in zip(terms, dfs) if t != 0)
    if denom == 0:
        return float("inf")
    return total * total / denom


def satterthwaite_df(ms_values: Mapping[str, float], design_shape: str, *, n_I: int = 2, n_T: int = 16,
                     n_B: int = 5, n_C: int = 6) -> float:
    """Denominator df for the intervention test of the block designs.

    Design b uses MS of I:T, I:B and I:T:B; design c uses I:C, I:B and
    I:C:B.  Returns NaN when MS_1 + MS_2 - MS_3 is not positive (the test is
    then undefined).
    """
    from .design import shape_letter

    letter = shape_letter(design_shape)
    if letter == "b":
        names, levels = ("I:T", "I:B", "I:T:B"), (n_T, n_B)
    elif letter == "c":
        names, levels = ("I:C", "I:B", "I:C:B"), (n_C, n_B)
    else:
        raise StructuralError("the three-term combination applies to designs b and c only")
    a, b = levels
    dfs = ((n_I - 1) * (a - 1), (n_I - 1) * (b - 1), (n_I - 1) * (a - 1) * (b - 1))
    try:
        ms = [float(ms_values[n]) for n in names]
    except KeyError as exc:
        raise KeyError(f"mean square for {exc.args[0]} is required") from None
    return linear_combination_df((1, 1, -1), ms, dfs)


# ---------------------------------------------------------------------------
# the table


def _f_test(effect: str, numerator: float, df_num: int, combo: tuple, table_ms: dict, table_df: dict,
            kind_if_exact: str, kind_if_combined: str) -> TestResult:
    coefs = [c for _, c in combo]
    ms = [table_ms.get(n) for n, _ in combo]
    dfs = [table_df.get(n, 0) for n, _ in combo]
    exact = len(combo) == 1 and coefs[0] == 1
    if any(m is None for m in ms) or any(d == 0 for d in dfs):
        return TestResult(effect, None, df_num, None, None, kind_if_exact if exact else kind_if_combined,
                          combo, "denominator mean square unavailable; test undefined")
    denom = math.fsum(c * m for c, m in zip(coefs, ms))
    if exact:
        df_den = float(dfs[0])
    else:
        df_den = linear_combination_df(coefs, ms, dfs)
    kind = kind_if_exact if exact else kind_if_combined
    if not denom > 0 or not df_den > 0:
        return TestResult(effect, None, df_num, None, None, kind, combo,
                          "residual estimate nonpositive; test undefined")
    stat = numerator / denom
    p = float(stats.f.sf(stat, df_num, df_den))
    return TestResult(effect, stat, df_num, df_den, p, kind, combo)


def anova(y, design=None, lattice: FactorLattice | None = None) -> AnovaTable:
    """Stratum ANOVA of ``y``.

    Parameters
    ----------
    y : array_like, shape (N,)
    design : AllocationTable, optional
        Used to build the lattice of the design's standard model when
        ``lattice`` is not given.
    lattice : FactorLattice, optional

    Returns
    -------
    AnovaTable
    """
    y = np.asarray(y, dtype=float)
    if lattice is None:
        if design is None or design.spec is None:
            raise StructuralError("a lattice or a design with a known shape is required")
        lattice = standard_lattice(design)
    if y.ndim != 1 or y.size != lattice.n_units:
        raise StructuralError(f"outcome has length {y.size}, design has {lattice.n_units} units")
    if design is not None and design.n_units != lattice.n_units:
        raise StructuralError("design and lattice have different numbers of units")

    df = degrees_of_freedom(lattice)
    comps = stratum_components(y, lattice)
    fixed, stratum = _fixed_setup(lattice)
    ems = ems_table(lattice)
    ss = {n: math.fsum(v * v) for n, v in comps.items()}

    rows = []
    res_ms, res_df = {}, {}
    fixed_ms = fixed_df = None
    ordered = sorted(lattice.random[1:-1], key=lambda f: (lattice.rank(f.name),) + _display_key(f))
    rows.append(AnovaRow("U", "Mean", 1, ss["U"], ss["U"], ems[("U", "Mean")]))
    for f in list(ordered) + [lattice.random[-1]]:
        name, nu = f.name, df[f.name]
        if nu == 0:
            continue
        if stratum is not None and name == stratum.name:
            label = "Interventions" if fixed.name == "I" else source_label(fixed.name)
            fixed_df = fixed.n_levels - 1
            if name == fixed.name or f.role == "dependent-random":
                fixed_ss = ss[name]
                if fixed_df != nu:
                    raise StructuralError(f"fixed factor {fixed.name} does not fill its stratum")
            else:
                centred = fixed.level_means(y) - y.mean()
                part = _project_stratum(centred, lattice, name)
                fixed_ss = math.fsum(part * part)
            fixed_ms = fixed_ss / fixed_df
            rows.append(AnovaRow(name, label, fixed_df, fixed_ss, fixed_ms, ems[(name, label)]))
            rnu = nu - fixed_df
            if rnu > 0:
                rss = ss[name] - fixed_ss
                rows.append(AnovaRow(name, "Residual", rnu, rss, rss / rnu, ems[(name, "Residual")]))
                res_ms[name], res_df[name] = rss / rnu, rnu
            rows.append(AnovaRow(name, "Total", nu, ss[name], None, None))
        else:
            label = source_label(name)
            rows.append(AnovaRow(name, label, nu, ss[name], ss[name] / nu, ems[(name, label)]))
            res_ms[name], res_df[name] = ss[name] / nu, nu
    rows.append(AnovaRow("*", "Total", lattice.n_units, math.fsum(y * y), None, None))

    table = AnovaTable(tuple(rows), (), lattice, res_ms, res_df,
                       fixed.name if fixed is not None else None,
                       stratum.name if stratum is not None else None,
                       {"fixed_ms": fixed_ms, "fixed_df": fixed_df})
    object.__setattr__(table, "tests", tuple(f_tests(table)))
    return table


def f_tests(table: AnovaTable, design_shape: str | None = None) -> list:
    """F-tests for the fixed factor and every random factor with its own variance.

    The denominator of each test is the signed combination of residual mean
    squares whose expectation equals the numerator's EMS under the null.  A
    single unit-coefficient term gives an exact F; otherwise the Satterthwaite
    df is used.  ``design_shape`` is accepted for interface symmetry; the
    rule needs only the lattice.
    """
    lattice = table.lattice
    K, strata, params = xi_matrix(lattice)
    out = []
    if table.fixed_name is not None and table.extras.get("fixed_ms") is not None:
        combo = stratum_ems(lattice, table.fixed_stratum)
        out.append(_f_test(table.fixed_name, table.extras["fixed_ms"], table.extras["fixed_df"], combo,
                           table.residual_ms, table.residual_df, "exact-F", "by-hand-linear-combination"))
    for f in lattice.variance_factors[:-1]:
        if f.name not in table.residual_ms:
            continue
        row = K[strata.index(f.name)].copy()
        row[params.index(f.name)] = 0.0
        combo = _as_combination(row, lattice)
        out.append(_f_test(f.name, table.residual_ms[f.name], table.residual_df[f.name], combo,
                           table.residual_ms, table.residual_df, "exact-F", "approximate-F"))
    return out


@dataclass(frozen=True)
class ComponentEstimates:
    """Variance components from equating mean squares to their expectations."""

    components: dict
    negative: dict
    truncated: bool


def estimate_components_anova(table: AnovaTable, allow_negative: bool = False) -> ComponentEstimates:
    """Solve residual MS = K sigma2 for the variance components.

    With ``allow_negative`` false, negative solutions are set to zero and
    flagged in ``negative``.
    """
    lattice = table.lattice
    K, strata, params = xi_matrix(lattice)
    missing = [p for p in params if p not in table.residual_ms]
    if missing:
        raise StructuralError(f"no residual mean square for {', '.join(missing)}; EMS system is singular")
    A = K[[strata.index(p) for p in params]]
    ms = np.array([table.residual_ms[p] for p in params])
    try:
        sigma = np.linalg.solve(A, ms)
    except np.linalg.LinAlgError:
        raise StructuralError("EMS system is singular") from None
    negative = {p: bool(s < 0) for p, s in zip(params, sigma)}
    if not allow_negative:
        sigma = np.maximum(sigma, 0.0)
    return ComponentEstimates(dict(zip(params, map(float, sigma))), negative,
                              (not allow_negative) and any(negative.values()))


def standard_lattice(design, terms: Sequence[str] | None = None, fixed: str | None = "I") -> FactorLattice:
    """Lattice of the design's usual analysis model (or of explicit random ``terms``)."""
    if terms is None:
        if design.spec is None:
            raise StructuralError("design shape unknown; give the random terms explicitly")
        terms = design.spec.random_terms
    factors = [design.factor(t) for t in terms]
    if fixed is not None:
        factors.insert(0, design.factor(fixed, "fixed"))
    return build_lattice(factors)
