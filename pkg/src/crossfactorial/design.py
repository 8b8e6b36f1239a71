"""Systematic layouts, randomised allocations and the five assignment methods.

Units are patients numbered in row order.  Rows are grouped into blocks, one
per (centre, batch) pair, centre-major; within a block row order is the
recruitment order.  All level indices are 0-based in memory and 1-based in
CSV files.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .exceptions import ConfigurationError
from .factors import Factor, canonical_term, infimum

SHAPES = {
    "a": "completely-randomised",
    "b": "randomised-block",
    "c": "multicentre-randomised-block",
}
_LETTER = {v: k for k, v in SHAPES.items()}
MAX_UNITS = 10_000_000
CSV_COLUMNS = ("patient", "centre", "batch", "therapist", "intervention")

# Random terms of the analysis model for each design shape.  Interactions with
# I are per-cell random effects of the intervention within therapist, batch
# and centre.
RANDOM_TERMS = {
    "a": ("T", "I:T"),
    "b": ("T", "B", "T:B", "I:T", "I:B", "I:T:B"),
    "c": ("C", "T", "B", "C:B", "T:B", "I:C", "I:T", "I:B", "I:C:B", "I:T:B"),
}


def shape_letter(shape: str) -> str:
    """Accept ``a``/``b``/``c`` or the long shape names."""
    key = str(shape).strip().lower()
    if key in SHAPES:
        return key
    if key in _LETTER:
        return _LETTER[key]
    raise ConfigurationError(f"unknown design shape {shape!r}; expected one of a, b, c")


@dataclass(frozen=True)
class DesignSpec:
    """Counts and seed for one of the three design shapes.

    Parameters
    ----------
    shape : str
        ``a`` (completely randomised), ``b`` (randomised block) or ``c``
        (multicentre randomised block); long names are accepted.
    n_I, n_T, n_B, n_C, n_R : int
        Interventions, therapists (per centre), batches, centres and
        replications per treatment cell.  ``n_B`` is 1 for shape a and
        ``n_C`` is 1 unless the shape is c.
    seed : int
        Master seed for every random choice made from this spec.
    """

    shape: str
    n_I: int = 2
    n_T: int = 2
    n_B: int = 1
    n_C: int = 1
    n_R: int = 1
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "shape", SHAPES[shape_letter(self.shape)])
        for name in ("n_I", "n_T", "n_B", "n_C", "n_R"):
            value = getattr(self, name)
            if isinstance(value, bool) or int(value) != value or value < 1:
                raise ConfigurationError(f"{name} must be a positive integer, got {value!r}")
            object.__setattr__(self, name, int(value))
        if self.n_I < 2:
            raise ConfigurationError("at least two interventions are needed (n_I >= 2)")
        if self.letter == "a" and self.n_B != 1:
            raise ConfigurationError("a completely randomised design has a single batch (n_B = 1)")
        if self.letter != "c" and self.n_C != 1:
            raise ConfigurationError("only the multicentre design has more than one centre")
        if not 0 <= int(self.seed) < 2**64:
            raise ConfigurationError("seed must be an unsigned 64-bit integer")
        object.__setattr__(self, "seed", int(self.seed))
        if self.n_units > MAX_UNITS:
            raise ConfigurationError(f"design has {self.n_units} units, above the limit {MAX_UNITS}")

    @property
    def letter(self) -> str:
        return _LETTER[self.shape]

    @property
    def block_size(self) -> int:
        return self.n_I * self.n_T * self.n_R

    @property
    def n_blocks(self) -> int:
        return self.n_C * self.n_B

    @property
    def n_units(self) -> int:
        return self.block_size * self.n_blocks

    @property
    def n_therapists(self) -> int:
        """Therapists across all centres."""
        return self.n_T * self.n_C

    @property
    def random_terms(self) -> tuple:
        return RANDOM_TERMS[self.letter]

    def block_rng(self, centre: int, batch: int) -> np.random.Generator:
        """Independent stream for one block, keyed by (seed, centre, batch)."""
        seq = np.random.SeedSequence(self.seed, spawn_key=(centre, batch))
        return np.random.Generator(np.random.PCG64(seq))


@dataclass(frozen=True, eq=False)
class AllocationTable:
    """Realised patient assignment.  Row ``p`` is patient ``p``.

    ``therapist`` holds global therapist indices (centre * n_T + local index
    in the multicentre design).
    """

    intervention: np.ndarray
    therapist: np.ndarray
    batch: np.ndarray
    centre: np.ndarray
    method: str = "proposed"
    spec: DesignSpec | None = None
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        n = None
        for name in ("intervention", "therapist", "batch", "centre"):
            arr = np.asarray(getattr(self, name), dtype=np.int64)
            if arr.ndim != 1:
                raise ConfigurationError(f"{name} must be one-dimensional")
            if n is None:
                n = arr.size
            elif arr.size != n:
                raise ConfigurationError("allocation columns differ in length")
            if arr.size and arr.min() < 0:
                raise ConfigurationError(f"{name} levels must be nonnegative")
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def n_units(self) -> int:
        return self.intervention.size

    @property
    def n_interventions(self) -> int:
        return int(self.intervention.max()) + 1

    @property
    def block(self) -> np.ndarray:
        """Block index of each row, blocks numbered centre-major."""
        n_b = int(self.batch.max()) + 1
        return self.centre * n_b + self.batch

    def rows(self) -> Iterator[tuple]:
        for p in range(self.n_units):
            yield (p, int(self.centre[p]), int(self.batch[p]), int(self.therapist[p]), int(self.intervention[p]))

    def column(self, name: str) -> np.ndarray:
        key = {"I": "intervention", "T": "therapist", "B": "batch", "C": "centre"}.get(name, name)
        if key not in ("intervention", "therapist", "batch", "centre"):
            raise KeyError(name)
        return getattr(self, key)

    def factor(self, term: str, role: str = "random") -> Factor:
        """Factor for a term such as ``T`` or ``I:T:B`` built from the columns."""
        term = canonical_term(term)
        if term not in self._cache:
            parts = term.split(":")
            out = Factor(parts[0], self.column(parts[0]))
            for part in parts[1:]:
                out = infimum(out, Factor(part, self.column(part)))
            self._cache[term] = out.renamed(term)
        return self._cache[term].with_role(role)

    def cell_counts(self) -> np.ndarray:
        """Counts of each (intervention, global therapist) pair."""
        n_t = int(self.therapist.max()) + 1
        out = np.zeros((self.n_interventions, n_t), dtype=np.int64)
        np.add.at(out, (self.intervention, self.therapist), 1)
        return out

    def to_csv(self, path: str | Path | None = None, extra: dict | None = None) -> str:
        """CSV text (1-based indices, LF endings); also written to ``path`` if given.

        ``extra`` maps additional column names (``y``, ``x2``, ...) to arrays.
        """
        extra = dict(extra or {})
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(CSV_COLUMNS + tuple(extra))
        cols = [np.asarray(v, dtype=float) for v in extra.values()]
        for p, c, b, t, i in self.rows():
            writer.writerow([p + 1, c + 1, b + 1, t + 1, i + 1] + [repr(float(v[p])) for v in cols])
        text = buf.getvalue()
        if path is not None:
            Path(path).write_text(text, encoding="utf-8", newline="")
        return text


def infer_spec(table_or_columns, seed: int = 0) -> DesignSpec | None:
    """Reconstruct a DesignSpec from realised columns when the counts are balanced."""
    t = table_or_columns
    n_i = int(t.intervention.max()) + 1
    n_c = int(t.centre.max()) + 1
    n_b = int(t.batch.max()) + 1
    n_t_total = int(t.therapist.max()) + 1
    if n_t_total % n_c:
        return None
    n_t = n_t_total // n_c
    per_rep = n_i * n_t * n_b * n_c
    n = t.intervention.size
    if n % per_rep:
        return None
    shape = "c" if n_c > 1 else ("b" if n_b > 1 else "a")
    try:
        return DesignSpec(shape, n_i, n_t, n_b, n_c, n // per_rep, seed)
    except ConfigurationError:
        return None


def read_csv(source: str | Path, text: str | None = None) -> tuple:
    """Read an allocation or data CSV.

    Returns
    -------
    table : AllocationTable
    extra : dict
        Any further numeric columns (``y``, ``x2``, ``x3``) keyed by name.
    """
    content = text if text is not None else Path(source).read_text(encoding="utf-8")
    reader = csv.reader(io.StringIO(content))
    try:
        header = [h.strip() for h in next(reader)]
    except StopIteration:
        raise ConfigurationError("empty CSV file") from None
    missing = [c for c in CSV_COLUMNS if c not in header]
    if missing:
        raise ConfigurationError(f"CSV is missing columns: {', '.join(missing)}")
    rows = [r for r in reader if r]
    try:
        data = np.array(rows, dtype=float).reshape(len(rows), len(header))
    except ValueError as exc:
        raise ConfigurationError(f"non-numeric or ragged CSV data: {exc}") from None
    col = {h: data[:, k] for k, h in enumerate(header)}
    ints = {}
    for name in CSV_COLUMNS:
        v = col[name]
        if np.any(v != np.round(v)) or (v.size and v.min() < 1):
            raise ConfigurationError(f"column {name} must hold positive integers")
        ints[name] = v.astype(np.int64) - 1
    order = np.argsort(ints["patient"], kind="stable")
    if not np.array_equal(ints["patient"][order], np.arange(len(rows))):
        raise ConfigurationError("patient column must number rows 1..N")
    table = AllocationTable(
        ints["intervention"][order], ints["therapist"][order], ints["batch"][order],
        ints["centre"][order], method="loaded",
    )
    object.__setattr__(table, "spec", infer_spec(table))
    extra = {h: col[h][order] for h in header if h not in CSV_COLUMNS}
    return table, extra


def _systematic_block(spec: DesignSpec) -> tuple:
    # lexicographic (intervention, local therapist), each repeated n_R times
    i = np.repeat(np.arange(spec.n_I), spec.n_T * spec.n_R)
    t = np.tile(np.repeat(np.arange(spec.n_T), spec.n_R), spec.n_I)
    return i, t


def _blocks(spec: DesignSpec):
    for c in range(spec.n_C):
        for b in range(spec.n_B):
            start = (c * spec.n_B + b) * spec.block_size
            yield c, b, slice(start, start + spec.block_size)


def _assemble(spec: DesignSpec, per_block: dict, method: str) -> AllocationTable:
    n = spec.n_units
    inter = np.empty(n, dtype=np.int64)
    ther = np.empty(n, dtype=np.int64)
    batch = np.empty(n, dtype=np.int64)
    centre = np.empty(n, dtype=np.int64)
    for c, b, rows in _blocks(spec):
        i, t = per_block[c, b]
        inter[rows] = i
        ther[rows] = c * spec.n_T + t
        batch[rows] = b
        centre[rows] = c
    return AllocationTable(inter, ther, batch, centre, method=method, spec=spec)


def systematic_design(spec: DesignSpec) -> AllocationTable:
    """Deterministic layout before randomisation."""
    base = _systematic_block(spec)
    return _assemble(spec, {(c, b): base for c, b, _ in _blocks(spec)}, "systematic")


def randomise(spec: DesignSpec) -> AllocationTable:
    """Permute the systematic rows independently within every block."""
    i0, t0 = _systematic_block(spec)
    per_block = {}
    for c, b, _ in _blocks(spec):
        perm = spec.block_rng(c, b).permutation(spec.block_size)
        per_block[c, b] = (i0[perm], t0[perm])
    return _assemble(spec, per_block, "proposed")


def systematic_therapist_slots(spec: DesignSpec) -> np.ndarray:
    """Local therapist of each row in the systematic layout."""
    return np.tile(_systematic_block(spec)[1], spec.n_blocks)


def randomised_interventions(spec: DesignSpec) -> np.ndarray:
    """Intervention labels drawn first by methods 1 and 5 for this seed.

    The same block streams are used by :func:`assign_by_method`, so callers can
    prepare arm-dependent covariates before asking for the full allocation.
    """
    i0, _ = _systematic_block(spec)
    out = np.empty(spec.n_units, dtype=np.int64)
    for c, b, rows in _blocks(spec):
        out[rows] = spec.block_rng(c, b).permutation(i0)
    return out


@dataclass(frozen=True, eq=False)
class MatchingInputs:
    """Covariates used by the non-random therapist assignment.

    Parameters
    ----------
    patient_covariates : ndarray
        Shape ``(N, d)``, or ``(N, n_I, d)`` when a patient's covariate depends
        on the arm they are allocated to.
    therapist_centres : ndarray
        Shape ``(n_therapists, d)`` or ``(n_I, n_therapists, d)``: the
        covariate value each therapist is matched to (per arm when 3-D).
    """

    patient_covariates: np.ndarray
    therapist_centres: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.patient_covariates, dtype=float)
        t = np.asarray(self.therapist_centres, dtype=float)
        if p.ndim == 1:
            p = p[:, None]
        if t.ndim == 1:
            t = t[:, None]
        if p.ndim not in (2, 3) or t.ndim not in (2, 3) or p.shape[-1] != t.shape[-1]:
            raise ConfigurationError("matching covariates have incompatible shapes")
        object.__setattr__(self, "patient_covariates", p)
        object.__setattr__(self, "therapist_centres", t)

    def patient(self, rows, arms=None) -> np.ndarray:
        p = self.patient_covariates[rows]
        if p.ndim == 2:
            return p
        if arms is None:
            return p.mean(axis=1)
        return p[np.arange(len(p)), arms]

    def therapist(self, ids, arm=None) -> np.ndarray:
        t = self.therapist_centres
        if t.ndim == 2:
            return t[ids]
        return t[:, ids].mean(axis=0) if arm is None else t[arm, ids]


def greedy_match(patients: np.ndarray, therapists: np.ndarray, caps: np.ndarray) -> np.ndarray:
    """Assign each patient to a therapist, nearest pairs first.

    All (patient, therapist) pairs are visited in order of Euclidean distance
    (ties by patient then therapist index); a pair is taken when the patient is
    still unassigned and the therapist is under its cap.

    Parameters
    ----------
    patients : ndarray, shape (n, d) or (n, k, d)
        Covariates; a 3-D array gives a distinct vector per candidate therapist.
    therapists : ndarray, shape (k, d)
    caps : ndarray of int, shape (k,)
    """
    n, k = patients.shape[0], therapists.shape[0]
    if caps.sum() < n:
        raise ConfigurationError("therapist caseload caps are below the number of patients")
    if patients.ndim == 2:
        diff = patients[:, None, :] - therapists[None, :, :]
    else:
        diff = patients - therapists[None, :, :]
    dist = np.sqrt(np.sum(diff**2, axis=-1)).ravel()
    pid = np.repeat(np.arange(n), k)
    tid = np.tile(np.arange(k), n)
    order = np.lexsort((tid, pid, dist))
    out = np.full(n, -1, dtype=np.int64)
    load = np.zeros(k, dtype=np.int64)
    left = n
    for idx in order:
        p, t = pid[idx], tid[idx]
        if out[p] < 0 and load[t] < caps[t]:
            out[p] = t
            load[t] += 1
            left -= 1
            if not left:
                break
    return out


METHOD_LABELS = {1: "method-1", 2: "method-2", 3: "method-3", 4: "proposed", 5: "method-5"}


def assign_by_method(spec: DesignSpec, method: int, matching_inputs: MatchingInputs | None = None) -> AllocationTable:
    """Allocation under one of the five assignment methods.

    1. randomise interventions, then match therapists to patients seeing the
       arm (at most n_R patients per intervention-therapist cell per block);
    2. match therapists first (caseload n_I * n_R per block), then randomise
       interventions ignoring therapist;
    3. match therapists first, then randomise interventions within each
       therapist's caseload;
    4. joint randomisation of the (intervention, therapist) combination;
    5. randomise interventions, then randomise therapists within each arm.

    Matching is greedy on covariate distance, see :func:`greedy_match`.
    """
    if method not in METHOD_LABELS:
        raise ConfigurationError(f"method must be 1..5, got {method!r}")
    if method == 4:
        return randomise(spec)
    if method in (1, 2, 3) and matching_inputs is None:
        raise ConfigurationError(f"method {method} assigns therapists by covariate matching; matching inputs are required")
    if matching_inputs is not None:
        if matching_inputs.patient_covariates.shape[0] != spec.n_units:
            raise ConfigurationError("patient covariates must have one row per patient")
        n_ther = matching_inputs.therapist_centres.shape[-2]
        if n_ther != spec.n_therapists:
            raise ConfigurationError("therapist centres must have one row per therapist")

    i0, t0 = _systematic_block(spec)
    per_block = {}
    for c, b, rows in _blocks(spec):
        rng = spec.block_rng(c, b)
        ids = c * spec.n_T + np.arange(spec.n_T)
        size = spec.block_size
        if method in (1, 5):
            inter = rng.permutation(i0)
            ther = np.empty(size, dtype=np.int64)
            for arm in range(spec.n_I):
                members = np.flatnonzero(inter == arm)
                if method == 5:
                    slots = np.repeat(np.arange(spec.n_T), spec.n_R)
                    ther[members] = rng.permutation(slots)
                else:
                    pts = matching_inputs.patient(np.arange(rows.start, rows.stop)[members], np.full(members.size, arm))
                    cen = matching_inputs.therapist(ids, arm)
                    ther[members] = greedy_match(pts, cen, np.full(spec.n_T, spec.n_R))
        else:
            pts = matching_inputs.patient(np.arange(rows.start, rows.stop))
            cen = matching_inputs.therapist(ids)
            ther = greedy_match(pts, cen, np.full(spec.n_T, spec.n_I * spec.n_R))
            if method == 2:
                inter = rng.permutation(i0)
            else:
                inter = np.empty(size, dtype=np.int64)
                arms = np.repeat(np.arange(spec.n_I), spec.n_R)
                for t in range(spec.n_T):
                    inter[ther == t] = rng.permutation(arms)
        per_block[c, b] = (inter, ther)
    return _assemble(spec, per_block, METHOD_LABELS[method])
