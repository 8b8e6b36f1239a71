"""Monte Carlo comparison of the five therapist/intervention assignment methods.

Data generation per replicate:

1. draw an allocation with the chosen method;
2. draw one random effect per level of every random term of the example's
   model, plus residuals;
3. add patient covariates.  Each therapist t has a profile mean
   ``m2[t] ~ N(delta2, 1)`` and each (intervention, therapist) cell a profile
   mean ``m3[i, t] ~ N(delta3, 1)``.  Patient p belongs to the profile of
   therapist ``t_prof(p)`` and carries ``x2 = m2[t_prof] + N(0, 1)`` and
   ``x3 = m3[i, t_prof] + N(0, 1)`` for its realised intervention i.  A
   covariate enters the outcome (coefficient 1) only when its delta is
   non-zero.  The non-random methods match patients to therapists on the
   profile means, so they recover ``t_prof``; randomised methods ignore it.

``t_prof`` follows the systematic layout of the block for methods 2-4 and the
systematic layout within each randomised arm for methods 1 and 5, where the
arm is drawn before any therapist is chosen.
"""
from __future__ import annotations

import csv
import io
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .design import (
    DesignSpec, MatchingInputs, assign_by_method, randomised_interventions,
    systematic_therapist_slots,
)
from .exceptions import ConfigurationError, UsageError
from .reml import ModelSpec, effect_contrasts, fit_reml, fixed_effect_test

# Parameter values of the three worked examples; variance components are
# keyed by the random term they belong to and E is the residual.
TRUTHS = {
    1: {"delta0": 0.0, "delta1": 0.315, "T": 0.10, "I:T": 0.15, "E": 0.75},
    2: {"delta0": 0.0, "delta1": 0.180, "T": 0.10, "I:T": 0.15, "E": 0.35,
        "B": 0.10, "T:B": 0.10, "I:B": 0.10, "I:T:B": 0.10},
    3: {"delta0": 0.0, "delta1": 0.180, "T": 0.10, "I:T": 0.10, "E": 0.20,
        "B": 0.10, "T:B": 0.05, "I:B": 0.10, "I:T:B": 0.05,
        "C": 0.10, "C:B": 0.05, "I:C": 0.10, "I:C:B": 0.05},
}

DESIGNS = {
    1: dict(shape="a", n_I=2, n_T=16, n_B=1, n_C=1, n_R=10),
    2: dict(shape="b", n_I=2, n_T=16, n_B=5, n_C=1, n_R=2),
    3: dict(shape="c", n_I=2, n_T=8, n_B=5, n_C=6, n_R=2),
}

COVARIATE_MODES = ("mean-shift", "coefficient")
MAX_FAILURE_RATE = 0.001


@dataclass(frozen=True)
class SimConfig:
    """One cell of the simulation study.

    Parameters
    ----------
    example : int
        1, 2 or 3: completely randomised, randomised block or multicentre.
    truths : dict, optional
        Parameter values; defaults to :data:`TRUTHS` for the example.
    delta2, delta3 : float
        Profile means of the therapist-linked and the intervention-linked
        covariate.  Methods 2-4 require ``delta3 == 0``.
    method : int
        Assignment method 1..5 (4 is joint randomisation).
    replications : int
    master_seed : int
    alpha : float
        Significance level of the intervention test.
    covariate_mode : str
        ``mean-shift`` (covariates with mean delta enter with coefficient 1)
        or ``coefficient`` (zero-mean covariates enter with coefficient delta).
    """

    example: int = 1
    truths: dict | None = None
    delta2: float = 0.0
    delta3: float = 0.0
    method: int = 4
    replications: int = 1000
    master_seed: int = 0
    alpha: float = 0.05
    covariate_mode: str = "mean-shift"

    def __post_init__(self):
        if self.example not in TRUTHS:
            raise ConfigurationError(f"example must be 1, 2 or 3, got {self.example!r}")
        if self.method not in (1, 2, 3, 4, 5):
            raise ConfigurationError(f"method must be 1..5, got {self.method!r}")
        if self.method in (2, 3, 4) and self.delta3 != 0:
            raise ConfigurationError(
                f"method {self.method} assigns therapists before or with the intervention; delta3 must be 0"
            )
        if isinstance(self.replications, bool) or int(self.replications) != self.replications or self.replications < 1:
            raise ConfigurationError("replications must be a positive integer")
        if not 0 < self.alpha < 1:
            raise ConfigurationError("alpha must lie in (0, 1)")
        if not 0 <= int(self.master_seed) < 2**64:
            raise ConfigurationError("master_seed must be an unsigned 64-bit integer")
        if self.covariate_mode not in COVARIATE_MODES:
            raise ConfigurationError(f"covariate_mode must be one of {', '.join(COVARIATE_MODES)}")
        truths = dict(TRUTHS[self.example])
        if self.truths:
            unknown = set(self.truths) - set(truths)
            if unknown:
                raise ConfigurationError(f"unknown parameters for example {self.example}: {', '.join(sorted(unknown))}")
            truths.update({k: float(v) for k, v in self.truths.items()})
        if any(v < 0 for k, v in truths.items() if not k.startswith("delta")):
            raise ConfigurationError("variance components must be nonnegative")
        object.__setattr__(self, "truths", truths)
        object.__setattr__(self, "replications", int(self.replications))

    @property
    def design_counts(self) -> dict:
        return DESIGNS[self.example]

    @property
    def label(self) -> str:
        return f"D{self.method}{self.example}"

    @classmethod
    def from_mapping(cls, data: Mapping) -> "SimConfig":
        allowed = {f for f in cls.__dataclass_fields__}
        unknown = set(data) - allowed
        if unknown:
            raise ConfigurationError(f"unknown config fields: {', '.join(sorted(unknown))}")
        return cls(**dict(data))


def load_configs(path: str | Path, defaults: Mapping | None = None) -> list:
    """Read one cell or ``{"cells": [...]}`` from a JSON or TOML file.

    Top-level fields other than ``cells`` act as defaults for every cell, and
    ``defaults`` sits below those (values in the file win).
    """
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    try:
        if path.suffix.lower() == ".toml":
            try:
                import tomllib
            except ModuleNotFoundError:  # Python < 3.11
                import tomli as tomllib
            data = tomllib.loads(text)
        else:
            data = json.loads(text)
    except ValueError as exc:
        raise ConfigurationError(f"cannot parse {path.name}: {exc}") from None
    if not isinstance(data, dict):
        raise ConfigurationError("config must be a mapping")
    data = {**(defaults or {}), **data}
    cells = data.pop("cells", None)
    if cells is None:
        return [SimConfig.from_mapping(data)]
    if not isinstance(cells, list) or not cells:
        raise ConfigurationError("cells must be a non-empty list")
    return [SimConfig.from_mapping({**data, **cell}) for cell in cells]


# ---------------------------------------------------------------------------
# data generation


@dataclass(frozen=True, eq=False)
class Dataset:
    y: np.ndarray
    covariates: dict
    table: object
    profile_therapist: np.ndarray
    arm_code: np.ndarray


def _replicate_seeds(config: SimConfig, index: int):
    seq = np.random.SeedSequence(config.master_seed, spawn_key=(index,))
    alloc_seq, data_seq = seq.spawn(2)
    alloc_seed = int(alloc_seq.generate_state(1, dtype=np.uint64)[0])
    return alloc_seed, np.random.Generator(np.random.PCG64(data_seq))


def _profile_slots(spec: DesignSpec, method: int) -> np.ndarray:
    """Global therapist whose profile each patient shares."""
    block_of_row = np.repeat(np.arange(spec.n_blocks), spec.block_size)
    centre = block_of_row // spec.n_B
    if method in (2, 3, 4):
        local = systematic_therapist_slots(spec)
    else:
        arms = randomised_interventions(spec)
        local = np.empty(spec.n_units, dtype=np.int64)
        slots = np.repeat(np.arange(spec.n_T), spec.n_R)
        for blk in range(spec.n_blocks):
            rows = np.arange(blk * spec.block_size, (blk + 1) * spec.block_size)
            for arm in range(spec.n_I):
                local[rows[arms[rows] == arm]] = slots
    return centre * spec.n_T + local


def profile_inputs(spec: DesignSpec, method: int, rng: np.random.Generator,
                   delta2: float = 0.0, delta3: float = 0.0) -> tuple:
    """Draw therapist profiles and the matching inputs they imply.

    Each therapist has a profile mean ``m2 ~ N(delta2, 1)`` for the
    therapist-linked covariate and, per intervention, ``m3 ~ N(delta3, 1)``
    for the intervention-linked one.  Patient ``p`` shares the profile of
    therapist slot ``t_prof[p]``.

    Returns
    -------
    inputs : MatchingInputs
    t_prof : ndarray of int
    m2 : ndarray, shape (n_therapists,)
    m3 : ndarray, shape (n_I, n_therapists)
    """
    n_ther = spec.n_therapists
    m2 = rng.normal(delta2, 1.0, n_ther)
    m3 = rng.normal(delta3, 1.0, (spec.n_I, n_ther))
    t_prof = _profile_slots(spec, method)
    patient = np.stack([np.broadcast_to(m2[t_prof][:, None], (spec.n_units, spec.n_I)),
                        m3[:, t_prof].T], axis=-1)
    centres = np.stack([np.broadcast_to(m2, (spec.n_I, n_ther)), m3], axis=-1)
    return MatchingInputs(patient, centres), t_prof, m2, m3


def generate_dataset(config: SimConfig, replicate_index: int, delta1: float | None = None) -> Dataset:
    """Allocation, covariates and outcome for one replicate (deterministic)."""
    alloc_seed, rng = _replicate_seeds(config, replicate_index)
    spec = DesignSpec(seed=alloc_seed, **config.design_counts)
    truths = config.truths

    shift = config.covariate_mode == "mean-shift"
    inputs, t_prof, m2, m3 = profile_inputs(spec, config.method, rng,
                                            config.delta2 if shift else 0.0, config.delta3 if shift else 0.0)
    table = assign_by_method(spec, config.method, inputs)

    n = spec.n_units
    code = effect_contrasts(spec.n_I)[:, 0][table.intervention]
    d1 = truths["delta1"] if delta1 is None else delta1
    y = truths["delta0"] + d1 * code
    for term in sorted(k for k in truths if not k.startswith("delta") and k != "E"):
        var = truths[term]
        f = table.factor(term)
        effects = rng.normal(0.0, math.sqrt(var), f.n_levels)
        y = y + effects[f.level_of]
    y = y + rng.normal(0.0, math.sqrt(truths["E"]), n)

    x2 = m2[t_prof] + rng.normal(0.0, 1.0, n)
    x3 = m3[table.intervention, t_prof] + rng.normal(0.0, 1.0, n)
    covariates = {}
    if config.delta2 != 0:
        y = y + (x2 if shift else config.delta2 * x2)
        covariates["x2"] = x2
    if config.delta3 != 0:
        y = y + (x3 if shift else config.delta3 * x3)
        covariates["x3"] = x3
    return Dataset(y, covariates, table, t_prof, code)


# ---------------------------------------------------------------------------
# the study


@dataclass(frozen=True)
class ReplicateRecord:
    index: int
    ok: bool
    delta1_hat: float = float("nan")
    se: float = float("nan")
    sigma_u1: float = float("nan")
    sigma_v1: float = float("nan")
    boundary: bool = False
    reject_truth: bool = False
    reject_null: bool = False
    error: str = ""


def run_replicate(config: SimConfig, index: int) -> ReplicateRecord:
    """Fit the truth run and the paired delta1 = 0 run of one replicate."""
    data = generate_dataset(config, index)
    spec = ModelSpec.for_shape(config.design_counts["shape"])
    y_null = data.y - config.truths["delta1"] * data.arm_code
    try:
        fit = fit_reml(data.y, data.table, spec)
        fit0 = fit_reml(y_null, data.table, spec)
    except Exception as exc:  # a failed fit is counted, not fatal
        return ReplicateRecord(index, False, error=f"{type(exc).__name__}: {exc}")
    if not (fit.converged and fit0.converged):
        return ReplicateRecord(index, False, error="did not converge")
    t1, t0 = fixed_effect_test(fit), fixed_effect_test(fit0)
    p1 = t1.p_value if t1.p_value is not None else 1.0
    p0 = t0.p_value if t0.p_value is not None else 1.0
    return ReplicateRecord(
        index, True, fit.delta1, fit.se_delta, fit.components["T"], fit.components["I:T"],
        bool(fit.boundary["T"] or fit.boundary["I:T"]), p1 < config.alpha, p0 < config.alpha,
    )


def _run_chunk(args):
    config, indices = args
    return [run_replicate(config, i) for i in indices]


@dataclass(frozen=True)
class SimSummary:
    """Averages over replicates with Monte Carlo standard errors."""

    config: SimConfig
    n_replications: int
    n_failures: int
    mean_delta1_hat: float
    mean_se: float
    mean_sigma_u1: float
    mean_sigma_v1: float
    type1: float
    type2: float
    boundary_rate: float
    mc_se: dict = field(default_factory=dict)
    failures: tuple = ()

    @property
    def failure_rate(self) -> float:
        return self.n_failures / self.n_replications

    @property
    def acceptable(self) -> bool:
        return self.failure_rate <= MAX_FAILURE_RATE

    def row(self) -> dict:
        c = self.config
        out = {
            "example": c.example, "method": c.method, "delta3": c.delta3, "delta2": c.delta2,
            "delta1_hat": self.mean_delta1_hat, "se_delta1_hat": self.mean_se,
            "sigma2_u1_hat": self.mean_sigma_u1, "sigma2_v1_hat": self.mean_sigma_v1,
            "type1_error": self.type1, "type2_error": self.type2,
            "boundary_estimates": self.boundary_rate,
            "replications": self.n_replications, "failures": self.n_failures,
        }
        out.update({f"mc_se_{k}": v for k, v in self.mc_se.items()})
        return out


def _mean_and_se(values: Sequence[float]) -> tuple:
    n = len(values)
    if n == 0:
        return float("nan"), float("nan")
    mean = math.fsum(values) / n
    if n < 2:
        return mean, float("nan")
    var = math.fsum((v - mean) ** 2 for v in values) / (n - 1)
    return mean, math.sqrt(var / n)


def summarise(config: SimConfig, records: Iterable[ReplicateRecord]) -> SimSummary:
    records = sorted(records, key=lambda r: r.index)
    good = [r for r in records if r.ok]
    metrics = {
        "delta1_hat": [r.delta1_hat for r in good],
        "se": [r.se for r in good],
        "sigma_u1": [r.sigma_u1 for r in good],
        "sigma_v1": [r.sigma_v1 for r in good],
        "type1": [float(r.reject_null) for r in good],
        "type2": [float(not r.reject_truth) for r in good],
        "boundary": [float(r.boundary) for r in good],
    }
    means, ses = {}, {}
    for k, v in metrics.items():
        means[k], ses[k] = _mean_and_se(v)
    return SimSummary(
        config, len(records), len(records) - len(good),
        means["delta1_hat"], means["se"], means["sigma_u1"], means["sigma_v1"],
        means["type1"], means["type2"], means["boundary"], ses,
        tuple((r.index, r.error) for r in records if not r.ok),
    )


def run_study(config: SimConfig, jobs: int = 1, replications: int | None = None) -> SimSummary:
    """Run every replicate of one cell and aggregate.

    Results do not depend on ``jobs``: each replicate draws from its own seed
    derived from (master_seed, index) and aggregation is order-free.
    """
    if replications is not None:
        config = replace(config, replications=replications)
    n = config.replications
    if jobs is None or jobs < 1:
        raise ConfigurationError("jobs must be a positive integer")
    if jobs == 1 or n < 2:
        records = _run_chunk((config, range(n)))
    else:
        chunks = [(config, range(k, n, jobs)) for k in range(jobs)]
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            records = [r for part in pool.map(_run_chunk, chunks) for r in part]
    return summarise(config, records)


# ---------------------------------------------------------------------------
# reports

CELLS = ((0.0, 0.0), (0.0, 0.2), (0.2, 0.0), (0.2, 0.2))
COMPARISONS = ((1, 2), (2, 3), (3, 4), (4, 5))
_METRICS = (
    ("δ̂1", "mean_delta1_hat", "{:.3f}"),
    ("SE(δ̂1)", "mean_se", "{:.3f}"),
    ("σ̂²_u1", "mean_sigma_u1", "{:.2f}"),
    ("σ̂²_v1", "mean_sigma_v1", "{:.2f}"),
    ("Type I", "type1", "{:.2f}"),
    ("Type II", "type2", "{:.2f}"),
    ("Boundary", "boundary_rate", "{:.0%}"),
)


@dataclass(frozen=True)
class ComparisonReport:
    summaries: tuple
    methods: tuple
    cells: tuple

    def lookup(self, method: int, delta3: float, delta2: float):
        for s in self.summaries:
            c = s.config
            if c.method == method and c.delta3 == delta3 and c.delta2 == delta2:
                return s
        return None

    def to_markdown(self) -> str:
        head = ["δ3", "δ2"]
        for name, _, _ in _METRICS:
            head += [f"{name} D{m}{self.summaries[0].config.example}" for m in self.methods]
        lines = ["| " + " | ".join(head) + " |", "|" + "---|" * len(head)]
        for d3, d2 in self.cells:
            cells = [f"{d3:g}", f"{d2:g}"]
            for _, attr, fmt in _METRICS:
                for m in self.methods:
                    s = self.lookup(m, d3, d2)
                    cells.append("-" if s is None else fmt.format(getattr(s, attr)))
            lines.append("| " + " | ".join(cells) + " |")
        return "\n".join(lines) + "\n"


def compare_methods(configs: Sequence, jobs: int = 1) -> ComparisonReport:
    """Side-by-side table of cells sharing one example.

    ``configs`` may hold :class:`SimConfig` (run here) or finished
    :class:`SimSummary` objects.  Cells a method cannot have (delta3 != 0 for
    methods 2-4) and cells not supplied are shown as dashes.
    """
    if not configs:
        raise UsageError("no configurations to compare")
    summaries = [c if isinstance(c, SimSummary) else run_study(c, jobs=jobs) for c in configs]
    examples = {s.config.example for s in summaries}
    if len(examples) != 1:
        raise UsageError("all configurations must share one example")
    truths = {json.dumps(s.config.truths, sort_keys=True) for s in summaries}
    if len(truths) != 1:
        raise UsageError("all configurations must share the same parameter values")
    methods = tuple(sorted({s.config.method for s in summaries}))
    present = {(s.config.delta3, s.config.delta2) for s in summaries}
    cells = tuple(c for c in CELLS if c in present) + tuple(sorted(present - set(CELLS)))
    return ComparisonReport(tuple(summaries), methods, cells)


def summaries_to_csv(summaries: Sequence[SimSummary]) -> str:
    rows = [s.row() for s in summaries]
    buf = io.StringIO()
    if rows:
        w = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (f"{v:.10g}" if isinstance(v, float) else v) for k, v in r.items()})
    return buf.getvalue()


def method_comparison_configs(example: int = 1, replications: int = 1000, master_seed: int = 0) -> list:
    """Every populated cell of the four comparisons for one example."""
    out = []
    for method in (1, 2, 3, 4, 5):
        for d3, d2 in CELLS:
            if d3 != 0 and method in (2, 3, 4):
                continue
            out.append(SimConfig(example=example, delta2=d2, delta3=d3, method=method,
                                 replications=replications, master_seed=master_seed))
    return out
