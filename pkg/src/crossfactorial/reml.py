"""Residual maximum likelihood for crossed random-effects models.

The model is y = X delta + sum_k Z_k u_k + e with independent effects
u_k ~ N(0, sigma2_k I) per level of each random term and e ~ N(0, sigma2_e I).
X holds an intercept and sum-to-zero contrasts of the intervention factor.

Two likelihood backends share one optimiser:

* ``stratum``: when the realised design is an orthogonal block structure the
  covariance is diagonal in the strata, so the restricted likelihood depends
  on the data only through stratum sums of squares.
* ``dense``: otherwise units are collapsed to classes (distinct combinations
  of all factor levels) and the likelihood is evaluated on class means plus
  the pooled within-class sum of squares.

Both return identical values on balanced data.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy import linalg, stats
from scipy.linalg import lapack

from .anova import TestResult, degrees_of_freedom, stratum_components, xi_matrix
from .exceptions import StructuralError, UsageError
from .factors import Factor, build_lattice, canonical_term

LOG_2PI = math.log(2.0 * math.pi)


def effect_contrasts(n_levels: int) -> np.ndarray:
    """Sum-to-zero contrasts, shape (n_levels, n_levels - 1).

    Column j compares level ``n_levels - j`` (1-based) with the mean of the
    levels before it, scaled so the earlier levels carry weight 1/(m) and the
    compared level -1.  Two levels give (1, -1); three give the columns
    (1/2, 1/2, -1) and (1, -1, 0).
    """
    if n_levels < 2:
        raise StructuralError("contrasts need at least two levels")
    out = np.zeros((n_levels, n_levels - 1))
    for j in range(n_levels - 1):
        m = n_levels - 1 - j
        out[:m, j] = 1.0 / m
        out[m, j] = -1.0
    return out


@dataclass(frozen=True)
class ModelSpec:
    """Random terms and the fixed intervention contrasts of a mixed model.

    Parameters
    ----------
    random_terms : tuple of str
        Grouping terms such as ``T`` or ``I:T:B``; each carries one
        variance component.  The residual is always present.
    fixed : str or None
        Factor coded by sum-to-zero contrasts (None for intercept only).
    contrasts : ndarray, optional
        Override of :func:`effect_contrasts`, shape (n_levels, n_levels - 1).
    """

    random_terms: tuple
    fixed: str | None = "I"
    contrasts: np.ndarray | None = field(default=None, compare=False)

    def __post_init__(self):
        terms = tuple(dict.fromkeys(canonical_term(t) for t in self.random_terms))
        object.__setattr__(self, "random_terms", terms)

    @classmethod
    def for_shape(cls, shape: str) -> "ModelSpec":
        from .design import RANDOM_TERMS, shape_letter

        return cls(RANDOM_TERMS[shape_letter(shape)])


@dataclass(frozen=True)
class ModelFit:
    """Result of :func:`fit_reml`.

    ``coef`` is (delta0, delta1, ...); ``components`` maps each random term and
    ``E`` (residual) to its estimate; ``boundary`` flags components fixed at 0.
    """

    coef: np.ndarray
    coef_cov: np.ndarray
    components: dict
    boundary: dict
    loglik: float
    converged: bool
    n_iter: int
    loglik_trace: tuple
    satterthwaite_df: float
    backend: str
    n_units: int
    fixed: str | None
    y_digest: int = 0
    df_by_coef: tuple = ()

    @property
    def delta0(self) -> float:
        return float(self.coef[0])

    @property
    def delta1(self) -> float:
        return float(self.coef[1])

    @property
    def se(self) -> np.ndarray:
        return np.sqrt(np.diag(self.coef_cov))

    @property
    def se_delta(self) -> float:
        return float(self.se[1])

    @property
    def loglik_restricted(self) -> float:
        return self.loglik

    @property
    def boundary_flags(self) -> dict:
        return self.boundary

    def to_dict(self) -> dict:
        test = fixed_effect_test(self) if self.coef.size > 1 else None
        out = {
            "fixed": None if test is None else {
                "estimate": self.delta1,
                "se": self.se_delta,
                "df": test.df_den,
                "t": test.statistic,
                "p": test.p_value,
            },
            "intercept": {"estimate": self.delta0, "se": float(self.se[0])},
            "components": {k: float(v) for k, v in self.components.items()},
            "boundary": {k: bool(v) for k, v in self.boundary.items()},
            "reml_loglik": self.loglik,
            "converged": self.converged,
        }
        if self.coef.size > 2:
            out["contrasts"] = [
                {"estimate": float(self.coef[j]), "se": float(self.se[j]), "df": float(self.df_by_coef[j - 1])}
                for j in range(1, self.coef.size)
            ]
        return out

    def to_json(self, indent: int | None = 2) -> str:
        return json.dumps(self.to_dict(), indent=indent, allow_nan=True)


# ---------------------------------------------------------------------------
# backends


class _Backend:
    """Interface used by the optimiser; theta is (sigma2 per term..., sigma2_e)."""

    names: list
    n_units: int
    p: int

    def loglik(self, theta):  # pragma: no cover - interface
        raise NotImplementedError

    def derivatives(self, theta):
        """Return (loglik, score, fisher, observed)."""
        raise NotImplementedError

    def fixed(self, theta):
        """Return (coef, cov, grad) where grad[j] = d cov[j, j] / d theta."""
        raise NotImplementedError


class StratumBackend(_Backend):
    """Likelihood through stratum sums of squares on an orthogonal block structure."""

    def __init__(self, y, X, lattice, params_to_names, fixed_stratum):
        self.n_units = y.size
        self.p = X.shape[1]
        K, strata, params = xi_matrix(lattice)
        self.K = K
        self.strata = strata
        self.names = [params_to_names[pn] for pn in params]
        self.order = params
        df = degrees_of_freedom(lattice)
        nu = np.array([df[s] for s in strata], dtype=float)
        nu[strata.index("U")] -= 1
        if fixed_stratum is not None:
            nu[strata.index(fixed_stratum)] -= self.p - 1
        if np.any(nu < 0):
            raise StructuralError("fixed effects do not fit inside their strata")
        self.nu = nu
        self.X = X
        self.coef, *_ = np.linalg.lstsq(X, y, rcond=None)
        resid = y - X @ self.coef
        comps = stratum_components(resid, lattice)
        self.R = np.array([math.fsum(comps[s] ** 2) for s in strata])
        self.R[nu == 0] = 0.0
        self.xtx = X.T @ X
        self.logdet_xtx = np.linalg.slogdet(self.xtx)[1]
        self.u_index = strata.index("U")
        self.f_index = strata.index(fixed_stratum) if fixed_stratum is not None else None

    def _xi(self, theta):
        return self.K @ theta

    def loglik(self, theta):
        xi = self._xi(theta)
        if np.any(xi <= 0):
            return -np.inf
        nz = self.nu > 0
        # log|V| + log|X'V^-1 X| collapses to the residual df of each stratum
        return -0.5 * (
            (self.n_units - self.p) * LOG_2PI
            + math.fsum(self.nu[nz] * np.log(xi[nz]))
            + math.fsum(self.R[nz] / xi[nz])
            + self.logdet_xtx
        )

    def derivatives(self, theta):
        xi = self._xi(theta)
        nz = self.nu > 0
        K, nu, R = self.K[nz], self.nu[nz], self.R[nz]
        x = xi[nz]
        score = -0.5 * K.T @ (nu / x - R / x**2)
        fisher = 0.5 * (K.T * (nu / x**2)) @ K
        observed = (K.T * (R / x**3 - nu / (2 * x**2))) @ K
        return self.loglik(theta), score, fisher, observed

    def fixed(self, theta):
        xi = self._xi(theta)
        inv = np.linalg.inv(self.xtx)
        cov = np.zeros_like(inv)
        cov[0, 0] = xi[self.u_index] * inv[0, 0]
        grad = np.zeros((self.p, theta.size))
        grad[0] = inv[0, 0] * self.K[self.u_index]
        if self.p > 1:
            cov[1:, 1:] = xi[self.f_index] * inv[1:, 1:]
            for j in range(1, self.p):
                grad[j] = inv[j, j] * self.K[self.f_index]
        return self.coef.copy(), cov, grad


class DenseBackend(_Backend):
    """Likelihood on class means with dense class-by-class covariance."""

    def __init__(self, y, X, term_codes: Mapping[str, np.ndarray], class_codes: np.ndarray):
        self.n_units = y.size
        self.p = X.shape[1]
        classes, first, inv = np.unique(class_codes, return_index=True, return_inverse=True)
        inv = inv.reshape(-1)
        nc = classes.size
        m = np.bincount(inv, minlength=nc).astype(float)
        self.m = m
        self.nc = nc
        self.ybar = np.bincount(inv, weights=y, minlength=nc) / m
        self.ss_within = math.fsum((y - self.ybar[inv]) ** 2)
        self.Xc = X[first]
        if not np.allclose(X, self.Xc[inv]):
            raise StructuralError("fixed effects vary within a class")
        self.names = list(term_codes) + ["E"]
        # per term: None for the identity, else (sort order, group starts, n_levels)
        self.groups = []
        self.S = []
        for name, codes in term_codes.items():
            level = np.zeros(nc, dtype=np.int64)
            level[inv] = codes
            _, level = np.unique(level, return_inverse=True)
            level = level.reshape(-1)
            n_lev = level.max() + 1
            if n_lev == nc:
                self.groups.append(None)
                self.S.append(np.eye(nc))
            else:
                order = np.argsort(level, kind="stable")
                starts = np.flatnonzero(np.r_[True, np.diff(level[order]) != 0])
                self.groups.append((order, starts))
                self.S.append((level[:, None] == level[None, :]).astype(float))
        self.e_scale = 1.0 / np.sqrt(m)
        self.S.append(np.diag(1.0 / m))
        self.const = math.fsum(np.log(m))
        self.n_within = self.n_units - nc
        if np.linalg.matrix_rank(self.Xc) < self.p:
            raise StructuralError("fixed-effect design matrix is rank deficient")

    def _zt(self, a: int, A: np.ndarray) -> np.ndarray:
        """Z_a' A for the indicator (or scaling) matrix of term ``a``."""
        if a == len(self.groups):
            return self.e_scale[:, None] * A if A.ndim == 2 else self.e_scale * A
        grp = self.groups[a]
        if grp is None:
            return A
        order, starts = grp
        return np.add.reduceat(A[order], starts, axis=0)

    def _parts(self, theta):
        V = sum(t * S for t, S in zip(theta, self.S))
        c, info = lapack.dpotrf(V, lower=1)
        if info != 0:
            return None
        Vinv, info = lapack.dpotri(c, lower=1)
        if info != 0:
            return None
        Vinv = np.tril(Vinv) + np.tril(Vinv, -1).T
        W = Vinv @ self.Xc
        xvx = self.Xc.T @ W
        G = np.linalg.inv(xvx)
        P = Vinv - W @ G @ W.T
        logdet = 2.0 * np.sum(np.log(np.diag(c)))
        return V, P, W, G, xvx, logdet

    def _ll(self, theta, parts):
        _, P, _, _, xvx, logdet = parts
        te = theta[-1]
        py = P @ self.ybar
        return -0.5 * (
            (self.n_units - self.p) * LOG_2PI + logdet + self.const
            + self.n_within * math.log(te) + np.linalg.slogdet(xvx)[1]
            + float(self.ybar @ py) + self.ss_within / te
        )

    def loglik(self, theta):
        if theta[-1] <= 0:
            return -np.inf
        parts = self._parts(theta)
        if parts is None:
            return -np.inf
        return self._ll(theta, parts)

    def derivatives(self, theta):
        parts = self._parts(theta)
        if parts is None:
            raise np.linalg.LinAlgError("class covariance is not positive definite")
        _, P, _, _, _, _ = parts
        ll = self._ll(theta, parts)
        k = len(self.S)
        py = P @ self.ybar
        # Z_b' P for every term (P is symmetric, so its transpose is P Z_b)
        ZP = [self._zt(b, P) for b in range(k)]
        Zpy = [self._zt(b, py) for b in range(k)]
        score = np.empty(k)
        fisher = np.empty((k, k))
        for a in range(k):
            block_aa = self._zt(a, ZP[a].T)
            score[a] = -0.5 * (float(np.trace(block_aa)) - float(Zpy[a] @ Zpy[a]))
            for b in range(a, k):
                block = block_aa if b == a else self._zt(a, ZP[b].T)
                fisher[a, b] = fisher[b, a] = 0.5 * float(np.sum(block * block))
        te = theta[-1]
        score[-1] += -0.5 * (self.n_within / te - self.ss_within / te**2)
        H = np.column_stack([S @ py for S in self.S])
        observed = -fisher + H.T @ P @ H
        fisher[-1, -1] += 0.5 * self.n_within / te**2
        observed[-1, -1] += -0.5 * self.n_within / te**2 + self.ss_within / te**3
        return ll, score, fisher, observed

    def fixed(self, theta):
        parts = self._parts(theta)
        if parts is None:
            raise np.linalg.LinAlgError("class covariance is not positive definite")
        _, _, W, G, _, _ = parts
        coef = G @ (W.T @ self.ybar)
        grad = np.zeros((self.p, len(self.S)))
        for j in range(self.p):
            u = W @ G[:, j]
            grad[j] = [float(u @ S @ u) for S in self.S]
        return coef, G, grad


# ---------------------------------------------------------------------------
# optimiser


@dataclass
class _OptResult:
    theta: np.ndarray
    loglik: float
    converged: bool
    n_iter: int
    trace: list


def _project(theta, floor):
    out = np.maximum(theta, 0.0)
    out[-1] = max(out[-1], floor)
    return out


def optimise(backend: _Backend, theta0, rtol: float = 1e-10, max_iter: int = 200) -> _OptResult:
    """Projected Fisher scoring with step halving.

    Components sitting at zero with a non-positive score are held fixed for
    the step.  A step is accepted only if the restricted log-likelihood does
    not decrease, so the recorded trace is monotone.
    """
    theta0 = np.asarray(theta0, dtype=float)
    floor = 1e-12 * max(1.0, float(np.max(np.abs(theta0))))
    theta = _project(theta0, floor)
    ll = backend.loglik(theta)
    trace = [ll]
    converged = False
    n_iter = 0
    for n_iter in range(1, max_iter + 1):
        _, score, fisher, _ = backend.derivatives(theta)
        free = (theta > 0) | (score > 0)
        free[-1] = True
        step = np.zeros_like(theta)
        fs = fisher[np.ix_(free, free)]
        try:
            step[free] = linalg.solve(fs, score[free], assume_a="pos")
        except (linalg.LinAlgError, ValueError):
            step[free] = np.linalg.lstsq(fs, score[free], rcond=None)[0]
        decrement = float(score[free] @ step[free])
        t = 1.0
        accepted = False
        for _ in range(60):
            cand = _project(theta + t * step, floor)
            ll_c = backend.loglik(cand)
            if ll_c >= ll:
                accepted = True
                break
            t *= 0.5
        if not accepted:
            converged = decrement <= rtol * max(1.0, abs(ll))
            break
        gain = ll_c - ll
        moved = np.max(np.abs(cand - theta)) / max(1e-300, float(np.max(np.abs(cand))))
        theta, ll = cand, ll_c
        trace.append(ll)
        if gain <= rtol * max(1.0, abs(ll)) and (decrement <= rtol * max(1.0, abs(ll)) or moved <= 1e-12):
            converged = True
            break
    return _OptResult(theta, ll, converged, n_iter, trace)


# ---------------------------------------------------------------------------
# fitting


def _fixed_matrix(design, spec: ModelSpec) -> np.ndarray:
    n = design.n_units
    if spec.fixed is None:
        return np.ones((n, 1))
    codes = design.column(spec.fixed)
    n_levels = int(codes.max()) + 1
    C = spec.contrasts if spec.contrasts is not None else effect_contrasts(n_levels)
    C = np.asarray(C, dtype=float)
    if C.shape != (n_levels, n_levels - 1):
        raise StructuralError(f"contrast matrix must have shape ({n_levels}, {n_levels - 1})")
    X = np.column_stack([np.ones(n), C[codes]])
    if np.linalg.matrix_rank(X) < X.shape[1]:
        raise StructuralError("fixed-effect design matrix is rank deficient")
    return X


def _term_factors(design, spec: ModelSpec):
    """Parameter-carrying term factors; aliases of the fixed factor are dropped."""
    terms = {}
    fixed = design.factor(spec.fixed, "fixed") if spec.fixed is not None else None
    for t in spec.random_terms:
        f = design.factor(t)
        if fixed is not None and f.same_partition(fixed):
            continue
        if f.n_levels == f.n_units:
            raise StructuralError(f"random term {t} has one level per unit and is aliased with the residual")
        if f.n_levels == 1:
            raise StructuralError(f"random term {t} has a single level")
        if any(f.same_partition(g) for g in terms.values()):
            raise StructuralError(f"random term {t} duplicates another term")
        terms[t] = f
    return terms, fixed


def _commute(f: Factor, g: Factor, probes: np.ndarray) -> bool:
    # averaging operators commute iff P_f P_g v = P_g P_f v for generic v
    for v in probes:
        a = f.level_means(g.level_means(v))
        b = g.level_means(f.level_means(v))
        if not np.allclose(a, b, rtol=1e-9, atol=1e-9 * (1.0 + np.abs(v).max())):
            return False
    return True


def orthogonal_structure(design, spec: ModelSpec):
    """Lattice for the stratum backend, or None when the design is not an orthogonal block structure.

    Every factor must have equal replication and every pair of averaging
    operators must commute.  The result is cached on the design.
    """
    key = ("orthogonal-structure", spec.random_terms, spec.fixed)
    cache = getattr(design, "_cache", None)
    if cache is not None and key in cache:
        return cache[key]
    terms, fixed = _term_factors(design, spec)
    base = list(terms.values()) + ([fixed] if fixed is not None else [])
    probes = np.random.default_rng(20240601).standard_normal((2, design.n_units))
    lattice = None
    if all(f.is_uniform for f in base) and all(
        _commute(base[a], base[b], probes) for a in range(len(base)) for b in range(a + 1, len(base))
    ):
        lattice = build_lattice(base)
        if not all(f.is_uniform for f in lattice.random):
            lattice = None
        else:
            try:
                degrees_of_freedom(lattice)
            except StructuralError:
                lattice = None
    if cache is not None:
        cache[key] = lattice
    return lattice


def _stratum_backend(y, X, design, spec, lattice):
    terms, fixed = _term_factors(design, spec)
    names = {}
    for t, f in terms.items():
        match = next(g for g in lattice.random if g.same_partition(f))
        names[match.name] = t
    names["E"] = "E"
    fixed_stratum = None
    if fixed is not None:
        fixed_stratum = lattice.stratum_of_fixed(fixed.name).name
        # the contrasts must lie wholly in that stratum
        for j in range(1, X.shape[1]):
            comps = stratum_components(X[:, j] - X[:, j].mean(), lattice)
            total = sum(float(v @ v) for v in comps.values())
            if abs(float(comps[fixed_stratum] @ comps[fixed_stratum]) - total) > 1e-9 * max(total, 1.0):
                return None
    backend = StratumBackend(y, X, lattice, names, fixed_stratum)
    return backend


def _dense_backend(y, X, design, spec):
    terms, fixed = _term_factors(design, spec)
    cols = [f.level_of for f in terms.values()]
    if fixed is not None:
        cols.append(fixed.level_of)
    if cols:
        key = Factor("classes", np.zeros(design.n_units, dtype=np.int64))
        for c in cols:
            key = Factor("classes", key.level_of * (int(c.max()) + 1) + c)
        class_codes = key.level_of
    else:
        class_codes = np.zeros(design.n_units, dtype=np.int64)
    return DenseBackend(y, X, {t: f.level_of for t, f in terms.items()}, class_codes)


def _start(backend: _Backend, y) -> np.ndarray:
    if isinstance(backend, StratumBackend):
        # moment solution of the stratum equations, truncated at zero
        rows = [backend.strata.index(p) for p in backend.order]
        nu = backend.nu[rows]
        ms = np.where(nu > 0, backend.R[rows] / np.maximum(nu, 1), 0.0)
        try:
            theta = np.linalg.solve(backend.K[rows], ms)
        except np.linalg.LinAlgError:
            theta = np.full(len(rows), np.var(y) / len(rows))
        theta = np.maximum(theta, 0.0)
        if theta[-1] <= 0:
            theta[-1] = max(float(np.var(y)), 1e-8)
        return theta
    k = len(backend.names)
    total = max(float(np.var(y)), 1e-8)
    theta = np.full(k, 0.5 * total / max(k - 1, 1))
    theta[-1] = 0.5 * total
    return theta


def _satterthwaite(v: float, grad: np.ndarray, info: np.ndarray, active: np.ndarray, fallback: np.ndarray) -> float:
    g = grad[active]
    if not np.any(g):
        return float("inf")
    for mat in (info, fallback):
        sub = mat[np.ix_(active, active)]
        try:
            c = linalg.cho_factor(sub)
        except linalg.LinAlgError:
            continue
        var_v = float(g @ linalg.cho_solve(c, g))
        if var_v > 0:
            return 2.0 * v * v / var_v
    return float("nan")


def fit_reml(y, design, spec: ModelSpec | None = None, *, backend: str = "auto", start=None,
             rtol: float = 1e-10, max_iter: int = 200, information: str = "observed") -> ModelFit:
    """Fit a mixed model by restricted maximum likelihood.

    Parameters
    ----------
    y : array_like, shape (N,)
    design : AllocationTable
    spec : ModelSpec, optional
        Defaults to the standard model of the design's shape.
    backend : {"auto", "stratum", "dense"}
        ``auto`` uses the stratum form when the realised design is an
        orthogonal block structure.
    start : array_like, optional
        Starting components in the order of the fitted terms then ``E``.
    rtol, max_iter
        Convergence on relative change of the restricted log-likelihood.
    information : {"observed", "expected"}
        Information matrix used for the Satterthwaite df.

    Returns
    -------
    ModelFit
    """
    y = np.asarray(y, dtype=float)
    if y.ndim != 1 or y.size != design.n_units:
        raise StructuralError(f"outcome has length {y.size}, design has {design.n_units} units")
    if not np.all(np.isfinite(y)):
        raise StructuralError("outcome contains non-finite values")
    if spec is None:
        if design.spec is None:
            raise StructuralError("design shape unknown; pass a ModelSpec")
        spec = ModelSpec.for_shape(design.spec.shape)
    X = _fixed_matrix(design, spec)

    model = None
    if backend in ("auto", "stratum"):
        lattice = orthogonal_structure(design, spec)
        if lattice is not None:
            model = _stratum_backend(y, X, design, spec, lattice)
        if model is None and backend == "stratum":
            raise StructuralError("realised design is not an orthogonal block structure")
    if model is None:
        if backend not in ("auto", "dense"):
            raise UsageError(f"unknown backend {backend!r}")
        model = _dense_backend(y, X, design, spec)

    theta0 = _start(model, y) if start is None else _reorder(start, spec, model)
    res = optimise(model, theta0, rtol=rtol, max_iter=max_iter)
    theta = res.theta
    _, score, fisher, observed = model.derivatives(theta)
    coef, cov, grad = model.fixed(theta)
    active = theta > 0
    info = observed if information == "observed" else fisher
    dfs = tuple(_satterthwaite(cov[j, j], grad[j], info, active, fisher) for j in range(1, model.p))
    comps = {n: float(t) for n, t in zip(model.names, theta)}
    ordered = {t: comps[t] for t in _fitted_terms(spec, model)}
    ordered["E"] = comps["E"]
    return ModelFit(
        coef=coef, coef_cov=cov, components=ordered,
        boundary={k: v == 0.0 for k, v in ordered.items() if k != "E"},
        loglik=float(res.loglik), converged=res.converged, n_iter=res.n_iter,
        loglik_trace=tuple(res.trace), satterthwaite_df=dfs[0] if dfs else float("nan"),
        backend="stratum" if isinstance(model, StratumBackend) else "dense",
        n_units=design.n_units, fixed=spec.fixed, y_digest=hash(y.tobytes()), df_by_coef=dfs,
    )


def _fitted_terms(spec, model):
    return [t for t in spec.random_terms if t in model.names]


def _reorder(start, spec, model):
    start = np.asarray(start, dtype=float)
    names = _fitted_terms(spec, model) + ["E"]
    if start.size != len(names):
        raise UsageError(f"start needs {len(names)} values ({', '.join(names)})")
    lookup = dict(zip(names, start))
    return np.array([lookup[n] for n in model.names])


def restricted_loglik(y, design, spec: ModelSpec, theta: Mapping[str, float], backend: str = "dense") -> tuple:
    """Restricted log-likelihood and score at given components (for checks).

    Returns
    -------
    loglik : float
    score : dict
        Analytic derivative with respect to each component.
    """
    y = np.asarray(y, dtype=float)
    X = _fixed_matrix(design, spec)
    if backend == "stratum":
        lattice = orthogonal_structure(design, spec)
        model = _stratum_backend(y, X, design, spec, lattice) if lattice is not None else None
        if model is None:
            raise StructuralError("realised design is not an orthogonal block structure")
    else:
        model = _dense_backend(y, X, design, spec)
    vec = np.array([float(theta[n]) for n in model.names])
    ll, score, _, _ = model.derivatives(vec)
    return ll, dict(zip(model.names, score))


def fixed_effect_test(fit: ModelFit, index: int = 1) -> TestResult:
    """Satterthwaite t-test of one intervention contrast."""
    est = float(fit.coef[index])
    se = float(math.sqrt(fit.coef_cov[index, index]))
    df = fit.df_by_coef[index - 1]
    name = f"delta{index}"
    if not se > 0 or not (df > 0):
        return TestResult(name, None, 1, df, None, "satterthwaite-t", (), "standard error is zero; test undefined")
    t = est / se
    p = float(2.0 * stats.t.sf(abs(t), df)) if math.isfinite(df) else float(2.0 * stats.norm.sf(abs(t)))
    return TestResult(name, t, 1, df, min(1.0, p), "satterthwaite-t")


def lr_test_random(fit_full: ModelFit, fit_reduced: ModelFit) -> TestResult:
    """Likelihood-ratio test of random terms dropped from ``fit_full``.

    The null distribution is the 50:50 mixture of chi-square with k-1 and k
    degrees of freedom, k the number of dropped components (k = 1 gives the
    mixture of a point mass at zero and chi-square on 1 df).
    """
    full = set(fit_full.components)
    red = set(fit_reduced.components)
    if not red < full and red != full:
        raise UsageError("reduced model is not nested in the full model")
    if fit_full.n_units != fit_reduced.n_units or fit_full.fixed != fit_reduced.fixed:
        raise UsageError("models differ in data size or fixed effects")
    if fit_full.y_digest != fit_reduced.y_digest:
        raise UsageError("models were fitted to different outcomes")
    k = len(full - red)
    stat = max(0.0, 2.0 * (fit_full.loglik - fit_reduced.loglik))
    dropped = tuple(sorted(full - red))
    if k == 0 or stat == 0.0:
        return TestResult("+".join(dropped) or "none", stat, k, None, 1.0, "lr-mixture", dropped)
    lo = stats.chi2.sf(stat, k - 1) if k > 1 else 0.0
    p = 0.5 * lo + 0.5 * stats.chi2.sf(stat, k)
    return TestResult("+".join(dropped), stat, k, None, float(p), "lr-mixture", dropped)
