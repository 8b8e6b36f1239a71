"""scikit-learn style wrappers around the ANOVA and REML fits.

``X`` is a design frame (see :func:`check_design_frame`) and ``y`` the
outcome.  ``predict`` returns the fitted fixed-effect mean of each row, i.e.
the population-level prediction with all random effects at zero.
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import check_design_frame, check_response
from .anova import anova, estimate_components_anova
from .exceptions import ConfigurationError
from .formula import parse, to_model
from .reml import ModelSpec, effect_contrasts, fit_reml


def _model_for(formula, random_terms, design):
    if formula is not None:
        lattice, spec = to_model(parse(formula), design)
        return lattice, spec
    if random_terms is None:
        if design.spec is None:
            raise ConfigurationError("design shape cannot be inferred; give formula or random_terms")
        return None, ModelSpec.for_shape(design.spec.shape)
    return None, ModelSpec(tuple(random_terms))


class StratumANOVA(RegressorMixin, BaseEstimator):
    """Stratum ANOVA with moment estimates of the variance components.

    Parameters
    ----------
    formula : str, optional
        E.g. ``"y~I+Error(T+I:T)"``.  Defaults to the standard model of the
        design's shape.
    allow_negative : bool
        Keep negative component estimates instead of truncating them at 0.

    Attributes
    ----------
    table_ : AnovaTable
    components_ : dict
    test_ : TestResult
        Test of the intervention effect.
    level_means_ : ndarray
        Fitted mean of each intervention level.
    """

    def __init__(self, formula: str | None = None, allow_negative: bool = False):
        self.formula = formula
        self.allow_negative = allow_negative

    def fit(self, X, y):
        design = check_design_frame(X)
        y = check_response(y, design.n_units)
        lattice, _ = _model_for(self.formula, None, design)
        self.table_ = anova(y, design=design, lattice=lattice)
        est = estimate_components_anova(self.table_, allow_negative=self.allow_negative)
        self.components_ = est.components
        self.negative_components_ = est.negative
        self.test_ = self.table_.test("I") if self.table_.fixed_name == "I" else None
        codes = design.intervention
        self.level_means_ = np.bincount(codes, weights=y) / np.bincount(codes)
        self.n_features_in_ = 4
        return self

    def predict(self, X):
        check_is_fitted(self, "level_means_")
        design = check_design_frame(X)
        codes = design.intervention
        if codes.max() >= self.level_means_.size:
            raise ConfigurationError("intervention level not seen during fit")
        return self.level_means_[codes]


class REMLMixedModel(RegressorMixin, BaseEstimator):
    """Linear mixed model fitted by restricted maximum likelihood.

    Parameters
    ----------
    formula : str, optional
        E.g. ``"y~I+(1|T)+(1|I:T)"``; overrides ``random_terms``.
    random_terms : sequence of str, optional
        Grouping terms with a variance component each.  Defaults to the
        standard model of the design's shape.
    backend : {"auto", "stratum", "dense"}
    rtol : float
    max_iter : int
    information : {"observed", "expected"}

    Attributes
    ----------
    fit_ : ModelFit
    coef_ : ndarray
        Intercept then intervention contrasts.
    components_ : dict
    satterthwaite_df_ : float
    """

    def __init__(self, formula: str | None = None, random_terms=None, backend: str = "auto",
                 rtol: float = 1e-10, max_iter: int = 200, information: str = "observed"):
        self.formula = formula
        self.random_terms = random_terms
        self.backend = backend
        self.rtol = rtol
        self.max_iter = max_iter
        self.information = information

    def fit(self, X, y):
        design = check_design_frame(X)
        y = check_response(y, design.n_units)
        _, spec = _model_for(self.formula, self.random_terms, design)
        self.spec_ = spec
        self.fit_ = fit_reml(y, design, spec, backend=self.backend, rtol=self.rtol,
                             max_iter=self.max_iter, information=self.information)
        self.coef_ = self.fit_.coef
        self.components_ = self.fit_.components
        self.satterthwaite_df_ = self.fit_.satterthwaite_df
        self.n_levels_ = int(design.column(spec.fixed).max()) + 1 if spec.fixed else 1
        self.n_features_in_ = 4
        return self

    def predict(self, X):
        check_is_fitted(self, "coef_")
        design = check_design_frame(X)
        if self.spec_.fixed is None:
            return np.full(design.n_units, self.coef_[0])
        codes = design.column(self.spec_.fixed)
        if codes.max() >= self.n_levels_:
            raise ConfigurationError(f"{self.spec_.fixed} level not seen during fit")
        C = self.spec_.contrasts if self.spec_.contrasts is not None else effect_contrasts(self.n_levels_)
        return self.coef_[0] + np.asarray(C)[codes] @ self.coef_[1:]
