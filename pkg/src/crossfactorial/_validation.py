"""Input checks shared by the estimators."""
from __future__ import annotations

from typing import Mapping

import numpy as np

from .design import AllocationTable, infer_spec
from .exceptions import ConfigurationError

FRAME_COLUMNS = ("centre", "batch", "therapist", "intervention")


def _column(X, name):
    try:
        return np.asarray(X[name])
    except (KeyError, IndexError, ValueError, TypeError):
        return None


def check_design_frame(X) -> AllocationTable:
    """Coerce ``X`` to an :class:`AllocationTable`.

    Accepted inputs are an AllocationTable, a mapping or data frame with
    ``intervention`` and ``therapist`` columns (``batch`` and ``centre``
    optional), or an integer array whose columns are centre, batch,
    therapist and intervention.  Levels are 0-based.
    """
    if isinstance(X, AllocationTable):
        return X
    cols = {}
    if isinstance(X, Mapping) or hasattr(X, "columns"):
        for name in FRAME_COLUMNS:
            col = _column(X, name)
            if col is not None:
                cols[name] = col
        missing = {"intervention", "therapist"} - set(cols)
        if missing:
            raise ConfigurationError(f"design frame lacks columns: {', '.join(sorted(missing))}")
    else:
        arr = np.asarray(X)
        if arr.ndim != 2 or arr.shape[1] != len(FRAME_COLUMNS):
            raise ConfigurationError(
                f"design array must have shape (N, 4) with columns {', '.join(FRAME_COLUMNS)}; got {arr.shape}"
            )
        cols = {name: arr[:, k] for k, name in enumerate(FRAME_COLUMNS)}
    n = len(cols["intervention"])
    out = {}
    for name in FRAME_COLUMNS:
        v = np.asarray(cols.get(name, np.zeros(n)))
        if v.ndim != 1 or v.size != n:
            raise ConfigurationError(f"column {name} must be one-dimensional of length {n}")
        if not np.issubdtype(v.dtype, np.number) or np.any(v != np.round(v)):
            raise ConfigurationError(f"column {name} must hold integer level codes")
        out[name] = v.astype(np.int64)
    table = AllocationTable(out["intervention"], out["therapist"], out["batch"], out["centre"], method="frame")
    object.__setattr__(table, "spec", infer_spec(table))
    return table


def check_response(y, n_units: int | None = None) -> np.ndarray:
    """One-dimensional finite float outcome, optionally of a given length."""
    y = np.asarray(y, dtype=float)
    if y.ndim == 2 and y.shape[1] == 1:
        y = y[:, 0]
    if y.ndim != 1:
        raise ConfigurationError(f"outcome must be one-dimensional, got shape {y.shape}")
    if n_units is not None and y.size != n_units:
        raise ConfigurationError(f"outcome has {y.size} values for {n_units} units")
    if not np.all(np.isfinite(y)):
        raise ConfigurationError("outcome contains non-finite values")
    return y
