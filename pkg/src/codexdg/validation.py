"""Input validation helpers for the estimator API."""

from __future__ import annotations

from typing import Optional, Tuple

import numpy as np
from sklearn.utils.validation import check_array

from .exceptions import DataError, DimensionError

_NDIM = {"segmentation": 5, "classification": 2}


def check_inputs(X, task: str, n_features: Optional[int] = None) -> np.ndarray:
    """Finite float64 inputs: [N, F] for classification, [N, T, C, H, W] for segmentation."""
    X = check_array(X, dtype=np.float64, allow_nd=True, ensure_2d=True, ensure_all_finite=True)
    if X.ndim != _NDIM[task]:
        raise DimensionError(f"{task} inputs must have {_NDIM[task]} dimensions, got shape {X.shape}")
    if task == "segmentation" and (X.shape[-1] % 4 or X.shape[-2] % 4):
        raise DimensionError(f"segmentation H and W must be divisible by 4, got {X.shape[-2:]}")
    width = X.shape[2] if task == "segmentation" else X.shape[1]
    if n_features is not None and width != n_features:
        raise DimensionError(f"expected {n_features} input channels, got {width}")
    return X


def check_targets(y, X: np.ndarray, task: str) -> Tuple[np.ndarray, np.ndarray]:
    """Encode labels as indices; returns ``(classes, encoded)``."""
    y = np.asarray(y)
    expected = X.shape[:1] if task == "classification" else X.shape[:2] + X.shape[3:]
    if y.shape != expected:
        raise DimensionError(f"labels must have shape {expected}, got {y.shape}")
    classes, encoded = np.unique(y, return_inverse=True)
    if len(classes) < 2:
        raise DataError("need at least two distinct classes")
    return classes, encoded.reshape(y.shape).astype(np.int64)


def check_domains(domains, n: int) -> np.ndarray:
    domains = np.asarray(domains)
    if domains.shape != (n,):
        raise DimensionError(f"domains must be a vector of length {n}, got shape {domains.shape}")
    if not np.issubdtype(domains.dtype, np.integer):
        if not np.all(np.equal(np.mod(domains, 1), 0)):
            raise DataError("domain ids must be integers")
    domains = domains.astype(np.int64)
    if len(np.unique(domains)) < 2:
        raise DataError("need samples from at least two domains")
    return domains


def check_coords(coords, domains: np.ndarray) -> np.ndarray:
    """Per-sample unit-circle coordinates, constant within each domain.

    Without coordinates, domains are spread evenly around the circle in id
    order (only the learned affinity is meaningful then).
    """
    ids = np.unique(domains)
    if coords is None:
        angle = 2 * np.pi * np.searchsorted(ids, domains) / len(ids)
        return np.stack([np.cos(angle), np.sin(angle)], axis=1)
    coords = check_array(coords, dtype=np.float64)
    if coords.shape != (len(domains), 2):
        raise DimensionError(f"coords must have shape ({len(domains)}, 2), got {coords.shape}")
    for d in ids:
        block = coords[domains == d]
        if not np.all(block == block[0]):
            raise DataError(f"coordinates of domain {d} are not constant")
    if np.any(np.hypot(coords[:, 0], coords[:, 1]) == 0):
        raise DataError("domain coordinates must not sit at the origin")
    return coords
