"""Input checks shared by the estimator wrappers and the CLI."""

from __future__ import annotations

import numbers

import numpy as np

from .volume import LesionMask, MultiContrastImage, VolumeGrid, log_transform

__all__ = [
    "check_image",
    "check_masks",
    "check_scalar",
    "check_open_unit",
    "check_same_grid",
    "check_affine",
]


def check_image(X, log_domain: bool = True) -> MultiContrastImage:
    """Return ``X`` as a log-domain ``MultiContrastImage`` (log-transforming raw intensities)."""
    if not isinstance(X, MultiContrastImage):
        raise TypeError(f"expected a MultiContrastImage, got {type(X).__name__}")
    if log_domain and not X.log_domain:
        return log_transform(X)
    return X


def check_masks(masks, grid: VolumeGrid | None = None) -> list[LesionMask]:
    if isinstance(masks, LesionMask):
        masks = [masks]
    masks = list(masks)
    if not masks:
        raise ValueError("need at least one lesion mask")
    for m in masks:
        if not isinstance(m, LesionMask):
            raise TypeError(f"expected LesionMask items, got {type(m).__name__}")
    ref = grid or masks[0].grid
    for i, m in enumerate(masks):
        if not ref.same_as(m.grid):
            raise ValueError(f"mask {i} is on a different grid")
    return masks


def check_scalar(x, name: str, *, kind=numbers.Real, min_val=None, max_val=None, include_min=True):
    if isinstance(x, bool) or not isinstance(x, kind):
        raise TypeError(f"{name} must be {kind.__name__}, got {type(x).__name__}")
    if min_val is not None and (x < min_val or (x == min_val and not include_min)):
        raise ValueError(f"{name}={x} below the allowed minimum {min_val}")
    if max_val is not None and x > max_val:
        raise ValueError(f"{name}={x} above the allowed maximum {max_val}")
    return x


def check_open_unit(x, name: str) -> float:
    check_scalar(x, name)
    if not 0 < x < 1:
        raise ValueError(f"{name} must lie strictly between 0 and 1, got {x}")
    return float(x)


def check_same_grid(a: VolumeGrid, b: VolumeGrid, what: str = "volumes") -> None:
    if not a.same_as(b):
        raise ValueError(f"{what} are on different grids: {a.dims} vs {b.dims}")


def check_affine(a) -> np.ndarray | None:
    if a is None:
        return None
    a = np.asarray(a, dtype=float)
    if a.shape != (4, 4) or not np.all(np.isfinite(a)):
        raise ValueError("affine must be a finite 4x4 matrix")
    if abs(np.linalg.det(a)) < 1e-12:
        raise ValueError("affine is singular")
    return a
