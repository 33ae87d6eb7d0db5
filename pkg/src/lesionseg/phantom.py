"""Seeded synthetic multi-contrast phantoms with known ground truth.

Anatomy is a set of nested ellipsoids (background, CSF, cortex-like GM, WM
and a deep-GM nucleus sharing the GM Gaussian).  Intensities are drawn in the
log domain from the same Gaussian-plus-bias model that is fitted, lesions are
spheres carved into white matter.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace

import numpy as np
from scipy import ndimage

from .likelihood import ClassSharingMap, eval_bias_basis
from .volume import LabelMap, LesionMask, MultiContrastImage, VolumeGrid

__all__ = ["PhantomSpec", "Phantom", "generate", "training_set", "default_sharing", "LABEL_NAMES"]

LABEL_NAMES = ("background", "csf", "gm", "wm", "deep_gm")
# label index (0-based) -> Gaussian class
_LABEL_TO_CLASS = (0, 1, 2, 3, 2)
_CLASS_NAMES = ("background", "csf", "gm", "wm")
_CONTRASTS = ("T1w", "T2w", "FLAIR")

# log-domain means per class and contrast (T1w, T2w, FLAIR)
_DEFAULT_MEANS = {
    "background": [[1.4, 1.5, 1.4], [2.2, 2.3, 2.1]],
    "csf": [3.70, 5.50, 3.55],
    "gm": [4.38, 4.56, 4.56],
    "wm": [4.70, 4.44, 4.44],
    "lesion": [4.35, 5.10, 5.05],
}
_DEFAULT_STDS = {"background": 0.25, "csf": 0.06, "gm": 0.05, "wm": 0.05, "lesion": 0.07}


def default_sharing() -> ClassSharingMap:
    """Sharing map matching the phantom anatomy (background is a 2-Gaussian mixture)."""
    return ClassSharingMap(
        _LABEL_TO_CLASS,
        components_per_class=(2, 1, 1, 1),
        wm_class=3,
        gm_class=2,
        class_names=_CLASS_NAMES,
    )


@dataclass
class PhantomSpec:
    dims: tuple = (32, 32, 32)
    voxel_size: tuple = (1.0, 1.0, 1.0)
    contrasts: tuple = _CONTRASTS
    head_axes: tuple = (0.44, 0.47, 0.42)  # semi-axes as a fraction of dims
    shell_scales: tuple = (1.0, 0.84, 0.66)  # outer CSF, GM, WM boundaries
    deep_gm_scale: float = 0.22
    geometry_jitter: float = 0.04
    means: dict = field(default_factory=lambda: {k: v for k, v in _DEFAULT_MEANS.items()})
    stds: dict = field(default_factory=lambda: dict(_DEFAULT_STDS))
    correlation: float = 0.2
    noise_scale: float = 1.0
    n_lesions: int = 5
    lesion_radius: tuple = (1.6, 2.8)
    n_outliers: int = 0
    outlier_shift: tuple = (0.0, 3.0, 3.0)  # in WM standard deviations per contrast
    bias_peak: float = 0.2  # peak relative intensity change of the bias field
    bias_order: tuple = (3, 3, 3)
    seed: int = 0

    def grid(self) -> VolumeGrid:
        return VolumeGrid(self.dims, self.voxel_size)


@dataclass
class Phantom:
    image: MultiContrastImage
    labels: LabelMap
    lesions: LesionMask
    truth: dict
    outliers: np.ndarray

    def truth_json(self) -> str:
        def conv(o):
            if isinstance(o, np.ndarray):
                return o.tolist()
            if isinstance(o, (np.floating, np.integer)):
                return o.item()
            raise TypeError(type(o))

        return json.dumps(self.truth, default=conv, indent=1)


def _cov(std: float, n: int, rho: float, scale: float) -> np.ndarray:
    C = np.full((n, n), rho) + (1 - rho) * np.eye(n)
    return scale * std**2 * C


def _geometry(spec: PhantomSpec, rng: np.random.Generator) -> np.ndarray:
    grid = spec.grid()
    dims = np.array(grid.dims, float)
    jit = spec.geometry_jitter
    center = (dims - 1) / 2 + rng.uniform(-1, 1, 3) * jit * dims / 2
    axes = np.array(spec.head_axes) * dims * (1 + rng.uniform(-jit, jit, 3))
    idx = grid.voxel_indices().astype(float)
    r = np.sqrt((((idx - center) / axes) ** 2).sum(axis=1))
    labels = np.ones(grid.n_voxels, dtype=np.int64)
    for lab, s in zip((2, 3, 4), spec.shell_scales):
        s = s * (1 + rng.uniform(-jit, jit))
        labels[r <= s] = lab
    dg_center = center + rng.uniform(-1, 1, 3) * jit * dims / 2
    dg_axes = axes * spec.deep_gm_scale * (1 + rng.uniform(-jit, jit, 3))
    r_dg = np.sqrt((((idx - dg_center) / dg_axes) ** 2).sum(axis=1))
    labels[r_dg <= 1.0] = 5
    return labels


def _plant_lesions(spec: PhantomSpec, labels: np.ndarray, rng) -> np.ndarray:
    grid = spec.grid()
    wm = grid.to_volume(labels == 4)
    lesion = np.zeros(grid.n_voxels, dtype=np.uint8)
    if spec.n_lesions == 0:
        return lesion
    if not wm.any():
        raise ValueError("cannot place lesions: phantom has no white matter")
    depth = ndimage.distance_transform_edt(wm, sampling=spec.voxel_size)
    idx = grid.voxel_centers()
    for _ in range(spec.n_lesions):
        radius = rng.uniform(*spec.lesion_radius)
        ok = np.flatnonzero(grid.flatten(depth) >= radius + 0.5)
        if ok.size == 0:
            ok = np.flatnonzero(grid.flatten(depth) >= 1)
        if ok.size == 0:
            raise ValueError("lesion spec unsatisfiable: no white matter deep enough")
        c = idx[rng.choice(ok)]
        inside = ((idx - c) ** 2).sum(axis=1) <= radius**2
        lesion[inside & (labels == 4)] = 1
    return lesion


def generate(spec: PhantomSpec) -> Phantom:
    """Forward-sample a phantom; fixed seed gives bitwise-identical output."""
    rng = np.random.default_rng(spec.seed)
    grid = spec.grid()
    N = len(spec.contrasts)
    labels = _geometry(spec, rng)
    lesion = _plant_lesions(spec, labels, rng)

    basis = eval_bias_basis(grid, spec.bias_order)
    coeffs = rng.normal(size=(N, basis.n_functions))
    coeffs[:, 0] = 0.0
    field_ = basis.values @ coeffs.T
    peak = np.log1p(spec.bias_peak)
    scale = np.where(np.abs(field_).max(axis=0) > 0, peak / np.abs(field_).max(axis=0), 0.0)
    coeffs *= scale[:, None]
    field_ = basis.values @ coeffs.T

    means = {k: np.asarray(v, float)[..., :N] for k, v in spec.means.items()}
    covs = {k: _cov(s, N, spec.correlation, spec.noise_scale) for k, s in spec.stds.items()}
    data = np.zeros((grid.n_voxels, N))
    cls_of_voxel = np.asarray(_LABEL_TO_CLASS)[labels - 1]
    bg = np.flatnonzero(cls_of_voxel == 0)
    comp = rng.integers(0, 2, bg.size)
    for m in range(2):
        sel = bg[comp == m]
        data[sel] = rng.multivariate_normal(means["background"][m], covs["background"], sel.size)
    for g, name in enumerate(_CLASS_NAMES):
        if g == 0:
            continue
        sel = np.flatnonzero((cls_of_voxel == g) & (lesion == 0))
        data[sel] = rng.multivariate_normal(means[name], covs[name], sel.size)
    sel = np.flatnonzero(lesion == 1)
    if sel.size:
        data[sel] = rng.multivariate_normal(means["lesion"], covs["lesion"], sel.size)

    outliers = np.zeros(0, dtype=np.int64)
    if spec.n_outliers:
        wm_free = np.flatnonzero((labels == 4) & (lesion == 0))
        outliers = np.sort(rng.choice(wm_free, size=min(spec.n_outliers, wm_free.size), replace=False))
        shift = np.asarray(spec.outlier_shift, float)[:N] * spec.stds["wm"]
        data[outliers] = means["wm"] + shift + rng.normal(scale=0.25 * spec.stds["wm"], size=(outliers.size, N))

    data += field_
    image = MultiContrastImage(grid, data, spec.contrasts, log_domain=True)
    truth = {
        "spec": {k: (list(v) if isinstance(v, tuple) else v) for k, v in asdict(spec).items()},
        "label_names": list(LABEL_NAMES),
        "n_labels": len(LABEL_NAMES),
        "label_to_class": list(_LABEL_TO_CLASS),
        "class_names": list(_CLASS_NAMES),
        "means": {k: v for k, v in means.items()},
        "covs": {k: v for k, v in covs.items()},
        "bias_coeffs": coeffs,
        "bias_order": list(spec.bias_order),
        "n_lesion_voxels": int(lesion.sum()),
        "outliers": outliers,
    }
    return Phantom(
        image,
        LabelMap(grid, labels, len(LABEL_NAMES)),
        LesionMask(grid, lesion),
        truth,
        outliers,
    )


def training_set(spec: PhantomSpec, n: int, seed: int = 1000) -> list[Phantom]:
    """``n`` phantoms with independent geometry/lesion draws (for atlas building)."""
    return [generate(replace(spec, seed=seed + i)) for i in range(n)]
