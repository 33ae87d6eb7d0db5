"""Gaussian appearance model, bias-field basis and the lesion-intensity prior."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.special import multigammaln

from .volume import VolumeGrid

__all__ = [
    "ClassSharingMap",
    "AppearanceParams",
    "BiasBasis",
    "LesionIntensityPrior",
    "eval_bias_basis",
    "component_log_likelihood",
    "component_log_densities",
    "niw_log_density",
    "save_params",
    "load_params",
]

_LOG_2PI = np.log(2.0 * np.pi)


@dataclass(frozen=True, eq=False)
class ClassSharingMap:
    """Maps the K structure labels onto G shared Gaussian classes.

    Class ``g`` is a mixture of ``components_per_class[g]`` Gaussians.
    Components are numbered class by class, so component ``c`` belongs to
    class ``component_class[c]``.
    """

    label_to_class: tuple[int, ...]
    components_per_class: tuple[int, ...] | None = None
    mixture_weights: tuple[tuple[float, ...], ...] | None = None
    wm_class: int | None = None
    gm_class: int | None = None
    lesion_class: int | None = None
    class_names: tuple[str, ...] | None = None

    def __post_init__(self):
        l2c = tuple(int(c) for c in self.label_to_class)
        G = max(l2c) + 1
        if min(l2c) < 0 or sorted(set(l2c)) != list(range(G)):
            raise ValueError("every class must be used by at least one label")
        comps = tuple(int(m) for m in (self.components_per_class or (1,) * G))
        if len(comps) != G or min(comps) < 1:
            raise ValueError("components_per_class needs one positive entry per class")
        if self.mixture_weights is None:
            weights = tuple(tuple([1.0 / m] * m) for m in comps)
        else:
            weights = tuple(tuple(float(x) for x in w) for w in self.mixture_weights)
        for m, w in zip(comps, weights):
            if len(w) != m or min(w) < 0 or abs(sum(w) - 1.0) > 1e-9:
                raise ValueError("mixture weights must be non-negative and sum to 1 per class")
        for name in ("wm_class", "gm_class", "lesion_class"):
            v = getattr(self, name)
            if v is not None and not 0 <= v < G:
                raise ValueError(f"{name}={v} out of range")
        object.__setattr__(self, "label_to_class", l2c)
        object.__setattr__(self, "components_per_class", comps)
        object.__setattr__(self, "mixture_weights", weights)

    @property
    def n_labels(self) -> int:
        return len(self.label_to_class)

    @property
    def n_classes(self) -> int:
        return len(self.components_per_class)

    @property
    def n_components(self) -> int:
        return sum(self.components_per_class)

    @property
    def component_class(self) -> np.ndarray:
        return np.repeat(np.arange(self.n_classes), self.components_per_class)

    def class_components(self, g: int) -> np.ndarray:
        return np.flatnonzero(self.component_class == g)

    def label_class_matrix(self) -> np.ndarray:
        """``K x G`` one-hot matrix."""
        M = np.zeros((self.n_labels, self.n_classes))
        M[np.arange(self.n_labels), self.label_to_class] = 1.0
        return M

    def with_lesion_class(self) -> "ClassSharingMap":
        """Adds label K+1 mapped to a new single-component lesion class."""
        G = self.n_classes
        names = None if self.class_names is None else self.class_names + ("lesion",)
        return replace(
            self,
            label_to_class=self.label_to_class + (G,),
            components_per_class=self.components_per_class + (1,),
            mixture_weights=self.mixture_weights + ((1.0,),),
            lesion_class=G,
            class_names=names,
        )

    def to_dict(self) -> dict:
        return {
            "label_to_class": list(self.label_to_class),
            "components_per_class": list(self.components_per_class),
            "mixture_weights": [list(w) for w in self.mixture_weights],
            "wm_class": self.wm_class,
            "gm_class": self.gm_class,
            "class_names": None if self.class_names is None else list(self.class_names),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ClassSharingMap":
        unknown = set(d) - {"label_to_class", "components_per_class", "mixture_weights", "wm_class",
                            "gm_class", "class_names"}
        if unknown:
            raise ValueError(f"unknown sharing-map fields: {sorted(unknown)}")
        if "label_to_class" not in d:
            raise ValueError("sharing map needs label_to_class")
        names = d.get("class_names")
        weights = d.get("mixture_weights")
        return cls(
            tuple(d["label_to_class"]),
            None if d.get("components_per_class") is None else tuple(d["components_per_class"]),
            None if weights is None else tuple(tuple(w) for w in weights),
            d.get("wm_class"),
            d.get("gm_class"),
            None,
            None if names is None else tuple(names),
        )


@dataclass(frozen=True, eq=False)
class AppearanceParams:
    """Gaussian means/covariances per component, mixture weights and bias coefficients."""

    means: np.ndarray  # C x N
    covs: np.ndarray  # C x N x N
    bias_coeffs: np.ndarray  # N x P
    weights: np.ndarray  # C, sums to one within each class
    sharing: ClassSharingMap = field(repr=False)
    diagonal_mode: bool = False

    def __post_init__(self):
        means = np.array(self.means, dtype=float)
        covs = np.array(self.covs, dtype=float)
        C, N = means.shape
        if covs.shape != (C, N, N):
            raise ValueError("covariances must be C x N x N")
        if C != self.sharing.n_components:
            raise ValueError("component count does not match the sharing map")
        bias = np.array(self.bias_coeffs, dtype=float)
        if bias.ndim != 2 or bias.shape[0] != N:
            raise ValueError("bias coefficients must be N x P")
        if self.diagonal_mode:
            off = covs * (1 - np.eye(N))
            if np.any(off != 0):
                covs = covs * np.eye(N)
        if not np.allclose(covs, np.transpose(covs, (0, 2, 1))):
            raise ValueError("covariances must be symmetric")
        try:
            np.linalg.cholesky(covs)
        except np.linalg.LinAlgError:
            raise ValueError("covariances must be positive definite") from None
        weights = np.array(self.weights, dtype=float)
        for a in (means, covs, bias, weights):
            a.setflags(write=False)
        object.__setattr__(self, "means", means)
        object.__setattr__(self, "covs", covs)
        object.__setattr__(self, "bias_coeffs", bias)
        object.__setattr__(self, "weights", weights)

    @property
    def n_contrasts(self) -> int:
        return self.means.shape[1]

    def bias_field(self, basis: "BiasBasis") -> np.ndarray:
        """``I x N`` additive (log-domain) bias field C phi_i."""
        return basis.values @ self.bias_coeffs.T

    def class_mean(self, g: int) -> np.ndarray:
        comps = self.sharing.class_components(g)
        w = self.weights[comps]
        return (w[:, None] * self.means[comps]).sum(axis=0) / w.sum()

    def updated(self, **kw) -> "AppearanceParams":
        return replace(self, **kw)


@dataclass(frozen=True, eq=False)
class BiasBasis:
    order: tuple[int, int, int]
    values: np.ndarray  # I x P

    @property
    def n_functions(self) -> int:
        return self.values.shape[1]


def _dct_axis(n: int, order: int) -> np.ndarray:
    x = np.arange(n)
    p = np.arange(order)
    return np.cos(np.pi * (2 * x[:, None] + 1) * p[None, :] / (2 * n))


def eval_bias_basis(grid: VolumeGrid, order=(3, 3, 3)) -> BiasBasis:
    """Separable DCT-II products evaluated at every voxel (x-fastest order).

    Basis column ``p = px + ox * (py + oy * pz)``; column 0 is constant 1.
    """
    order = tuple(int(o) for o in order)
    if len(order) != 3 or min(order) < 1:
        raise ValueError("bias order must be 3 positive integers")
    if any(o > d for o, d in zip(order, grid.dims)):
        raise ValueError(f"bias order {order} exceeds grid dims {grid.dims}")
    bx, by, bz = (_dct_axis(d, o) for d, o in zip(grid.dims, order))
    # voxel (x, y, z) flat index x + nx*(y + ny*z); function (px, py, pz)
    vals = np.einsum("xa,yb,zc->xyzabc", bx, by, bz)
    I = grid.n_voxels
    P = int(np.prod(order))
    # [x, y, z, px, py, pz] -> voxels x-fastest, functions px-fastest
    vals = vals.transpose(2, 1, 0, 5, 4, 3).reshape(I, P)
    return BiasBasis(order, vals)


def component_log_likelihood(d, mean, cov, bias_coeffs=None, phi=None) -> float:
    """log N(d | mean + C phi, cov) for one voxel."""
    d = np.atleast_1d(np.asarray(d, dtype=float))
    mu = np.atleast_1d(np.asarray(mean, dtype=float))
    if bias_coeffs is not None and phi is not None:
        mu = mu + np.atleast_2d(bias_coeffs) @ np.atleast_1d(phi)
    cov = np.atleast_2d(np.asarray(cov, dtype=float))
    L = np.linalg.cholesky(cov)
    z = np.linalg.solve(L, d - mu)
    return float(-0.5 * (len(d) * _LOG_2PI + z @ z) - np.log(np.diag(L)).sum())


def component_log_densities(corrected: np.ndarray, params: AppearanceParams) -> np.ndarray:
    """``I x C`` Gaussian log-densities of bias-corrected intensities per component."""
    I, N = corrected.shape
    out = np.empty((I, len(params.means)))
    for c, (mu, cov) in enumerate(zip(params.means, params.covs)):
        r = corrected - mu
        if params.diagonal_mode:
            var = np.diag(cov)
            maha = (r * r / var).sum(axis=1)
            logdet = np.log(var).sum()
        else:
            L = np.linalg.cholesky(cov)
            z = np.linalg.solve(L, r.T)
            maha = (z * z).sum(axis=0)
            logdet = 2.0 * np.log(np.diag(L)).sum()
        out[:, c] = -0.5 * (N * _LOG_2PI + logdet + maha)
    return out


@dataclass(frozen=True)
class LesionIntensityPrior:
    """NIW coupling of the lesion Gaussian to white matter.

    ``nu_base`` pseudo-voxels are specified for 1 mm^3 voxels and scaled
    inversely with the voxel volume.
    """

    nu_base: float = 500.0
    kappa: float = 50.0

    def __post_init__(self):
        if self.kappa <= 1:
            raise ValueError("kappa must exceed 1")
        if self.nu_base < 0:
            raise ValueError("nu must be non-negative")

    def nu_effective(self, grid: VolumeGrid | float) -> float:
        vol = grid.voxel_volume if isinstance(grid, VolumeGrid) else float(grid)
        return self.nu_base / vol


def _logdet(S):
    sign, ld = np.linalg.slogdet(S)
    if sign <= 0:
        raise ValueError("matrix is not positive definite")
    return ld


def niw_log_density(mu_les, sigma_les, mu_wm, sigma_wm, nu: float, kappa: float) -> float:
    """log N(mu_les | mu_wm, sigma_les/nu) + log IW(sigma_les | kappa*nu*sigma_wm, nu-N-2).

    ``nu = 0`` is the flat-prior regime and returns 0.
    """
    if nu == 0:
        return 0.0
    mu_les = np.atleast_1d(np.asarray(mu_les, dtype=float))
    N = mu_les.size
    S = np.atleast_2d(np.asarray(sigma_les, dtype=float))
    W = np.atleast_2d(np.asarray(sigma_wm, dtype=float))
    df = nu - N - 2
    if df <= N - 1:
        raise ValueError(f"nu={nu} gives an improper inverse-Wishart (need nu > N+1)")
    for M in (S, W):
        np.linalg.cholesky(M)
    d = mu_les - np.atleast_1d(np.asarray(mu_wm, dtype=float))
    ld_S = _logdet(S)
    normal = -0.5 * (N * _LOG_2PI + ld_S - N * np.log(nu) + nu * d @ np.linalg.solve(S, d))
    scale = kappa * nu * W
    iw = (
        0.5 * df * _logdet(scale)
        - 0.5 * df * N * np.log(2.0)
        - multigammaln(0.5 * df, N)
        - 0.5 * (df + N + 1) * ld_S
        - 0.5 * np.trace(np.linalg.solve(S, scale))
    )
    return float(normal + iw)


# ----------------------------------------------------------------------- io

_PARAM_MAGIC = b"APRM"


def save_params(path, params: AppearanceParams) -> None:
    """Binary dump: magic, G, M_g..., N, P, diagonal flag, then f64 arrays."""
    sh = params.sharing
    N, P = params.bias_coeffs.shape
    head = _PARAM_MAGIC + struct.pack("<I", sh.n_classes)
    head += struct.pack(f"<{sh.n_classes}I", *sh.components_per_class)
    head += struct.pack("<III", N, P, int(params.diagonal_mode))
    head += struct.pack("<I", sh.n_labels) + struct.pack(f"<{sh.n_labels}I", *sh.label_to_class)
    body = b"".join(
        np.asarray(a, dtype="<f8").tobytes()
        for a in (params.weights, params.means, params.covs, params.bias_coeffs)
    )
    Path(path).write_bytes(head + body)


def load_params(path) -> AppearanceParams:
    raw = Path(path).read_bytes()
    if raw[:4] != _PARAM_MAGIC:
        raise ValueError(f"{path}: not a parameter dump")
    off = 4
    (G,) = struct.unpack_from("<I", raw, off)
    off += 4
    comps = struct.unpack_from(f"<{G}I", raw, off)
    off += 4 * G
    N, P, diag = struct.unpack_from("<III", raw, off)
    off += 12
    (K,) = struct.unpack_from("<I", raw, off)
    off += 4
    l2c = struct.unpack_from(f"<{K}I", raw, off)
    off += 4 * K
    C = sum(comps)
    arr = np.frombuffer(raw, dtype="<f8", offset=off)
    sizes = [C, C * N, C * N * N, N * P]
    w, m, cv, b = np.split(arr, np.cumsum(sizes)[:-1])
    weights = []
    start = 0
    for mg in comps:
        weights.append(tuple(w[start : start + mg]))
        start += mg
    sharing = ClassSharingMap(l2c, comps, tuple(weights))
    return AppearanceParams(
        m.reshape(C, N), cv.reshape(C, N, N), b.reshape(N, P), w.copy(), sharing, bool(diag)
    )
