"""Tetrahedral-mesh probabilistic atlas.

The atlas stores label probabilities ``alpha`` (J x K) and lesion
probabilities ``beta`` (J) at mesh vertices.  Priors at voxels are obtained by
barycentric (piecewise-linear) interpolation inside the tetrahedron that
contains the voxel centre.  Voxels outside the mesh are assigned to the
background label (label 1, column 0) with probability one.
"""

from __future__ import annotations

import itertools
import struct
from dataclasses import dataclass, replace
from pathlib import Path

import numba
import numpy as np

from .volume import LabelMap, LesionMask, ProbabilityMap, VolumeGrid

__all__ = [
    "AtlasMesh",
    "Rasterization",
    "FoldedMeshError",
    "rasterize",
    "interpolate_prior",
    "interpolate_lesion_prior",
    "prior_vertex_gradient",
    "deformation_log_prior",
    "build_atlas",
    "lesion_augmented",
    "regular_mesh",
    "save_atlas",
    "load_atlas",
    "BACKGROUND",
    "DEFAULT_STIFFNESS",
]

BACKGROUND = 0
DEFAULT_STIFFNESS = 0.1

_MAGIC = b"AMSH"
_VERSION = 1


class FoldedMeshError(ValueError):
    pass


def _signed_volumes(vertices: np.ndarray, tets: np.ndarray) -> np.ndarray:
    # triple product, evaluated exactly as in deformation_log_prior so that the
    # reference configuration gives volume ratios of exactly 1
    p = vertices[tets]
    e1, e2, e3 = (p[:, c] - p[:, 0] for c in (1, 2, 3))
    return np.einsum("ij,ij->i", e1, np.cross(e2, e3)) / 6.0


@dataclass(frozen=True, eq=False)
class AtlasMesh:
    vertices: np.ndarray
    reference_vertices: np.ndarray
    tets: np.ndarray
    alpha: np.ndarray
    beta: np.ndarray
    deformation_stiffness: float = DEFAULT_STIFFNESS

    def __post_init__(self):
        v = np.array(self.vertices, dtype=float).reshape(-1, 3)
        ref = np.array(self.reference_vertices, dtype=float).reshape(-1, 3)
        tets = np.array(self.tets, dtype=np.int64).reshape(-1, 4)
        alpha = np.array(self.alpha, dtype=float)
        beta = np.array(self.beta, dtype=float).ravel()
        J = v.shape[0]
        if ref.shape != v.shape:
            raise ValueError("reference_vertices must match vertices")
        if tets.size and (tets.min() < 0 or tets.max() >= J):
            raise ValueError("tetrahedra reference invalid vertices")
        if alpha.ndim != 2 or alpha.shape[0] != J:
            raise ValueError("alpha must be J x K")
        if (alpha < 0).any() or not np.allclose(alpha.sum(axis=1), 1.0, atol=1e-6):
            raise ValueError("alpha rows must lie on the probability simplex")
        if beta.shape != (J,) or (beta < 0).any() or (beta > 1).any():
            raise ValueError("beta must be J values in [0, 1]")
        if self.deformation_stiffness <= 0:
            raise ValueError("deformation stiffness must be positive")
        ref_vol = _signed_volumes(ref, tets)
        if (ref_vol <= 0).any():
            raise ValueError("degenerate or inverted tetrahedron in the reference configuration")
        for a in (v, ref, tets, alpha, beta, ref_vol):
            a.setflags(write=False)
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "reference_vertices", ref)
        object.__setattr__(self, "tets", tets)
        object.__setattr__(self, "alpha", alpha)
        object.__setattr__(self, "beta", beta)
        object.__setattr__(self, "deformation_stiffness", float(self.deformation_stiffness))
        object.__setattr__(self, "_ref_volumes", ref_vol)

    @property
    def n_vertices(self) -> int:
        return self.vertices.shape[0]

    @property
    def n_labels(self) -> int:
        return self.alpha.shape[1]

    @property
    def reference_volumes(self) -> np.ndarray:
        return self._ref_volumes

    def with_vertices(self, vertices) -> "AtlasMesh":
        return replace(self, vertices=np.asarray(vertices, dtype=float).reshape(-1, 3))

    def boundary_vertices(self) -> np.ndarray:
        """Boolean mask of vertices on the bounding box of the reference mesh."""
        ref = self.reference_vertices
        lo, hi = ref.min(axis=0), ref.max(axis=0)
        tol = 1e-9 * max(1.0, float(np.abs(ref).max()))
        return ((ref <= lo + tol) | (ref >= hi - tol)).any(axis=1)


def lesion_augmented(mesh: AtlasMesh) -> AtlasMesh:
    """Mesh with K+1 labels: alpha * (1 - beta) for structures, beta for lesion."""
    b = mesh.beta[:, None]
    alpha = np.hstack([mesh.alpha * (1.0 - b), b])
    return replace(mesh, alpha=alpha, beta=np.zeros_like(mesh.beta))


# ------------------------------------------------------------- rasterization


@dataclass(frozen=True, eq=False)
class Rasterization:
    """Per-voxel containing tetrahedron (-1 when outside) and barycentric weights."""

    grid: VolumeGrid
    tet_index: np.ndarray
    weights: np.ndarray
    vertex_ids: np.ndarray

    @property
    def inside(self) -> np.ndarray:
        return self.tet_index >= 0


@numba.njit(cache=True)
def _rasterize_kernel(vox_vertices, tets, nx, ny, nz):
    n = nx * ny * nz
    tet_of = np.full(n, -1, dtype=np.int64)
    bary = np.zeros((n, 4))
    tol = 1e-10
    for t in range(tets.shape[0]):
        a = tets[t, 0]
        v0 = vox_vertices[a]
        E = np.empty((3, 3))
        for c in range(3):
            vc = vox_vertices[tets[t, c + 1]]
            for r in range(3):
                E[r, c] = vc[r] - v0[r]
        Einv = np.linalg.inv(E)
        lo = np.empty(3, dtype=np.int64)
        hi = np.empty(3, dtype=np.int64)
        dims = (nx, ny, nz)
        for r in range(3):
            mn = v0[r]
            mx = v0[r]
            for c in range(1, 4):
                val = vox_vertices[tets[t, c], r]
                mn = min(mn, val)
                mx = max(mx, val)
            lo[r] = max(0, int(np.ceil(mn - tol)))
            hi[r] = min(dims[r] - 1, int(np.floor(mx + tol)))
        for z in range(lo[2], hi[2] + 1):
            for y in range(lo[1], hi[1] + 1):
                for x in range(lo[0], hi[0] + 1):
                    idx = x + nx * (y + ny * z)
                    if tet_of[idx] >= 0:
                        continue
                    d0 = x - v0[0]
                    d1 = y - v0[1]
                    d2 = z - v0[2]
                    l1 = Einv[0, 0] * d0 + Einv[0, 1] * d1 + Einv[0, 2] * d2
                    l2 = Einv[1, 0] * d0 + Einv[1, 1] * d1 + Einv[1, 2] * d2
                    l3 = Einv[2, 0] * d0 + Einv[2, 1] * d1 + Einv[2, 2] * d2
                    l0 = 1.0 - l1 - l2 - l3
                    if l0 >= -tol and l1 >= -tol and l2 >= -tol and l3 >= -tol:
                        l0 = max(l0, 0.0)
                        l1 = max(l1, 0.0)
                        l2 = max(l2, 0.0)
                        l3 = max(l3, 0.0)
                        s = l0 + l1 + l2 + l3
                        tet_of[idx] = t
                        bary[idx, 0] = l0 / s
                        bary[idx, 1] = l1 / s
                        bary[idx, 2] = l2 / s
                        bary[idx, 3] = l3 / s
    return tet_of, bary


def rasterize(mesh: AtlasMesh, grid: VolumeGrid) -> Rasterization:
    """Locate every voxel centre in the deformed mesh.

    Voxels on shared faces go to the lowest-index tetrahedron.
    """
    vol = _signed_volumes(mesh.vertices, mesh.tets)
    if (vol <= 0).any():
        raise FoldedMeshError(f"folded tetrahedron {int(np.argmax(vol <= 0))}")
    inv_aff = np.linalg.inv(grid.affine)
    vox = mesh.vertices @ inv_aff[:3, :3].T + inv_aff[:3, 3]
    tet_of, bary = _rasterize_kernel(np.ascontiguousarray(vox), mesh.tets, *grid.dims)
    ids = np.where(tet_of[:, None] >= 0, mesh.tets[np.maximum(tet_of, 0)], 0)
    return Rasterization(grid, tet_of, bary, ids)


def _interpolate(values: np.ndarray, rast: Rasterization) -> np.ndarray:
    # sum_j values_j psi_j^i, restricted to the 4 vertices of the containing tet
    return np.einsum("ia,ia...->i...", rast.weights, values[rast.vertex_ids])


def interpolate_prior(mesh: AtlasMesh, rast: Rasterization) -> np.ndarray:
    """``I x K`` matrix of p(l_i = k | mesh)."""
    prior = _interpolate(mesh.alpha, rast)
    outside = ~rast.inside
    prior[outside] = 0.0
    prior[outside, BACKGROUND] = 1.0
    return prior


def interpolate_lesion_prior(mesh: AtlasMesh, rast: Rasterization) -> ProbabilityMap:
    rho = _interpolate(mesh.beta, rast)
    rho[~rast.inside] = 0.0
    return ProbabilityMap(rast.grid, np.clip(rho, 0.0, 1.0))


def _barycentric_gradients(mesh: AtlasMesh) -> np.ndarray:
    """``T x 4 x 3`` world-space gradients of the barycentric coordinates."""
    p = mesh.vertices[mesh.tets]
    E = np.transpose(p[:, 1:] - p[:, :1], (0, 2, 1))  # columns are edges
    Einv = np.linalg.inv(E)
    G = np.empty((len(mesh.tets), 4, 3))
    G[:, 1:] = Einv
    G[:, 0] = -Einv.sum(axis=1)
    return G


def prior_vertex_gradient(mesh: AtlasMesh, rast: Rasterization, dprior: np.ndarray) -> np.ndarray:
    """Gradient w.r.t. vertex positions of ``sum_ik dprior[i,k] * prior[i,k]``.

    Moving vertex ``a`` by ``delta`` changes the interpolated field at a fixed
    voxel by ``-lambda_a * grad(field) . delta``.
    """
    inside = np.flatnonzero(rast.inside)
    G = _barycentric_gradients(mesh)[rast.tet_index[inside]]  # n x 4 x 3
    ids = rast.vertex_ids[inside]
    lam = rast.weights[inside]
    q = np.einsum("ik,ibk->ib", dprior[inside], mesh.alpha[ids])
    s = np.einsum("ib,ibc->ic", q, G)
    contrib = -lam[:, :, None] * s[:, None, :]  # n x 4 x 3
    grad = np.zeros((mesh.n_vertices, 3))
    flat_ids = ids.ravel()
    for c in range(3):
        grad[:, c] = np.bincount(flat_ids, weights=contrib[:, :, c].ravel(), minlength=mesh.n_vertices)
    return grad


# ------------------------------------------------------- deformation prior


def _volume_penalty(r):
    return (r - 1.0) ** 2 - np.log(r)


def deformation_log_prior(mesh: AtlasMesh, with_grad: bool = True):
    """Log deformation prior up to a constant, and its vertex gradient.

    ``-stiffness * sum_t [(r_t - 1)^2 - log r_t]`` with ``r_t`` the ratio of
    current to reference signed volume.  Returns ``-inf`` (and a zero gradient)
    as soon as any tetrahedron is flat or inverted.
    """
    p = mesh.vertices[mesh.tets]
    e1, e2, e3 = (p[:, c] - p[:, 0] for c in (1, 2, 3))
    vol = _signed_volumes(mesh.vertices, mesh.tets)
    if (vol <= 0).any():
        value = -np.inf
        return (value, np.zeros_like(mesh.vertices)) if with_grad else value
    ref = mesh.reference_volumes
    r = vol / ref
    s = mesh.deformation_stiffness
    value = -s * float(np.sum(_volume_penalty(r)))
    if not with_grad:
        return value
    dc = 2.0 * (r - 1.0) - 1.0 / r
    coef = (-s * dc / ref / 6.0)[:, None]
    g1 = np.cross(e2, e3) * coef
    g2 = np.cross(e3, e1) * coef
    g3 = np.cross(e1, e2) * coef
    g0 = -(g1 + g2 + g3)
    grad = np.zeros_like(mesh.vertices)
    for c, g in enumerate((g0, g1, g2, g3)):
        for d in range(3):
            grad[:, d] += np.bincount(mesh.tets[:, c], weights=g[:, d], minlength=mesh.n_vertices)
    return value, grad


# ------------------------------------------------------------------ builder


def _freudenthal_cube():
    tets = []
    for perm in itertools.permutations(range(3)):
        path = [(0, 0, 0)]
        cur = [0, 0, 0]
        for ax in perm:
            cur[ax] = 1
            path.append(tuple(cur))
        tets.append(path)
    return tets


def regular_mesh(grid: VolumeGrid, cells) -> tuple[np.ndarray, np.ndarray]:
    """Lattice vertices spanning the voxel extent of ``grid`` and a 6-tet split.

    Vertices sit at voxel-index positions ``linspace(-0.5, dim - 0.5)`` mapped
    to world space, so every voxel centre lies strictly inside the mesh.
    """
    cells = tuple(int(c) for c in cells)
    if len(cells) != 3 or min(cells) < 1:
        raise ValueError("mesh resolution must be 3 positive integers")
    nv = tuple(c + 1 for c in cells)
    axes = [np.linspace(-0.5, d - 0.5, c + 1) for d, c in zip(grid.dims, cells)]
    gx, gy, gz = np.meshgrid(*axes, indexing="ij")
    idx = np.stack([gx.ravel(order="F"), gy.ravel(order="F"), gz.ravel(order="F")], axis=1)
    verts = idx @ grid.affine[:3, :3].T + grid.affine[:3, 3]

    def vid(i, j, k):
        return i + nv[0] * (j + nv[1] * k)

    cube = _freudenthal_cube()
    tets = []
    for k in range(cells[2]):
        for j in range(cells[1]):
            for i in range(cells[0]):
                for path in cube:
                    tets.append([vid(i + a, j + b, k + c) for a, b, c in path])
    tets = np.array(tets, dtype=np.int64)
    vol = _signed_volumes(verts, tets)
    flip = vol < 0
    tets[flip, 1], tets[flip, 2] = tets[flip, 2].copy(), tets[flip, 1].copy()
    return verts, tets


def _nearest_vertex(grid: VolumeGrid, cells) -> np.ndarray:
    idx = grid.voxel_indices().astype(float)
    out = np.zeros(grid.n_voxels, dtype=np.int64)
    stride = 1
    for ax, (d, c) in enumerate(zip(grid.dims, cells)):
        h = d / c
        k = np.clip(np.floor((idx[:, ax] + 0.5) / h + 0.5), 0, c).astype(np.int64)
        out += k * stride
        stride *= c + 1
    return out


def build_atlas(
    label_maps: list[LabelMap],
    lesion_masks: list[LesionMask] | None = None,
    mesh_resolution=(8, 8, 8),
    n_labels: int | None = None,
    stiffness: float = DEFAULT_STIFFNESS,
) -> AtlasMesh:
    """Estimate a regular-lattice atlas from pre-aligned training segmentations.

    alpha_j^k = (n_jk + 1) / (V_j + K), where n_jk counts training voxels with
    label k whose nearest vertex is j and V_j counts all of them; beta_j is the
    same Laplace-smoothed frequency for the lesion masks.
    """
    if not label_maps:
        raise ValueError("empty training set")
    grid = label_maps[0].grid
    for lm in list(label_maps) + list(lesion_masks or []):
        if not grid.same_as(lm.grid):
            raise ValueError("training volumes must share one grid")
    K = n_labels or max(lm.n_labels for lm in label_maps)
    verts, tets = regular_mesh(grid, mesh_resolution)
    J = len(verts)
    near = _nearest_vertex(grid, mesh_resolution)
    counts = np.zeros((J, K))
    for lm in label_maps:
        if lm.labels.max() > K:
            raise ValueError(f"label {lm.labels.max()} exceeds K={K}")
        np.add.at(counts, (near, lm.labels - 1), 1.0)
    V = counts.sum(axis=1)
    alpha = (counts + 1.0) / (V + K)[:, None]
    hits = np.zeros(J)
    n_masks = 0
    for lm in lesion_masks or []:
        hits += np.bincount(near, weights=lm.mask.astype(float), minlength=J)
        n_masks += 1
    if n_masks:
        Vl = np.bincount(near, minlength=J).astype(float) * n_masks
        beta = (hits + 1.0) / (Vl + 2.0)
    else:
        beta = 1.0 / (V + 2.0)
    return AtlasMesh(verts, verts.copy(), tets, alpha, beta, stiffness)


# ----------------------------------------------------------------------- io


def save_atlas(path, mesh: AtlasMesh) -> None:
    J, K = mesh.alpha.shape
    T = len(mesh.tets)
    head = _MAGIC + struct.pack("<IIII", _VERSION, J, T, K)
    body = b"".join(
        np.asarray(a, dtype="<f8").tobytes()
        for a in (
            mesh.vertices,
            mesh.reference_vertices,
            mesh.tets.astype(float),
            mesh.alpha,
            mesh.beta,
            np.array([mesh.deformation_stiffness]),
        )
    )
    Path(path).write_bytes(head + body)


def load_atlas(path) -> AtlasMesh:
    raw = Path(path).read_bytes()
    if raw[:4] != _MAGIC:
        raise ValueError(f"{path}: not an atlas file")
    version, J, T, K = struct.unpack_from("<IIII", raw, 4)
    if version != _VERSION:
        raise ValueError(f"{path}: unsupported atlas version {version}")
    arr = np.frombuffer(raw, dtype="<f8", offset=20)
    sizes = [J * 3, J * 3, T * 4, J * K, J, 1]
    if arr.size != sum(sizes):
        raise ValueError(f"{path}: truncated atlas file")
    parts = np.split(arr, np.cumsum(sizes)[:-1])
    return AtlasMesh(
        parts[0].reshape(J, 3),
        parts[1].reshape(J, 3),
        parts[2].reshape(T, 4).astype(np.int64),
        parts[3].reshape(J, K),
        parts[4],
        float(parts[5][0]),
    )
