"""Volume containers, grid geometry and the MVOL on-disk format.

Voxel data are always held flattened in x-fastest order, i.e. a volume of
shape ``(nx, ny, nz)`` is raveled with ``order="F"``.  Multi-contrast data
are ``I x N`` matrices with one column per contrast.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from enum import IntEnum
from pathlib import Path

import numpy as np
from scipy import ndimage

__all__ = [
    "Contrast",
    "VolumeGrid",
    "MultiContrastImage",
    "LabelMap",
    "LesionMask",
    "ProbabilityMap",
    "log_transform",
    "resample_affine",
    "save_volume",
    "load_volume",
    "DEFAULT_LOG_FLOOR",
]

DEFAULT_LOG_FLOOR = 1e-4

_MAGIC = b"MVOL"
_VERSION = 1
_LABEL_TAG = 254


class Contrast(IntEnum):
    T1w = 0
    T2w = 1
    FLAIR = 2
    PD = 3
    OTHER = 255

    @classmethod
    def parse(cls, value) -> "Contrast":
        if isinstance(value, Contrast):
            return value
        if isinstance(value, (int, np.integer)):
            return cls(int(value))
        for member in cls:
            if member.name.lower() == str(value).lower():
                return member
        raise ValueError(f"unknown contrast tag {value!r}")


@dataclass(frozen=True, eq=False)
class VolumeGrid:
    """Regular voxel grid with a voxel-to-world (mm) affine."""

    dims: tuple[int, int, int]
    voxel_size: tuple[float, float, float] = (1.0, 1.0, 1.0)
    affine: np.ndarray | None = None

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        vs = tuple(float(v) for v in self.voxel_size)
        if len(dims) != 3 or min(dims) < 1:
            raise ValueError(f"dims must be 3 positive integers, got {self.dims}")
        if len(vs) != 3 or min(vs) <= 0:
            raise ValueError(f"voxel_size must be 3 positive reals, got {self.voxel_size}")
        if self.affine is None:
            affine = np.diag([*vs, 1.0])
        else:
            affine = np.array(self.affine, dtype=float).reshape(4, 4)
        if abs(np.linalg.det(affine)) < 1e-12:
            raise ValueError("grid affine is not invertible")
        affine.setflags(write=False)
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "voxel_size", vs)
        object.__setattr__(self, "affine", affine)

    @property
    def n_voxels(self) -> int:
        return int(np.prod(self.dims))

    @property
    def voxel_volume(self) -> float:
        return float(np.prod(self.voxel_size))

    def voxel_indices(self) -> np.ndarray:
        """``I x 3`` integer voxel coordinates in x-fastest order."""
        ii = np.indices(self.dims).reshape(3, -1, order="F")
        return ii.T

    def voxel_centers(self) -> np.ndarray:
        """``I x 3`` world coordinates (mm) of the voxel centres."""
        idx = self.voxel_indices().astype(float)
        return idx @ self.affine[:3, :3].T + self.affine[:3, 3]

    def to_volume(self, flat: np.ndarray) -> np.ndarray:
        flat = np.asarray(flat)
        return flat.reshape(self.dims + flat.shape[1:], order="F")

    def flatten(self, vol: np.ndarray) -> np.ndarray:
        vol = np.asarray(vol)
        return vol.reshape((self.n_voxels,) + vol.shape[3:], order="F")

    def same_as(self, other: "VolumeGrid") -> bool:
        return (
            self.dims == other.dims
            and np.allclose(self.voxel_size, other.voxel_size)
            and np.allclose(self.affine, other.affine)
        )

    def __eq__(self, other):
        return isinstance(other, VolumeGrid) and self.same_as(other)

    def __hash__(self):
        return hash((self.dims, self.voxel_size))


def _as_readonly(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class MultiContrastImage:
    grid: VolumeGrid
    data: np.ndarray
    contrasts: tuple[Contrast, ...] = field(default=())
    log_domain: bool = False

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim == 1:
            data = data[:, None]
        if data.shape[0] != self.grid.n_voxels:
            raise ValueError(
                f"data has {data.shape[0]} rows but grid has {self.grid.n_voxels} voxels"
            )
        contrasts = tuple(Contrast.parse(c) for c in self.contrasts) or (Contrast.OTHER,) * data.shape[1]
        if len(contrasts) != data.shape[1]:
            raise ValueError(f"{len(contrasts)} contrast tags for {data.shape[1]} channels")
        bad = np.flatnonzero(~np.isfinite(data).all(axis=1))
        if bad.size:
            raise ValueError(f"non-finite intensity at voxel index {int(bad[0])}")
        object.__setattr__(self, "data", _as_readonly(data))
        object.__setattr__(self, "contrasts", contrasts)

    @property
    def n_contrasts(self) -> int:
        return self.data.shape[1]

    def channels_tagged(self, *tags: Contrast) -> list[int]:
        return [n for n, c in enumerate(self.contrasts) if c in tags]


@dataclass(frozen=True, eq=False)
class LabelMap:
    grid: VolumeGrid
    labels: np.ndarray
    n_labels: int | None = None

    def __post_init__(self):
        labels = np.asarray(self.labels).astype(np.int64).ravel()
        if labels.shape[0] != self.grid.n_voxels:
            raise ValueError("label count does not match grid")
        K = int(labels.max()) if self.n_labels is None else int(self.n_labels)
        if labels.min() < 1 or labels.max() > K:
            raise ValueError(f"labels must lie in [1, {K}]")
        object.__setattr__(self, "labels", _as_readonly(labels))
        object.__setattr__(self, "n_labels", K)


@dataclass(frozen=True, eq=False)
class LesionMask:
    grid: VolumeGrid
    mask: np.ndarray

    def __post_init__(self):
        mask = np.asarray(self.mask).ravel()
        if mask.shape[0] != self.grid.n_voxels:
            raise ValueError("mask size does not match grid")
        if not np.isin(mask, (0, 1)).all():
            raise ValueError("lesion mask values must be 0 or 1")
        object.__setattr__(self, "mask", _as_readonly(mask.astype(np.uint8)))


@dataclass(frozen=True, eq=False)
class ProbabilityMap:
    grid: VolumeGrid
    probs: np.ndarray

    def __post_init__(self):
        probs = np.asarray(self.probs, dtype=np.float64).ravel()
        if probs.shape[0] != self.grid.n_voxels:
            raise ValueError("probability map size does not match grid")
        if probs.size and (probs.min() < 0 or probs.max() > 1 or not np.isfinite(probs).all()):
            raise ValueError("probabilities must lie in [0, 1]")
        object.__setattr__(self, "probs", _as_readonly(probs))

    def threshold(self, level: float = 0.5) -> LesionMask:
        return LesionMask(self.grid, (self.probs > level).astype(np.uint8))


def log_transform(raw: MultiContrastImage, floor: float = DEFAULT_LOG_FLOOR) -> MultiContrastImage:
    """Natural log of intensities, clamping values below ``floor`` first."""
    if raw.log_domain:
        raise ValueError("image is already log-transformed")
    if floor <= 0:
        raise ValueError("log floor must be positive")
    data = np.log(np.maximum(raw.data, floor))
    return MultiContrastImage(raw.grid, data, raw.contrasts, log_domain=True)


def resample_affine(src: ProbabilityMap, target: VolumeGrid, affine=None) -> ProbabilityMap:
    """Trilinear resampling of ``src`` onto ``target``.

    ``affine`` maps target world coordinates (mm) to source world coordinates;
    ``None`` means identity.  Samples falling outside the source grid are 0.
    """
    A = np.eye(4) if affine is None else np.asarray(affine, dtype=float).reshape(4, 4)
    if abs(np.linalg.det(A)) < 1e-12:
        raise ValueError("resampling affine is singular")
    # target voxel index -> source voxel index
    M = np.linalg.solve(src.grid.affine, A @ target.affine)
    if (
        src.grid.dims == target.dims
        and np.allclose(M, np.eye(4), atol=1e-12)
    ):
        return ProbabilityMap(target, src.probs.copy())
    vol = src.grid.to_volume(src.probs)
    out = ndimage.affine_transform(
        vol, M[:3, :3], offset=M[:3, 3], output_shape=target.dims, order=1, mode="constant", cval=0.0
    )
    return ProbabilityMap(target, np.clip(target.flatten(out), 0.0, 1.0))


# --------------------------------------------------------------------------- io


def _pack_header(grid: VolumeGrid, tags, log_domain: bool) -> bytes:
    head = _MAGIC + struct.pack("<I", _VERSION)
    head += struct.pack("<3I", *grid.dims)
    head += struct.pack("<3f", *grid.voxel_size)
    head += struct.pack("<16f", *np.asarray(grid.affine, dtype=float).ravel())
    head += struct.pack("<I", len(tags))
    head += bytes(int(t) for t in tags)
    head += struct.pack("<B", int(bool(log_domain)))
    return head


def save_volume(path, volume) -> None:
    """Write any volume container to an MVOL file.

    Label maps use the u16 payload; everything else is stored as f32 channels.
    """
    path = Path(path)
    if isinstance(volume, LabelMap):
        payload = volume.labels.astype("<u2").tobytes()
        head = _pack_header(volume.grid, [_LABEL_TAG], False)
    else:
        if isinstance(volume, MultiContrastImage):
            data, tags, log_domain = volume.data, volume.contrasts, volume.log_domain
        elif isinstance(volume, LesionMask):
            data, tags, log_domain = volume.mask[:, None], [Contrast.OTHER], False
        elif isinstance(volume, ProbabilityMap):
            data, tags, log_domain = volume.probs[:, None], [Contrast.OTHER], False
        else:
            raise TypeError(f"cannot save {type(volume).__name__}")
        # channel-major, x-fastest within a channel
        payload = np.asarray(data, dtype="<f4").T.tobytes()
        head = _pack_header(volume.grid, tags, log_domain)
    path.write_bytes(head + payload)


def load_volume(path, kind: str = "auto"):
    """Read an MVOL file.

    ``kind`` is one of ``"auto"``, ``"image"``, ``"labels"``, ``"mask"`` or
    ``"probs"``.  ``"auto"`` returns a :class:`LabelMap` for label payloads and
    a :class:`MultiContrastImage` otherwise.
    """
    raw = Path(path).read_bytes()
    if raw[:4] != _MAGIC:
        raise ValueError(f"{path}: not an MVOL file")
    (version,) = struct.unpack_from("<I", raw, 4)
    if version != _VERSION:
        raise ValueError(f"{path}: unsupported MVOL version {version}")
    off = 8
    dims = struct.unpack_from("<3I", raw, off)
    off += 12
    vs = struct.unpack_from("<3f", raw, off)
    off += 12
    aff = np.array(struct.unpack_from("<16f", raw, off), dtype=float).reshape(4, 4)
    off += 64
    (n_ch,) = struct.unpack_from("<I", raw, off)
    off += 4
    tags = list(raw[off : off + n_ch])
    off += n_ch
    log_domain = bool(raw[off])
    off += 1
    grid = VolumeGrid(dims, vs, aff)
    I = grid.n_voxels
    if tags == [_LABEL_TAG]:
        labels = np.frombuffer(raw, dtype="<u2", count=I, offset=off).astype(np.int64)
        if kind not in ("auto", "labels"):
            raise ValueError(f"{path}: holds a label map, not {kind}")
        return LabelMap(grid, labels)
    if kind == "labels":
        raise ValueError(f"{path}: not a label map")
    data = np.frombuffer(raw, dtype="<f4", count=I * n_ch, offset=off)
    data = data.reshape(n_ch, I).T.astype(np.float64)
    if kind == "mask":
        return LesionMask(grid, np.rint(data[:, 0]).astype(np.uint8))
    if kind == "probs":
        return ProbabilityMap(grid, data[:, 0])
    return MultiContrastImage(grid, data, tuple(tags), log_domain)
