"""Variational autoencoder over binary lesion masks.

The decoder maps a latent vector ``h`` to per-voxel lesion probabilities
``f(h)``; the encoder maps a mask to a diagonal Gaussian over ``h``.  Layers
are 3x3x3 stride-2 convolutions (encoder) mirrored by their exact adjoints
(decoder), with dense layers into and out of the latent space.  Forward and
backward passes are plain numpy; arrays are channel-last ``(B, X, Y, Z, C)``.
"""

from __future__ import annotations

import csv
import logging
import struct
from dataclasses import dataclass, field
from itertools import product
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import ndimage
from scipy.special import expit

from .volume import LesionMask, ProbabilityMap, VolumeGrid

__all__ = [
    "ShapePriorModel",
    "VaeTrainConfig",
    "ElboResult",
    "TrainingDivergedError",
    "init_model",
    "encode",
    "decode",
    "elbo",
    "train",
    "sample_prior",
    "augment_rotations",
    "save_shape_prior",
    "load_shape_prior",
]

log = logging.getLogger(__name__)

# logit(1 - 1e-7): clipping logits here clamps probabilities to [1e-7, 1 - 1e-7]
LOGIT_CLIP = float(np.log((1 - 1e-7) / 1e-7))
_MAGIC = b"VAE1"
_VERSION = 1


class TrainingDivergedError(RuntimeError):
    def __init__(self, step: int, value: float):
        super().__init__(f"training diverged at step {step} (loss {value})")
        self.step = step


def _softplus(x):
    return np.logaddexp(0.0, x)


# ------------------------------------------------------------------ layers


def _out_shape(shape):
    return tuple((n + 1) // 2 for n in shape)


_PATCH_BUDGET = 4_000_000  # max floats in one im2col buffer; larger batches are chunked
_SCATTER_MIN_VOXELS = 4096
_OFFSETS = tuple(product(range(3), repeat=3))


def _pad(x):
    return np.pad(x, ((0, 0), (1, 1), (1, 1), (1, 1), (0, 0)))


def _im2col(xp, out_shape, stride):
    """Rows of 3x3x3 windows of the padded ``xp``, column order (a, b, c, channel)."""
    v = sliding_window_view(xp, (3, 3, 3), axis=(1, 2, 3))
    v = v[:, ::stride, ::stride, ::stride][:, : out_shape[0], : out_shape[1], : out_shape[2]]
    return v.transpose(0, 1, 2, 3, 5, 6, 7, 4).reshape(-1, 27 * xp.shape[-1])


def _chunks(n_batch, per_item):
    step = max(1, _PATCH_BUDGET // max(per_item, 1))
    return [slice(i, min(i + step, n_batch)) for i in range(0, n_batch, step)]


def _conv_nobias(x, W):
    """Stride-2, pad-1, 3x3x3 convolution.  x: (B,X,Y,Z,Ci), W: (3,3,3,Ci,Co)."""
    o = _out_shape(x.shape[1:4])
    Wm = W.reshape(-1, W.shape[-1])
    out = np.empty((x.shape[0], *o, W.shape[-1]))
    for sl in _chunks(len(x), int(np.prod(o)) * Wm.shape[0]):
        out[sl] = (_im2col(_pad(x[sl]), o, 2) @ Wm).reshape(-1, *o, W.shape[-1])
    return out


def _conv_adjoint(g, W, in_shape):
    """Adjoint of :func:`_conv_nobias` w.r.t. its input: (B,o...,Co) -> (B,*in_shape,Ci).

    Small volumes use a stride-1 correlation of the zero-dilated ``g`` with
    the flipped, channel-transposed kernel (few numpy calls); large ones
    scatter-add the 27 kernel taps directly (no wasted work on zeros).
    """
    B, o = len(g), g.shape[1:4]
    if np.prod(in_shape) > _SCATTER_MIN_VOXELS:
        xp = np.zeros((B, *(n + 2 for n in in_shape), W.shape[3]))
        for a in _OFFSETS:
            sl = (slice(None), *(slice(s, s + 2 * n - 1, 2) for s, n in zip(a, o)))
            xp[sl] += g @ W[a].T
        return xp[:, 1:-1, 1:-1, 1:-1]
    Wf = W[::-1, ::-1, ::-1].transpose(0, 1, 2, 4, 3).reshape(-1, W.shape[3])
    out = np.empty((B, *in_shape, W.shape[3]))
    for sl in _chunks(B, int(np.prod(in_shape)) * Wf.shape[0]):
        gd = np.zeros((sl.stop - sl.start, *(n + 2 for n in in_shape), g.shape[-1]))
        gd[:, 1 : 2 * o[0] : 2, 1 : 2 * o[1] : 2, 1 : 2 * o[2] : 2] = g[sl]
        out[sl] = (_im2col(gd, in_shape, 1) @ Wf).reshape(-1, *in_shape, W.shape[3])
    return out


def _conv_weight_grad(x, gout, W_shape):
    o = gout.shape[1:4]
    gW = np.zeros((27 * x.shape[-1], gout.shape[-1]))
    for sl in _chunks(len(x), int(np.prod(o)) * 27 * x.shape[-1]):
        gW += _im2col(_pad(x[sl]), o, 2).T @ gout[sl].reshape(-1, gout.shape[-1])
    return gW.reshape(W_shape)


def _conv(x, W, b):
    return _conv_nobias(x, W) + b


def _conv_backward(x, W, gout, need_input_grad=True):
    gx = _conv_adjoint(gout, W, x.shape[1:4]) if need_input_grad else None
    return gx, _conv_weight_grad(x, gout, W.shape), gout.sum(axis=(0, 1, 2, 3))


def _tconv(y, W, b, out_shape):
    """Transposed convolution, the exact adjoint of :func:`_conv`.

    y: (B,o...,Ci), W: (3,3,3,Co,Ci) -> (B,*out_shape,Co).
    """
    return _conv_adjoint(y, W, tuple(out_shape)) + b


def _tconv_backward(y, W, gout):
    gy = _conv_nobias(gout, W)
    gW = _conv_weight_grad(gout, y, W.shape)
    return gy, gW, gout.sum(axis=(0, 1, 2, 3))


# ------------------------------------------------------------------- model


@dataclass
class ShapePriorModel:
    """Weights plus the architecture descriptor (grid, channel schedule, latent size)."""

    grid: VolumeGrid
    latent_dim: int
    channels: tuple
    params: dict = field(repr=False)

    def __post_init__(self):
        self.channels = tuple(int(c) for c in self.channels)
        if self.latent_dim < 1 or not self.channels or min(self.channels) < 1:
            raise ValueError("latent_dim and channel counts must be positive")
        expected = _param_shapes(self.grid.dims, self.latent_dim, self.channels)
        for name, shape in expected.items():
            if name not in self.params or self.params[name].shape != shape:
                raise ValueError(f"parameter {name} missing or with wrong shape (expected {shape})")

    @property
    def shapes(self) -> list:
        s = [tuple(self.grid.dims)]
        for _ in self.channels:
            s.append(_out_shape(s[-1]))
        return s

    def copy(self) -> "ShapePriorModel":
        return ShapePriorModel(self.grid, self.latent_dim, self.channels, {k: v.copy() for k, v in self.params.items()})

    def flat_params(self) -> np.ndarray:
        return np.concatenate([self.params[k].ravel() for k in self.param_names()])

    def with_flat_params(self, x: np.ndarray) -> "ShapePriorModel":
        out, i = {}, 0
        for k in self.param_names():
            n = self.params[k].size
            out[k] = np.asarray(x[i : i + n], float).reshape(self.params[k].shape)
            i += n
        return ShapePriorModel(self.grid, self.latent_dim, self.channels, out)

    def param_names(self) -> list:
        return list(_param_shapes(self.grid.dims, self.latent_dim, self.channels))


def _param_shapes(dims, L, channels) -> dict:
    shapes = [tuple(dims)]
    for _ in channels:
        shapes.append(_out_shape(shapes[-1]))
    flat = int(np.prod(shapes[-1])) * channels[-1]
    ch = (1, *channels)
    out = {}
    for j in range(1, len(ch)):
        out[f"enc_conv{j}_W"] = (3, 3, 3, ch[j - 1], ch[j])
        out[f"enc_conv{j}_b"] = (ch[j],)
    out["enc_dense_W"] = (flat, 2 * L)
    out["enc_dense_b"] = (2 * L,)
    out["dec_dense_W"] = (L, flat)
    out["dec_dense_b"] = (flat,)
    for j in range(len(ch) - 1, 0, -1):
        out[f"dec_tconv{j}_W"] = (3, 3, 3, ch[j - 1], ch[j])
        out[f"dec_tconv{j}_b"] = (ch[j - 1],)
    return out


def init_model(grid: VolumeGrid, latent_dim: int = 32, channels=(8, 16, 32), seed: int = 0,
               output_bias: float = 0.0) -> ShapePriorModel:
    """Seeded uniform fan-in initialization; biases start at zero (``output_bias`` for the last layer)."""
    if latent_dim < 1 or not channels or min(channels) < 1:
        raise ValueError("latent_dim and channel counts must be positive")
    rng = np.random.Generator(np.random.Philox(seed))
    shapes = _param_shapes(grid.dims, latent_dim, tuple(channels))
    params = {}
    for name, shape in shapes.items():
        if name.endswith("_b"):
            params[name] = np.zeros(shape)
            continue
        if "conv" in name:
            fan_in = 27 * shape[3] if name.startswith("enc") else 27 * shape[4] / 8
        else:
            fan_in = shape[0]
        gain = 6.0 if name.startswith("dec_dense") or "conv" in name else 3.0
        lim = np.sqrt(gain / fan_in)
        params[name] = rng.uniform(-lim, lim, size=shape)
    params["dec_tconv1_b"][:] = output_bias
    return ShapePriorModel(grid, latent_dim, tuple(channels), params)


def _encode_batch(model: ShapePriorModel, x: np.ndarray):
    p = model.params
    acts = [x[..., None]]
    pre = []
    for j in range(1, len(model.channels) + 1):
        a = _conv(acts[-1], p[f"enc_conv{j}_W"], p[f"enc_conv{j}_b"])
        pre.append(a)
        acts.append(np.maximum(a, 0.0))
    flat = acts[-1].reshape(len(x), -1)
    e = flat @ p["enc_dense_W"] + p["enc_dense_b"]
    L = model.latent_dim
    mu, s = e[:, :L], e[:, L:]
    return mu, _softplus(s), (acts, pre, flat, s)


def _encode_backward(model, cache, g_mu, g_sigma):
    p = model.params
    acts, pre, flat, s = cache
    grads = {}
    ge = np.concatenate([g_mu, g_sigma * expit(s)], axis=1)
    grads["enc_dense_W"] = flat.T @ ge
    grads["enc_dense_b"] = ge.sum(axis=0)
    g = (ge @ p["enc_dense_W"].T).reshape(acts[-1].shape)
    for j in range(len(model.channels), 0, -1):
        g = g * (pre[j - 1] > 0)
        g, grads[f"enc_conv{j}_W"], grads[f"enc_conv{j}_b"] = _conv_backward(
            acts[j - 1], p[f"enc_conv{j}_W"], g, need_input_grad=j > 1
        )
    return grads


def _decode_batch(model: ShapePriorModel, h: np.ndarray):
    """Returns unclipped logits (B,X,Y,Z) and the cache for backprop."""
    p = model.params
    shapes = model.shapes
    m = len(model.channels)
    a0 = h @ p["dec_dense_W"] + p["dec_dense_b"]
    g = np.maximum(a0, 0.0).reshape(len(h), *shapes[m], model.channels[-1])
    ins, pre = [g], [a0]
    for j in range(m, 0, -1):
        a = _tconv(g, p[f"dec_tconv{j}_W"], p[f"dec_tconv{j}_b"], shapes[j - 1])
        if j > 1:
            pre.append(a)
            g = np.maximum(a, 0.0)
            ins.append(g)
        else:
            g = a
    return g[..., 0], (h, ins, pre)


def _decode_backward(model, cache, g_logits):
    p = model.params
    h, ins, pre = cache
    m = len(model.channels)
    grads = {}
    g = g_logits[..., None]
    # ins[m-j] feeds transposed conv j; it is relu(pre[m-j])
    for j in range(1, m + 1):
        g, grads[f"dec_tconv{j}_W"], grads[f"dec_tconv{j}_b"] = _tconv_backward(
            ins[m - j], p[f"dec_tconv{j}_W"], g
        )
        g = g * (pre[m - j].reshape(g.shape) > 0)
    g = g.reshape(len(h), -1)
    grads["dec_dense_W"] = h.T @ g
    grads["dec_dense_b"] = g.sum(axis=0)
    return grads, g @ p["dec_dense_W"].T


def _mask_volume(model: ShapePriorModel, z) -> np.ndarray:
    if isinstance(z, LesionMask):
        if not model.grid.same_as(z.grid):
            raise ValueError(
                "mask grid differs from the shape model's training grid; resample it first"
            )
        return z.grid.to_volume(z.mask).astype(float)
    z = np.asarray(z, dtype=float)
    if z.shape == tuple(model.grid.dims):
        return z
    if z.shape == (model.grid.n_voxels,):
        return model.grid.to_volume(z)
    raise ValueError(f"mask shape {z.shape} does not match training grid {model.grid.dims}")


def encode(model: ShapePriorModel, z) -> tuple[np.ndarray, np.ndarray]:
    """Encoder mean and standard deviation (both length ``latent_dim``)."""
    mu, sigma, _ = _encode_batch(model, _mask_volume(model, z)[None])
    return mu[0], sigma[0]


def decode(model: ShapePriorModel, h) -> ProbabilityMap:
    h = np.asarray(h, dtype=float).reshape(1, model.latent_dim)
    if not np.all(np.isfinite(h)):
        raise ValueError("latent vector must be finite")
    logits, _ = _decode_batch(model, h)
    probs = expit(np.clip(logits[0], -LOGIT_CLIP, LOGIT_CLIP))
    return ProbabilityMap(model.grid, model.grid.flatten(probs))


def sample_prior(model: ShapePriorModel, rng: np.random.Generator) -> ProbabilityMap:
    return decode(model, rng.standard_normal(model.latent_dim))


# -------------------------------------------------------------------- ELBO


@dataclass
class ElboResult:
    value: float  # mean over the batch
    kl: float
    reconstruction: float
    grads: dict | None


def _elbo_batch(model, x, eps, with_grad=True) -> ElboResult:
    """x: (B,X,Y,Z) binary, eps: (S,B,L) standard-normal draws."""
    B = len(x)
    S = len(eps)
    mu, sigma, enc_cache = _encode_batch(model, x)
    kl = 0.5 * (mu**2 + sigma**2 - 2 * np.log(sigma) - 1).sum(axis=1)
    recon = np.zeros(B)
    g_mu = -mu.copy()  # derivative of -KL
    g_sigma = -(sigma - 1.0 / sigma)
    dec_grads = None
    for s in range(S):
        h = mu + sigma * eps[s]
        logits, dec_cache = _decode_batch(model, h)
        inside = (logits > -LOGIT_CLIP) & (logits < LOGIT_CLIP)
        a = np.clip(logits, -LOGIT_CLIP, LOGIT_CLIP)
        recon += (x * a - _softplus(a)).sum(axis=(1, 2, 3)) / S
        if with_grad:
            g_logits = (x - expit(a)) * inside / S
            g, gh = _decode_backward(model, dec_cache, g_logits)
            dec_grads = g if dec_grads is None else {k: dec_grads[k] + g[k] for k in g}
            g_mu += gh
            g_sigma += gh * eps[s]
    value = recon - kl
    grads = None
    if with_grad:
        grads = _encode_backward(model, enc_cache, g_mu, g_sigma)
        grads.update(dec_grads)
        grads = {k: v / B for k, v in grads.items()}
    return ElboResult(float(value.mean()), float(kl.mean()), float(recon.mean()), grads)


def elbo(model: ShapePriorModel, z, rng: np.random.Generator | None = None, mc_samples: int = 1,
         eps: np.ndarray | None = None, with_grad: bool = True) -> ElboResult:
    """ELBO of one mask (or a batch ``(B,X,Y,Z)``) and its gradient w.r.t. all weights.

    Pass ``eps`` (shape ``(mc_samples, B, L)``) to fix the reparameterization
    noise, e.g. for finite-difference checks.
    """
    x = np.asarray(z, dtype=float) if not isinstance(z, LesionMask) else None
    if x is None or x.ndim != 4:
        x = _mask_volume(model, z)[None]
    if eps is None:
        rng = rng if rng is not None else np.random.default_rng()
        eps = rng.standard_normal((mc_samples, len(x), model.latent_dim))
    return _elbo_batch(model, x, np.asarray(eps, float), with_grad)


# ---------------------------------------------------------------- training


@dataclass
class VaeTrainConfig:
    epochs: int = 100
    batch_size: int = 10
    learning_rate: float = 1e-4
    mc_samples: int = 1
    rotation_deg: float = 10.0
    seed: int = 0
    latent_dim: int = 32
    channels: tuple = (8, 16, 32)
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or self.mc_samples < 1:
            raise ValueError("epochs, batch_size and mc_samples must be >= 1")
        if self.learning_rate < 0 or self.rotation_deg < 0:
            raise ValueError("learning_rate and rotation_deg must be non-negative")


def augment_rotations(volume: np.ndarray, degrees: float) -> list[np.ndarray]:
    """The mask plus its rotations by +-``degrees`` about each axis (re-binarized at 0.5)."""
    out = [volume.astype(float)]
    if degrees == 0:
        return out
    for axes in ((1, 2), (0, 2), (0, 1)):
        for sgn in (1, -1):
            r = ndimage.rotate(volume.astype(float), sgn * degrees, axes=axes, reshape=False, order=1)
            out.append((r > 0.5).astype(float))
    return out


def train(masks, config: VaeTrainConfig | None = None, model: ShapePriorModel | None = None,
          log_path=None) -> tuple[ShapePriorModel, list]:
    """Maximize the mean ELBO with Adam.  Returns ``(model, log_rows)``.

    Each log row is ``(epoch, mean ELBO, mean KL, mean reconstruction)``.
    """
    config = config or VaeTrainConfig()
    masks = list(masks)
    if not masks:
        raise ValueError("need at least one training mask")
    grid = masks[0].grid
    for m in masks:
        if not grid.same_as(m.grid):
            raise ValueError("training masks must share the training grid")
    data = []
    for m in masks:
        data.extend(augment_rotations(grid.to_volume(m.mask), config.rotation_deg))
    data = np.stack(data)
    if model is None:
        freq = float(np.clip(data.mean(), 1e-4, 1 - 1e-4))
        model = init_model(grid, config.latent_dim, config.channels, config.seed, np.log(freq / (1 - freq)))
    else:
        model = model.copy()
    rng = np.random.Generator(np.random.Philox(key=config.seed + 1))
    names = model.param_names()
    m1 = {k: np.zeros_like(model.params[k]) for k in names}
    m2 = {k: np.zeros_like(model.params[k]) for k in names}
    rows = []
    step = 0
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(len(data))
        tot = np.zeros(3)
        for start in range(0, len(data), config.batch_size):
            idx = order[start : start + config.batch_size]
            eps = rng.standard_normal((config.mc_samples, len(idx), model.latent_dim))
            res = _elbo_batch(model, data[idx], eps)
            step += 1
            if not np.isfinite(res.value) or not all(np.all(np.isfinite(g)) for g in res.grads.values()):
                raise TrainingDivergedError(step, res.value)
            tot += np.array([res.value, res.kl, res.reconstruction]) * len(idx)
            c1 = 1 - config.beta1**step
            c2 = 1 - config.beta2**step
            for k in names:
                g = -res.grads[k]  # minimize the negative ELBO
                m1[k] = config.beta1 * m1[k] + (1 - config.beta1) * g
                m2[k] = config.beta2 * m2[k] + (1 - config.beta2) * g * g
                model.params[k] -= config.learning_rate * (m1[k] / c1) / (np.sqrt(m2[k] / c2) + config.adam_eps)
        tot /= len(data)
        rows.append((epoch, *tot))
        log.debug("epoch %d elbo %.4f kl %.4f recon %.4f", epoch, *tot)
    if log_path is not None:
        write_training_log(log_path, rows)
    return model, rows


def write_training_log(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "elbo", "kl", "reconstruction"])
        for r in rows:
            w.writerow([r[0], *(repr(float(v)) for v in r[1:])])


# ---------------------------------------------------------------------- io


def save_shape_prior(path, model: ShapePriorModel) -> None:
    g = model.grid
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", _VERSION))
        fh.write(struct.pack("<3I", *g.dims))
        fh.write(struct.pack("<3f", *g.voxel_size))
        fh.write(np.asarray(g.affine, "<f4").tobytes())
        fh.write(struct.pack("<II", model.latent_dim, len(model.channels)))
        fh.write(struct.pack(f"<{len(model.channels)}I", *model.channels))
        for k in model.param_names():
            fh.write(np.ascontiguousarray(model.params[k], "<f4").tobytes())


def load_shape_prior(path) -> ShapePriorModel:
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:4] != _MAGIC:
        raise ValueError(f"{path}: not a shape-prior file")
    (version,) = struct.unpack_from("<I", buf, 4)
    if version != _VERSION:
        raise ValueError(f"{path}: unsupported version {version}")
    off = 8
    dims = struct.unpack_from("<3I", buf, off)
    off += 12
    vs = struct.unpack_from("<3f", buf, off)
    off += 12
    affine = np.frombuffer(buf, "<f4", 16, off).reshape(4, 4).astype(float)
    off += 64
    L, n = struct.unpack_from("<II", buf, off)
    off += 8
    channels = struct.unpack_from(f"<{n}I", buf, off)
    off += 4 * n
    grid = VolumeGrid(dims, vs, affine)
    params = {}
    for k, shape in _param_shapes(dims, L, channels).items():
        size = int(np.prod(shape))
        if off + 4 * size > len(buf):
            raise ValueError(f"{path}: truncated at tensor {k}")
        params[k] = np.frombuffer(buf, "<f4", size, off).reshape(shape).astype(float)
        off += 4 * size
    if off != len(buf):
        raise ValueError(f"{path}: {len(buf) - off} trailing bytes")
    return ShapePriorModel(grid, L, channels, params)
