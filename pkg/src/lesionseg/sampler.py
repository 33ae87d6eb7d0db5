"""Blocked Gibbs sampling of the lesion posterior and the final two-step segmentation.

Given fitted whole-brain parameters, the sampler cycles exact conditional
draws of the lesion covariance, lesion mean, shape code and lesion
indicators.  The per-voxel lesion posterior is estimated by averaging the
analytic indicator probabilities over the recorded sweeps.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from .atlas import interpolate_lesion_prior, interpolate_prior, rasterize
from .gem import FitResult, _colsum, _label_log_likelihoods, weighted_moments
from .likelihood import AppearanceParams, BiasBasis
from .shape_prior import ShapePriorModel, decode, encode
from .volume import (
    Contrast,
    LabelMap,
    LesionMask,
    MultiContrastImage,
    ProbabilityMap,
    VolumeGrid,
    resample_affine,
)

__all__ = [
    "SamplerConfig",
    "SamplerState",
    "PosteriorResult",
    "candidate_mask",
    "sample_inverse_wishart",
    "gibbs_sweep",
    "lesion_posterior",
    "final_segmentation",
    "whole_brain_posterior",
    "SamplerContext",
]

log = logging.getLogger(__name__)

# rng stream ids within a sweep
_SIGMA, _MU, _H, _Z = range(4)


@dataclass
class SamplerConfig:
    samples: int = 50
    burn_in: int = 50
    gamma: float = 0.5
    seed: int = 0
    subject_to_prior_affine: np.ndarray | None = None
    any_channel: bool = False  # candidate rule: exceed GM mean in any (instead of all) FLAIR/T2 channel

    def __post_init__(self):
        if self.samples < 1:
            raise ValueError("samples must be >= 1")
        if self.burn_in < 0:
            raise ValueError("burn_in must be >= 0")
        if not 0 < self.gamma < 1:
            raise ValueError("gamma must lie in (0, 1)")
        if self.subject_to_prior_affine is not None:
            a = np.asarray(self.subject_to_prior_affine, float)
            if a.shape != (4, 4):
                raise ValueError("subject_to_prior_affine must be 4x4")
            self.subject_to_prior_affine = a


@dataclass
class SamplerState:
    z: np.ndarray
    h: np.ndarray | None
    mu_les: np.ndarray
    sigma_les: np.ndarray
    posterior_sum: np.ndarray
    sweep: int = 0
    recorded: int = 0


def _rng(seed: int, sweep: int, stream: int) -> np.random.Generator:
    """Counter-style stream keyed by (seed, sweep, block): independent of execution order."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, sweep, stream])))


# ------------------------------------------------------------ candidate mask


def candidate_mask(image: MultiContrastImage, params: AppearanceParams, basis: BiasBasis,
                   any_channel: bool = False) -> LesionMask:
    """Voxels whose bias-corrected intensity exceeds the GM mean in the FLAIR/T2w channels.

    All-ones if the image has neither channel.
    """
    gm = params.sharing.gm_class
    if gm is None:
        raise ValueError("sharing map has no gray-matter class; cannot build the candidate mask")
    chans = image.channels_tagged(Contrast.FLAIR, Contrast.T2w)
    if not chans:
        return LesionMask(image.grid, np.ones(image.grid.n_voxels, np.uint8))
    corrected = image.data - params.bias_field(basis)
    above = corrected[:, chans] > params.class_mean(gm)[chans]
    keep = above.any(axis=1) if any_channel else above.all(axis=1)
    return LesionMask(image.grid, keep.astype(np.uint8))


# --------------------------------------------------------- inverse Wishart


def sample_inverse_wishart(scale: np.ndarray, dof: float, rng: np.random.Generator) -> np.ndarray:
    """Draw from IW(scale, dof) (mean ``scale / (dof - N - 1)``) via the Bartlett decomposition.

    A Wishart(scale^-1, dof) matrix L A A^T L^T is built from chi-square
    diagonals and standard-normal sub-diagonals, then inverted.
    """
    scale = np.asarray(scale, float)
    N = scale.shape[0]
    if dof <= N - 1:
        raise ValueError(f"inverse-Wishart degrees of freedom {dof:g} must exceed N-1 = {N - 1}")
    L = np.linalg.cholesky(np.linalg.inv(scale))
    A = np.zeros((N, N))
    A[np.diag_indices(N)] = np.sqrt(rng.chisquare(dof - np.arange(N)))
    low = np.tril_indices(N, -1)
    A[low] = rng.standard_normal(len(low[0]))
    LA = L @ A
    # Sigma = (LA LA^T)^-1 = LA^-T LA^-1
    inv_LA = np.linalg.solve(LA, np.eye(N))
    S = inv_LA.T @ inv_LA
    return 0.5 * (S + S.T)


# ---------------------------------------------------------------- context


@dataclass
class SamplerContext:
    """Everything a sweep needs that stays fixed: data, theta-hat, priors, shape model."""

    grid: VolumeGrid
    corrected: np.ndarray  # I x N bias-corrected intensities
    log_nonlesion: np.ndarray  # I: log sum_k N(d_i | k) p(l_i = k)
    rho: np.ndarray  # I: spatial lesion prior
    candidate: np.ndarray  # I bool
    mu_wm: np.ndarray
    sigma_wm: np.ndarray
    nu: float
    kappa: float
    shape_model: ShapePriorModel | None
    to_prior_affine: np.ndarray | None = None
    extras: dict = field(default_factory=dict)

    def __post_init__(self):
        N = self.corrected.shape[1]
        dof = self.nu - N - 2
        if self.nu <= N + 1 or dof <= N - 1:
            raise ValueError(
                f"lesion sampling needs nu - N - 2 > N - 1 (proper IW draws), got nu={self.nu:g}, N={N}"
            )


def _gaussian_log_density(x: np.ndarray, mean: np.ndarray, cov: np.ndarray) -> np.ndarray:
    N = len(mean)
    L = np.linalg.cholesky(cov)
    y = np.linalg.solve(L, (x - mean).T)
    return -0.5 * (y * y).sum(axis=0) - np.log(np.diag(L)).sum() - 0.5 * N * np.log(2 * np.pi)


def _shape_probabilities(ctx: SamplerContext, h: np.ndarray) -> np.ndarray:
    f = decode(ctx.shape_model, h)
    if ctx.to_prior_affine is None and ctx.shape_model.grid.same_as(ctx.grid):
        return f.probs
    # subject voxel world -> training world is the map we need for pulling f into the subject grid
    return resample_affine(f, ctx.grid, ctx.to_prior_affine).probs


def _mask_in_prior_space(ctx: SamplerContext, z: np.ndarray) -> np.ndarray:
    m = ctx.shape_model
    if ctx.to_prior_affine is None and m.grid.same_as(ctx.grid):
        return z.astype(float)
    inv = None if ctx.to_prior_affine is None else np.linalg.inv(ctx.to_prior_affine)
    r = resample_affine(ProbabilityMap(ctx.grid, z.astype(float)), m.grid, inv)
    return (r.probs > 0.5).astype(float)


def lesion_probabilities(ctx: SamplerContext, mu_les, sigma_les, f) -> np.ndarray:
    """Analytic p(z_i = 1 | d_i, theta, h, theta_les); exactly 0 outside the candidate mask."""
    prior1 = f * ctx.rho
    with np.errstate(divide="ignore"):
        logit = (
            _gaussian_log_density(ctx.corrected, mu_les, sigma_les)
            + np.log(prior1)
            - np.log1p(-prior1)
            - ctx.log_nonlesion
        )
    return np.where(ctx.candidate, expit(logit), 0.0)


def _lesion_stats(ctx: SamplerContext, z: np.ndarray):
    n, m, V = weighted_moments(ctx.corrected, z.astype(float))
    N = ctx.corrected.shape[1]
    if n == 0:
        return 0.0, np.zeros(N), np.zeros((N, N))
    d = m - ctx.mu_wm
    psi = n * V + (ctx.nu * n / (ctx.nu + n)) * np.outer(d, d)
    return n, m, psi


def gibbs_sweep(state: SamplerState, ctx: SamplerContext, seed: int) -> tuple[SamplerState, np.ndarray]:
    """One sweep in the order Sigma_les, mu_les, h, z.  Returns the new state and the
    analytic lesion probabilities used for the z draw."""
    s = state.sweep
    N = ctx.corrected.shape[1]
    n, m, psi = _lesion_stats(ctx, state.z)
    scale = psi + ctx.nu * ctx.kappa * ctx.sigma_wm
    sigma = sample_inverse_wishart(scale, n + ctx.nu - N - 2, _rng(seed, s, _SIGMA))
    mean = (n * m + ctx.nu * ctx.mu_wm) / (n + ctx.nu)
    cl = np.linalg.cholesky(sigma / (n + ctx.nu))
    mu = mean + cl @ _rng(seed, s, _MU).standard_normal(N)
    h = None
    if ctx.shape_model is None:
        f = np.ones(len(ctx.rho))
    else:
        mu_h, sd_h = encode(ctx.shape_model, _mask_in_prior_space(ctx, state.z))
        h = mu_h + sd_h * _rng(seed, s, _H).standard_normal(len(mu_h))
        f = _shape_probabilities(ctx, h)
    p = lesion_probabilities(ctx, mu, sigma, f)
    u = _rng(seed, s, _Z).random(len(p))
    z = (u < p) & ctx.candidate
    new = SamplerState(z, h, mu, sigma, state.posterior_sum, s + 1, state.recorded)
    return new, p


@dataclass
class PosteriorResult:
    posterior: ProbabilityMap
    candidate: LesionMask
    chain: list  # (sweep, N_les, mu_les, trace Sigma_les)
    state: SamplerState

    def write_chain(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            n = len(self.chain[0][2]) if self.chain else 0
            w.writerow(["sweep", "n_les", *[f"mu_les_{j}" for j in range(n)], "trace_sigma_les"])
            for sweep, n_les, mu, tr in self.chain:
                w.writerow([sweep, repr(float(n_les)), *(repr(float(v)) for v in mu), repr(float(tr))])


def whole_brain_posterior(result: FitResult, image: MultiContrastImage):
    """K-label posterior at theta-hat (lesion class excluded), its log evidence and the atlas priors.

    Returns ``(W, log_nonlesion, prior, rho)``, all per voxel.
    """
    mesh = result.mesh
    rast = rasterize(mesh, result.grid)
    prior = interpolate_prior(mesh, rast)
    rho = interpolate_lesion_prior(mesh, rast).probs
    ll = _label_log_likelihoods(image.data, result.params, result.basis)[:, : mesh.n_labels]
    top = ll.max(axis=1)
    joint = np.exp(ll - top[:, None]) * prior
    tot = _colsum(joint)
    W = joint / tot[:, None]
    return W, top + np.log(tot), prior, rho


def lesion_posterior(
    image: MultiContrastImage,
    result: FitResult,
    shape_model: ShapePriorModel | None,
    config: SamplerConfig | None = None,
    rho_override: np.ndarray | None = None,
) -> PosteriorResult:
    """Run ``burn_in`` discarded then ``samples`` recorded sweeps; average the analytic probabilities.

    ``result`` must come from ``fit_lesion_augmented``.  Without a shape model
    the decoder output is clamped to 1.
    """
    config = config or SamplerConfig()
    sh = result.params.sharing
    if sh.lesion_class is None or result.lesion_prior is None:
        raise ValueError("lesion sampling needs a lesion-augmented fit")
    if not image.grid.same_as(result.grid):
        raise ValueError("image grid differs from the fitted grid")
    params = result.params
    W, log_nonlesion, prior, rho = whole_brain_posterior(result, image)
    if rho_override is not None:
        rho = np.broadcast_to(np.asarray(rho_override, float), rho.shape).copy()
    cand = candidate_mask(image, params, result.basis, config.any_channel)
    wm = sh.class_components(sh.wm_class)[0]
    les = sh.class_components(sh.lesion_class)[0]
    ctx = SamplerContext(
        grid=image.grid,
        corrected=image.data - params.bias_field(result.basis),
        log_nonlesion=log_nonlesion,
        rho=rho,
        candidate=cand.mask.astype(bool),
        mu_wm=params.means[wm],
        sigma_wm=params.covs[wm],
        nu=result.nu,
        kappa=result.lesion_prior.kappa,
        shape_model=shape_model,
        to_prior_affine=config.subject_to_prior_affine,
    )
    if shape_model is not None and config.subject_to_prior_affine is None and not shape_model.grid.same_as(image.grid):
        raise ValueError("shape model grid differs from the image grid; pass subject_to_prior_affine")
    z0 = (result.assignments.W[:, -1] > 0.5) & ctx.candidate
    state = SamplerState(z0, None, params.means[les].copy(), params.covs[les].copy(), np.zeros(len(z0)))
    chain = []
    for sweep in range(config.burn_in + config.samples):
        state, p = gibbs_sweep(state, ctx, config.seed)
        if sweep >= config.burn_in:
            state.posterior_sum += p
            state.recorded += 1
        chain.append((sweep, float(state.z.sum()), state.mu_les.copy(), float(np.trace(state.sigma_les))))
    post = np.clip(state.posterior_sum / state.recorded, 0.0, 1.0)
    return PosteriorResult(ProbabilityMap(image.grid, post), cand, chain, state)


def final_segmentation(posterior: ProbabilityMap, W_hat: np.ndarray, gamma: float = 0.5,
                       prior: np.ndarray | None = None) -> tuple[LesionMask, LabelMap]:
    """Threshold the lesion posterior (strictly above ``gamma``) and label the rest by argmax.

    Non-lesion voxels take argmax_k W_hat[i, k]; lesion voxels take the argmax
    of ``prior`` (the atlas prior) when given, else of ``W_hat``.  Ties go to
    the lowest label index.
    """
    if not 0 < gamma < 1:
        raise ValueError("gamma must lie in (0, 1)")
    W_hat = np.asarray(W_hat, float)
    if W_hat.shape[0] != posterior.grid.n_voxels:
        raise ValueError("posterior and label posterior cover different voxel counts")
    z = posterior.probs > gamma
    labels = np.argmax(W_hat, axis=1) + 1
    if prior is not None and z.any():
        labels[z] = np.argmax(np.asarray(prior)[z], axis=1) + 1
    return (
        LesionMask(posterior.grid, z.astype(np.uint8)),
        LabelMap(posterior.grid, labels.astype(np.int64), W_hat.shape[1]),
    )
