"""scikit-learn style wrappers around the functional pipeline.

Segmentation is transductive: the model parameters (bias field, Gaussians,
atlas deformation) belong to one subject, so ``LesionSegmenter.predict``
only accepts the image it was fitted on.  ``WholeBrainSegmenter.predict``
applies the fitted parameters to any image on the same grid.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError
from sklearn.utils.validation import check_is_fitted

from .atlas import AtlasMesh, interpolate_prior, rasterize
from .gem import FitConfig, e_step, fit, fit_lesion_augmented
from .likelihood import ClassSharingMap, LesionIntensityPrior
from .sampler import SamplerConfig, final_segmentation, lesion_posterior, whole_brain_posterior
from .shape_prior import (
    ShapePriorModel,
    VaeTrainConfig,
    decode,
    elbo,
    encode,
    sample_prior,
    train,
)
from .validation import check_affine, check_image, check_masks, check_open_unit, check_same_grid, check_scalar
from .volume import LabelMap, LesionMask, MultiContrastImage, ProbabilityMap

__all__ = ["WholeBrainSegmenter", "LesionSegmenter", "LesionShapeVAE"]


def _fit_config(est) -> FitConfig:
    return FitConfig(
        max_outer_iters=est.max_outer_iters,
        gem_iters_per_outer=est.gem_iters_per_outer,
        deformation_steps=est.deformation_steps,
        convergence_tol=est.convergence_tol,
        diagonal_mode=est.diagonal_mode,
        bias_order=tuple(est.bias_order),
    )


def _check_atlas(atlas, sharing):
    if not isinstance(atlas, AtlasMesh):
        raise TypeError("atlas must be an AtlasMesh")
    if not isinstance(sharing, ClassSharingMap):
        raise TypeError("sharing must be a ClassSharingMap")
    if atlas.n_labels != sharing.n_labels:
        raise ValueError(f"atlas has {atlas.n_labels} labels but the sharing map {sharing.n_labels}")


class WholeBrainSegmenter(BaseEstimator):
    """Atlas-based whole-brain segmentation with bias-field correction."""

    def __init__(self, atlas=None, sharing=None, max_outer_iters=30, gem_iters_per_outer=5,
                 deformation_steps=20, convergence_tol=1e-5, diagonal_mode=False, bias_order=(3, 3, 3)):
        self.atlas = atlas
        self.sharing = sharing
        self.max_outer_iters = max_outer_iters
        self.gem_iters_per_outer = gem_iters_per_outer
        self.deformation_steps = deformation_steps
        self.convergence_tol = convergence_tol
        self.diagonal_mode = diagonal_mode
        self.bias_order = bias_order

    def fit(self, X, y=None):
        X = check_image(X)
        _check_atlas(self.atlas, self.sharing)
        self.result_ = fit(X, self.atlas, self.sharing, _fit_config(self))
        self.params_ = self.result_.params
        self.mesh_ = self.result_.mesh
        self.grid_ = X.grid
        self.n_features_in_ = X.n_contrasts
        return self

    def predict_proba(self, X) -> np.ndarray:
        """Per-voxel label posteriors (I x K) under the fitted parameters."""
        check_is_fitted(self, "result_")
        X = check_image(X)
        check_same_grid(X.grid, self.grid_, "image and fitted model")
        prior = interpolate_prior(self.mesh_, rasterize(self.mesh_, X.grid))
        return e_step(X, prior, self.params_, self.result_.basis).W

    def predict(self, X) -> LabelMap:
        W = self.predict_proba(X)
        return LabelMap(X.grid, np.argmax(W, axis=1) + 1, W.shape[1])

    def fit_predict(self, X, y=None) -> LabelMap:
        return self.fit(X).predict(X)

    def transform(self, X) -> MultiContrastImage:
        """Bias-corrected (log-domain) intensities."""
        check_is_fitted(self, "result_")
        X = check_image(X)
        check_same_grid(X.grid, self.grid_, "image and fitted model")
        corrected = X.data - self.params_.bias_field(self.result_.basis)
        return MultiContrastImage(X.grid, corrected, X.contrasts, log_domain=True)


class LesionSegmenter(BaseEstimator):
    """Simultaneous whole-brain and lesion segmentation.

    ``shape_prior=None`` runs the ablation with the decoder output clamped to 1.
    """

    def __init__(self, atlas=None, sharing=None, shape_prior=None, nu=500.0, kappa=50.0, gamma=0.5,
                 samples=50, burn_in=50, seed=0, subject_to_prior_affine=None, any_channel=False,
                 max_outer_iters=30, gem_iters_per_outer=5, deformation_steps=20, convergence_tol=1e-5,
                 diagonal_mode=False, bias_order=(3, 3, 3)):
        self.atlas = atlas
        self.sharing = sharing
        self.shape_prior = shape_prior
        self.nu = nu
        self.kappa = kappa
        self.gamma = gamma
        self.samples = samples
        self.burn_in = burn_in
        self.seed = seed
        self.subject_to_prior_affine = subject_to_prior_affine
        self.any_channel = any_channel
        self.max_outer_iters = max_outer_iters
        self.gem_iters_per_outer = gem_iters_per_outer
        self.deformation_steps = deformation_steps
        self.convergence_tol = convergence_tol
        self.diagonal_mode = diagonal_mode
        self.bias_order = bias_order

    def _validate(self):
        _check_atlas(self.atlas, self.sharing)
        if self.shape_prior is not None and not isinstance(self.shape_prior, ShapePriorModel):
            raise TypeError("shape_prior must be a ShapePriorModel or None")
        check_scalar(self.nu, "nu", min_val=0)
        check_scalar(self.kappa, "kappa", min_val=1, include_min=False)
        check_open_unit(self.gamma, "gamma")
        check_scalar(self.samples, "samples", kind=int, min_val=1)
        check_scalar(self.burn_in, "burn_in", kind=int, min_val=0)
        check_affine(self.subject_to_prior_affine)

    def fit(self, X, y=None):
        X = check_image(X)
        self._validate()
        prior = LesionIntensityPrior(self.nu, self.kappa)
        self.fit_result_ = fit_lesion_augmented(X, self.atlas, self.sharing, prior, _fit_config(self),
                                                for_sampling=True)
        cfg = SamplerConfig(self.samples, self.burn_in, self.gamma, self.seed,
                            check_affine(self.subject_to_prior_affine), self.any_channel)
        self.posterior_result_ = lesion_posterior(X, self.fit_result_, self.shape_prior, cfg)
        W, _, atlas_prior, _ = whole_brain_posterior(self.fit_result_, X)
        self.label_posterior_ = W
        self.lesion_mask_, self.labels_ = final_segmentation(
            self.posterior_result_.posterior, W, self.gamma, atlas_prior
        )
        self._fitted_image = X
        self.n_features_in_ = X.n_contrasts
        return self

    def _check_same_image(self, X):
        check_is_fitted(self, "fit_result_")
        X = check_image(X)
        ref = self._fitted_image
        if X is not ref and not (X.grid.same_as(ref.grid) and np.array_equal(X.data, ref.data)):
            raise NotFittedError("LesionSegmenter is transductive; call fit on this image first")

    def predict_proba(self, X) -> ProbabilityMap:
        """Per-voxel lesion posterior."""
        self._check_same_image(X)
        return self.posterior_result_.posterior

    def predict(self, X) -> LesionMask:
        self._check_same_image(X)
        return self.lesion_mask_

    def fit_predict(self, X, y=None) -> LesionMask:
        return self.fit(X).lesion_mask_


class LesionShapeVAE(BaseEstimator):
    """Variational autoencoder over binary lesion masks."""

    def __init__(self, latent_dim=32, channels=(8, 16, 32), epochs=100, batch_size=10, learning_rate=1e-4,
                 mc_samples=1, rotation_deg=10.0, seed=0):
        self.latent_dim = latent_dim
        self.channels = channels
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.mc_samples = mc_samples
        self.rotation_deg = rotation_deg
        self.seed = seed

    def fit(self, masks, y=None):
        masks = check_masks(masks)
        cfg = VaeTrainConfig(self.epochs, self.batch_size, self.learning_rate, self.mc_samples,
                             self.rotation_deg, self.seed, self.latent_dim, tuple(self.channels))
        self.model_, self.history_ = train(masks, cfg)
        self.grid_ = masks[0].grid
        return self

    def transform(self, masks) -> np.ndarray:
        """Encoder means, one row per mask."""
        check_is_fitted(self, "model_")
        masks = check_masks(masks, self.grid_)
        return np.stack([encode(self.model_, m)[0] for m in masks])

    def inverse_transform(self, H) -> list[ProbabilityMap]:
        check_is_fitted(self, "model_")
        H = np.atleast_2d(np.asarray(H, float))
        return [decode(self.model_, h) for h in H]

    def score(self, masks, y=None) -> float:
        """Mean ELBO (one reparameterized sample per mask, seeded)."""
        check_is_fitted(self, "model_")
        masks = check_masks(masks, self.grid_)
        rng = np.random.default_rng(self.seed)
        return float(np.mean([elbo(self.model_, m, rng, with_grad=False).value for m in masks]))

    def sample(self, n=1, seed=None) -> list[ProbabilityMap]:
        check_is_fitted(self, "model_")
        rng = np.random.default_rng(self.seed if seed is None else seed)
        return [sample_prior(self.model_, rng) for _ in range(n)]
