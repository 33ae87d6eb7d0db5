"""Model fitting by coordinate ascent.

Generalized EM sweeps update the Gaussian and bias-field parameters in
closed form; between sweeps the atlas mesh is deformed by L-BFGS.  The
lesion-augmented variant treats lesions as an extra class whose Gaussian is
tied to white matter through a normal-inverse-Wishart prior.

Sums over components/labels are accumulated column by column in index order
so that appending an all-zero class leaves every other number bitwise
unchanged.
"""

from __future__ import annotations

import csv
import logging
import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from .atlas import (
    AtlasMesh,
    deformation_log_prior,
    interpolate_prior,
    lesion_augmented,
    prior_vertex_gradient,
    rasterize,
)
from .likelihood import (
    AppearanceParams,
    BiasBasis,
    ClassSharingMap,
    LesionIntensityPrior,
    component_log_densities,
    eval_bias_basis,
    niw_log_density,
)
from .optim import lbfgs_maximize
from .volume import MultiContrastImage, VolumeGrid

__all__ = [
    "FitConfig",
    "SoftAssignments",
    "FitResult",
    "e_step",
    "m_step_gaussians",
    "m_step_bias",
    "coupled_wm_lesion_update",
    "optimize_deformation",
    "initialize_params",
    "objective",
    "fit",
    "fit_lesion_augmented",
]

log = logging.getLogger(__name__)

_MIN_COUNT = 1e-6


@dataclass
class FitConfig:
    max_outer_iters: int = 30
    gem_iters_per_outer: int = 5
    deformation_steps: int = 20
    lbfgs_memory: int = 7
    max_step_mm: float = 1.0
    convergence_tol: float = 1e-5
    diagonal_mode: bool = False
    bias_order: tuple = (3, 3, 3)
    # GEM sweeps at the start of a fit that leave the bias field untouched, so a
    # blurry initial segmentation cannot be absorbed into the smooth bias basis
    bias_warmup_sweeps: int = 3
    # plain GEM sweeps (no lesion class, no deformation) used to initialize a lesion-augmented fit
    lesion_prefit_sweeps: int = 15

    def __post_init__(self):
        if self.max_outer_iters < 1 or self.gem_iters_per_outer < 1:
            raise ValueError("iteration caps must be >= 1")
        if self.bias_warmup_sweeps < 0 or self.lesion_prefit_sweeps < 0:
            raise ValueError("warm-up/prefit sweep counts must be >= 0")
        if self.deformation_steps < 0:
            raise ValueError("deformation_steps must be >= 0")
        if self.convergence_tol <= 0 or self.max_step_mm <= 0:
            raise ValueError("tolerances must be positive")


@dataclass
class SoftAssignments:
    """Posterior label (``W``) and component (``R``) responsibilities."""

    W: np.ndarray
    R: np.ndarray
    log_evidence: np.ndarray

    @property
    def data_term(self) -> float:
        return float(self.log_evidence.sum())


def _data(image) -> np.ndarray:
    if isinstance(image, MultiContrastImage):
        return image.data
    d = np.asarray(image, dtype=float)
    return d[:, None] if d.ndim == 1 else d


def _colsum(a: np.ndarray) -> np.ndarray:
    out = a[:, 0].copy()
    for j in range(1, a.shape[1]):
        out += a[:, j]
    return out


def _group_columns(a: np.ndarray, groups: np.ndarray, n_groups: int) -> np.ndarray:
    out = np.zeros((a.shape[0], n_groups))
    for j, g in enumerate(groups):
        out[:, g] += a[:, j]
    return out


def _class_prior(prior: np.ndarray, sharing: ClassSharingMap) -> np.ndarray:
    return _group_columns(prior, np.asarray(sharing.label_to_class), sharing.n_classes)


def _component_log_terms(data, params: AppearanceParams, basis: BiasBasis) -> np.ndarray:
    """log pi_c + log N(d_i | mu_c + C phi_i, Sigma_c)."""
    corrected = data - params.bias_field(basis)
    with np.errstate(divide="ignore"):
        return component_log_densities(corrected, params) + np.log(params.weights)


def e_step(image, prior: np.ndarray, params: AppearanceParams, basis: BiasBasis) -> SoftAssignments:
    """Exact posterior responsibilities, mixture components expanded as sub-classes."""
    data = _data(image)
    sh = params.sharing
    cls_prior = _class_prior(prior, sh)
    with np.errstate(divide="ignore"):
        lj = _component_log_terms(data, params, basis) + np.log(cls_prior[:, sh.component_class])
    top = lj.max(axis=1)
    bad = np.flatnonzero(~np.isfinite(top))
    if bad.size:
        raise ValueError(
            f"voxel {int(bad[0])} has zero probability under every class "
            f"(prior row {prior[bad[0]]})"
        )
    e = np.exp(lj - top[:, None])
    s = _colsum(e)
    R = e / s[:, None]
    log_ev = top + np.log(s)
    cls_post = _group_columns(R, sh.component_class, sh.n_classes)
    l2c = np.asarray(sh.label_to_class)
    with np.errstate(invalid="ignore", divide="ignore"):
        ratio = np.where(cls_prior[:, l2c] > 0, prior / cls_prior[:, l2c], 0.0)
    W = ratio * cls_post[:, l2c]
    return SoftAssignments(W, R, log_ev)


def _floor_eigenvalues(V: np.ndarray, floor: float, diagonal: bool) -> np.ndarray:
    if diagonal:
        return np.diag(np.maximum(np.diag(V), floor))
    w, U = np.linalg.eigh(V)
    if w.min() >= floor:
        return V
    return (U * np.maximum(w, floor)) @ U.T


def default_floor(data: np.ndarray) -> float:
    return 1e-6 * float(np.mean(np.var(data, axis=0)))


def weighted_moments(x: np.ndarray, w: np.ndarray):
    """Weighted count, mean and (biased) scatter of the rows of ``x``."""
    n = float(w.sum())
    if n <= 0:
        return 0.0, np.zeros(x.shape[1]), np.zeros((x.shape[1],) * 2)
    m = (w @ x) / n
    d = x - m
    V = (w[:, None] * d).T @ d / n
    return n, m, 0.5 * (V + V.T)


def m_step_gaussians(
    image,
    assignments: SoftAssignments | np.ndarray,
    params: AppearanceParams,
    basis: BiasBasis,
    floor: float | None = None,
    skip: tuple = (),
) -> AppearanceParams:
    """Weighted means/covariances of bias-corrected intensities and mixture weights.

    Covariance eigenvalues are floored at ``floor`` (default 1e-6 times the
    mean data variance), which is the exact maximizer under that constraint.
    Components with vanishing weight keep their previous parameters.
    """
    data = _data(image)
    R = assignments.R if isinstance(assignments, SoftAssignments) else np.asarray(assignments)
    floor = default_floor(data) if floor is None else floor
    corrected = data - params.bias_field(basis)
    means = params.means.copy()
    covs = params.covs.copy()
    counts = R.sum(axis=0)
    for c in range(R.shape[1]):
        if c in skip:
            continue
        if counts[c] < _MIN_COUNT:
            warnings.warn(f"component {c} has vanishing weight; keeping previous parameters")
            continue
        _, m, V = weighted_moments(corrected, R[:, c])
        if params.diagonal_mode:
            V = np.diag(np.diag(V))
        means[c] = m
        covs[c] = _floor_eigenvalues(V, floor, params.diagonal_mode)
    weights = params.weights.copy()
    sh = params.sharing
    for g in range(sh.n_classes):
        comps = sh.class_components(g)
        tot = counts[comps].sum()
        if len(comps) > 1 and tot >= _MIN_COUNT:
            weights[comps] = counts[comps] / tot
    return params.updated(means=means, covs=covs, weights=weights)


def m_step_bias(
    image, assignments: SoftAssignments | np.ndarray, params: AppearanceParams, basis: BiasBasis
) -> AppearanceParams:
    """Solve the block linear system for the bias-field coefficients.

    In diagonal mode the system decouples into one P x P solve per contrast.
    """
    data = _data(image)
    R = assignments.R if isinstance(assignments, SoftAssignments) else np.asarray(assignments)
    A = basis.values
    N = data.shape[1]
    P = A.shape[1]
    prec = np.linalg.inv(params.covs)
    mu = params.means

    def weights_for(m, n):
        # s_i^{mn} and sum_k s_ik^{mn} mu_k^n, accumulated component by component
        s = np.zeros(len(data))
        smu = np.zeros(len(data))
        for c in range(R.shape[1]):
            w = R[:, c] * prec[c, m, n]
            s += w
            smu += w * mu[c, n]
        return s, smu

    def solve(lhs, rhs):
        cond = np.linalg.cond(lhs)
        if not np.isfinite(cond) or cond > 1e14:
            raise np.linalg.LinAlgError(f"bias system is singular (condition number {cond:.3g})")
        return np.linalg.solve(lhs, rhs)

    coeffs = np.zeros((N, P))
    if params.diagonal_mode:
        for n in range(N):
            s, smu = weights_for(n, n)
            lhs = A.T @ (s[:, None] * A)
            rhs = A.T @ (s * data[:, n] - smu)
            coeffs[n] = solve(lhs, rhs)
    else:
        lhs = np.zeros((N * P, N * P))
        rhs = np.zeros(N * P)
        acc = np.zeros((N, len(data)))
        for m in range(N):
            for n in range(m, N):
                s, smu = weights_for(m, n)  # symmetric in (m, n)
                block = A.T @ (s[:, None] * A)
                lhs[m * P : (m + 1) * P, n * P : (n + 1) * P] = block
                lhs[n * P : (n + 1) * P, m * P : (m + 1) * P] = block.T
                acc[m] += s * data[:, n] - smu
                if n != m:
                    s_nm, smu_nm = weights_for(n, m)
                    acc[n] += s_nm * data[:, m] - smu_nm
        for m in range(N):
            rhs[m * P : (m + 1) * P] = A.T @ acc[m]
        coeffs = solve(lhs, rhs).reshape(N, P)
    return params.updated(bias_coeffs=coeffs)


# ------------------------------------------------------ lesion coupling


def _gauss_part(n, mean_obs, scatter_obs, mu, sigma):
    """Data log-likelihood (up to constants) from weighted sufficient statistics."""
    if n <= 0:
        return 0.0
    d = mean_obs - mu
    S = scatter_obs + np.outer(d, d)
    sign, ld = np.linalg.slogdet(sigma)
    return -0.5 * n * (ld + np.trace(np.linalg.solve(sigma, S)))


def coupled_wm_lesion_update(
    wm_stats, les_stats, sigma_wm, sigma_les, nu: float, kappa: float, diagonal: bool = False
):
    """Joint conditional maximization of the WM and lesion Gaussians under the NIW prior.

    ``wm_stats``/``les_stats`` are ``(N_k, m_k, V_k)`` weighted sufficient
    statistics of bias-corrected intensities.  Means are updated jointly
    given the current covariances, then the covariances jointly given the new
    means (lesion covariance profiled out, WM covariance by fixed-point
    iteration accepted only if it improves the objective).  Returns
    ``(mu_wm, sigma_wm, mu_les, sigma_les)``.
    """
    n_wm, m_wm, V_wm = wm_stats
    n_les, m_les, V_les = les_stats
    N = len(m_wm)
    eye = np.eye(N)
    if n_les < _MIN_COUNT:
        n_les, m_les, V_les = 0.0, m_wm, np.zeros((N, N))
    a = nu * n_les / (nu + n_les)
    B = a * sigma_wm @ np.linalg.inv(sigma_les)
    mu_wm = np.linalg.solve(n_wm * eye + B, n_wm * m_wm + B @ m_les)
    mu_les = (n_les * m_les + nu * mu_wm) / (n_les + nu)
    d = m_les - mu_wm
    psi = a * np.outer(d, d) + n_les * V_les
    e = m_wm - mu_wm
    S_wm = n_wm * (V_wm + np.outer(e, e))
    if diagonal:
        psi = np.diag(np.diag(psi))
        S_wm = np.diag(np.diag(S_wm))

    def profile_les(sw):
        return (psi + nu * kappa * sw) / (n_les + nu)

    def value(sw):
        sl = profile_les(sw)
        return (
            _gauss_part(n_wm, m_wm, V_wm, mu_wm, sw)
            + _gauss_part(n_les, m_les, V_les, mu_les, sl)
            + niw_log_density(mu_les, sl, mu_wm, sw, nu, kappa)
        )

    cand = sigma_wm
    denom = n_wm + n_les + N + 2
    for _ in range(200):
        sl = profile_les(cand)
        X = psi @ np.linalg.solve(sl, cand)
        new = (S_wm + 0.5 * (X + X.T)) / denom
        done = np.abs(new - cand).max() <= 1e-13 * np.abs(new).max()
        cand = new
        if done:
            break
    best = cand if value(cand) >= value(sigma_wm) else sigma_wm
    return mu_wm, best, mu_les, profile_les(best)


# --------------------------------------------------------------- deformation


def _label_log_likelihoods(data, params: AppearanceParams, basis: BiasBasis) -> np.ndarray:
    lt = _component_log_terms(data, params, basis)
    sh = params.sharing
    out = np.empty((len(data), sh.n_classes))
    for g in range(sh.n_classes):
        comps = sh.class_components(g)
        sub = lt[:, comps]
        top = sub.max(axis=1)
        out[:, g] = top + np.log(_colsum(np.exp(sub - top[:, None])))
    return out[:, np.asarray(sh.label_to_class)]


def optimize_deformation(
    mesh: AtlasMesh,
    image,
    params: AppearanceParams,
    basis: BiasBasis,
    grid: VolumeGrid,
    config: FitConfig | None = None,
):
    """Ascend sum_i ln sum_k lik_ik p_ik(mesh) + log p(mesh) over interior vertices.

    Returns ``(mesh, start_value, end_value)``; ``end_value >= start_value``.
    """
    config = config or FitConfig()
    data = _data(image)
    # Labels with no prior mass anywhere cannot contribute; dropping them keeps
    # the value bitwise equal to that of a model without those labels.
    active = mesh.alpha.any(axis=0)
    ll = _label_log_likelihoods(data, params, basis)[:, active]
    top = ll.max(axis=1)
    E = np.exp(ll - top[:, None])
    top_sum = float(top.sum())
    free = ~mesh.boundary_vertices()
    base = mesh.vertices.copy()

    def fun(x):
        v = base.copy()
        v[free] = x.reshape(-1, 3)
        m = mesh.with_vertices(v)
        lp, lp_grad = deformation_log_prior(m)
        if not np.isfinite(lp):
            return -np.inf, np.zeros_like(x)
        rast = rasterize(m, grid)
        prior = interpolate_prior(m, rast)[:, active]
        f = _colsum(E * prior)
        if (f <= 0).any():
            return -np.inf, np.zeros_like(x)
        val = top_sum + float(np.log(f).sum()) + lp
        weights = np.zeros((len(f), len(active)))
        weights[:, active] = E / f[:, None]
        grad = prior_vertex_gradient(m, rast, weights) + lp_grad
        return val, grad[free].ravel()

    x0 = base[free].ravel()
    if config.deformation_steps == 0 or not free.any():
        v0, _ = fun(x0)
        return mesh, v0, v0
    res = lbfgs_maximize(
        fun, x0, max_iter=config.deformation_steps, memory=config.lbfgs_memory, max_step=config.max_step_mm
    )
    v = base.copy()
    v[free] = res.x.reshape(-1, 3)
    return mesh.with_vertices(v), res.history[0], res.value


# ------------------------------------------------------------------- fitting


def initialize_params(
    image, prior: np.ndarray, sharing: ClassSharingMap, basis: BiasBasis, diagonal: bool = False
) -> AppearanceParams:
    """Atlas-prior-weighted moments per class; the bias constant column holds the global mean."""
    data = _data(image)
    N = data.shape[1]
    floor = default_floor(data)
    offset = data.mean(axis=0)
    cls_prior = _class_prior(prior, sharing)
    means, covs, weights = [], [], []
    for g in range(sharing.n_classes):
        n, m, V = weighted_moments(data, cls_prior[:, g])
        if n < _MIN_COUNT:
            m, V = offset, np.cov(data.T).reshape(N, N)
        if diagonal:
            V = np.diag(np.diag(V))
        V = _floor_eigenvalues(V, floor, diagonal)
        M = sharing.components_per_class[g]
        spread = np.linspace(-0.5, 0.5, M) if M > 1 else np.zeros(1)
        for j in range(M):
            means.append(m - offset + spread[j] * np.sqrt(np.diag(V)))
            covs.append(V)
        weights.extend(sharing.mixture_weights[g])
    bias = np.zeros((N, basis.n_functions))
    bias[:, 0] = offset
    return AppearanceParams(np.array(means), np.array(covs), bias, np.array(weights), sharing, diagonal)


def objective(image, mesh: AtlasMesh, params: AppearanceParams, basis: BiasBasis, grid: VolumeGrid,
              lesion_prior: LesionIntensityPrior | None = None) -> float:
    """log p(theta | D) up to a constant (plus the NIW term when ``lesion_prior`` is set).

    ``mesh`` must carry one alpha column per label of ``params.sharing``.
    """
    prior = interpolate_prior(mesh, rasterize(mesh, grid))
    val = e_step(image, prior, params, basis).data_term + deformation_log_prior(mesh, with_grad=False)
    if lesion_prior is not None:
        val += _niw_term(params, lesion_prior.nu_effective(grid), lesion_prior.kappa)
    return val


def _niw_term(params: AppearanceParams, nu: float, kappa: float) -> float:
    sh = params.sharing
    wm = sh.class_components(sh.wm_class)[0]
    les = sh.class_components(sh.lesion_class)[0]
    return niw_log_density(params.means[les], params.covs[les], params.means[wm], params.covs[wm], nu, kappa)


@dataclass
class FitResult:
    mesh: AtlasMesh
    params: AppearanceParams
    trace: list
    assignments: SoftAssignments
    basis: BiasBasis
    grid: VolumeGrid
    lesion_prior: LesionIntensityPrior | None = None
    fitted_mesh: AtlasMesh | None = field(default=None, repr=False)

    @property
    def objective(self) -> float:
        return self.trace[-1][2]

    @property
    def nu(self) -> float | None:
        return None if self.lesion_prior is None else self.lesion_prior.nu_effective(self.grid)

    def lesion_gaussian(self):
        sh = self.params.sharing
        if sh.lesion_class is None:
            raise ValueError("fit has no lesion class")
        c = sh.class_components(sh.lesion_class)[0]
        return self.params.means[c], self.params.covs[c]

    def write_trace(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iteration", "phase", "objective"])
            for it, phase, val in self.trace:
                w.writerow([it, phase, repr(float(val))])


def _run(image, mesh, sharing, config, grid, basis, lesion_prior=None, params=None) -> FitResult:
    data = _data(image)
    floor = default_floor(data)
    nu = kappa = None
    if lesion_prior is not None:
        nu = lesion_prior.nu_effective(grid)
        kappa = lesion_prior.kappa
    rast = rasterize(mesh, grid)
    prior = interpolate_prior(mesh, rast)
    if params is None:
        params = initialize_params(data, prior, sharing, basis, config.diagonal_mode)
        if lesion_prior is not None:
            params = _with_lesion_component(params, sharing, kappa)

    coupled = lesion_prior is not None and nu > 0
    if coupled:
        wm_c = sharing.class_components(sharing.wm_class)[0]
        les_c = sharing.class_components(sharing.lesion_class)[0]
    skip = (wm_c, les_c) if coupled else ()

    def total(assign, params, mesh_lp):
        val = assign.data_term + mesh_lp
        if lesion_prior is not None:
            val += _niw_term(params, nu, kappa)
        return val

    trace = []
    mesh_lp = deformation_log_prior(mesh, with_grad=False)
    previous = None
    sweep = 0
    for outer in range(config.max_outer_iters):
        for _ in range(config.gem_iters_per_outer):
            assign = e_step(data, prior, params, basis)
            trace.append((outer, "gem", total(assign, params, mesh_lp)))
            params = m_step_gaussians(data, assign, params, basis, floor, skip=skip)
            if coupled:
                corrected = data - params.bias_field(basis)
                wm_stats = weighted_moments(corrected, assign.R[:, wm_c])
                les_stats = weighted_moments(corrected, assign.R[:, les_c])
                mu_wm, s_wm, mu_les, s_les = coupled_wm_lesion_update(
                    wm_stats, les_stats, params.covs[wm_c], params.covs[les_c], nu, kappa, config.diagonal_mode
                )
                means, covs = params.means.copy(), params.covs.copy()
                means[wm_c], covs[wm_c], means[les_c], covs[les_c] = mu_wm, s_wm, mu_les, s_les
                params = params.updated(means=means, covs=covs)
            if sweep >= config.bias_warmup_sweeps:
                params = m_step_bias(data, assign, params, basis)
            sweep += 1
        if config.deformation_steps > 0:
            mesh, start, end = optimize_deformation(mesh, data, params, basis, grid, config)
            niw = _niw_term(params, nu, kappa) if lesion_prior is not None else 0.0
            trace.append((outer, "deform-start", start + niw))
            trace.append((outer, "deform", end + niw))
            rast = rasterize(mesh, grid)
            prior = interpolate_prior(mesh, rast)
            mesh_lp = deformation_log_prior(mesh, with_grad=False)
        current = trace[-1][2]
        if previous is not None and abs(current - previous) <= config.convergence_tol * abs(previous):
            break
        previous = current
    assign = e_step(data, prior, params, basis)
    trace.append((len(trace) and trace[-1][0], "final", total(assign, params, mesh_lp)))
    return FitResult(mesh, params, trace, assign, basis, grid, lesion_prior)


def _with_lesion_component(params: AppearanceParams, sharing: ClassSharingMap, kappa: float) -> AppearanceParams:
    """Place the lesion Gaussian at (mu_WM, kappa Sigma_WM), the mode of its prior.

    ``params`` may already carry a lesion component (it is overwritten) or
    lack it (it is appended, matching ``sharing``'s component order).
    """
    wm = sharing.class_components(sharing.wm_class)[0]
    les = sharing.class_components(sharing.lesion_class)[0]
    means, covs, weights = params.means, params.covs, params.weights
    if len(means) == sharing.n_components - 1:
        means = np.insert(means, les, means[wm], axis=0)
        covs = np.insert(covs, les, covs[wm], axis=0)
        weights = np.insert(weights, les, 1.0)
    means, covs = means.copy(), covs.copy()
    means[les] = means[wm]
    covs[les] = kappa * covs[wm]
    return AppearanceParams(means, covs, params.bias_coeffs, weights, sharing, params.diagonal_mode)


def _prepare(image, config):
    config = config or FitConfig()
    if not isinstance(image, MultiContrastImage):
        raise TypeError("image must be a MultiContrastImage")
    basis = eval_bias_basis(image.grid, config.bias_order)
    return config, basis


def fit(image: MultiContrastImage, mesh: AtlasMesh, sharing: ClassSharingMap,
        config: FitConfig | None = None, params: AppearanceParams | None = None) -> FitResult:
    """Fit atlas deformation, Gaussians and bias field by coordinate ascent."""
    config, basis = _prepare(image, config)
    if mesh.n_labels != sharing.n_labels:
        raise ValueError(f"atlas has {mesh.n_labels} labels, sharing map {sharing.n_labels}")
    res = _run(image, mesh, sharing, config, image.grid, basis, params=params)
    res.fitted_mesh = res.mesh
    return res


def fit_lesion_augmented(
    image: MultiContrastImage,
    mesh: AtlasMesh,
    sharing: ClassSharingMap,
    prior: LesionIntensityPrior | None = None,
    config: FitConfig | None = None,
    for_sampling: bool = False,
) -> FitResult:
    """Fit with lesions as class K+1 (shape prior clamped to 1).

    The atlas uses alpha*(1-beta) for the K structures and beta for lesion.
    ``result.mesh`` is the deformed original atlas; ``result.fitted_mesh``
    the augmented one actually optimized.
    """
    prior = prior or LesionIntensityPrior()
    config, basis = _prepare(image, config)
    if sharing.wm_class is None:
        raise ValueError("sharing map must identify the white-matter class")
    if sharing.lesion_class is not None:
        raise ValueError("pass the whole-brain sharing map; the lesion class is added here")
    if sharing.components_per_class[sharing.wm_class] != 1:
        raise ValueError("the white-matter class must have a single Gaussian component")
    if mesh.n_labels != sharing.n_labels:
        raise ValueError(f"atlas has {mesh.n_labels} labels, sharing map {sharing.n_labels}")
    N = image.n_contrasts
    nu = prior.nu_effective(image.grid)
    if 0 < nu <= N + 1:
        raise ValueError(f"nu={nu:g} gives an improper inverse-Wishart prior (need nu > N+1 = {N + 1})")
    if for_sampling and nu <= N + 1:
        raise ValueError(f"lesion sampling needs nu > N+1 = {N + 1}, got nu={nu:g}")
    aug_mesh = lesion_augmented(mesh)
    aug_sharing = sharing.with_lesion_class()
    init = None
    if config.lesion_prefit_sweeps > 0:
        # whole-brain GEM first: a broad lesion Gaussian next to a blurry initial
        # segmentation otherwise soaks up whole tissue classes
        pre_cfg = replace(config, deformation_steps=0, gem_iters_per_outer=1,
                          max_outer_iters=config.lesion_prefit_sweeps)
        pre = _run(image, mesh, sharing, pre_cfg, image.grid, basis)
        init = _with_lesion_component(pre.params, aug_sharing, prior.kappa)
    res = _run(image, aug_mesh, aug_sharing, config, image.grid, basis, lesion_prior=prior, params=init)
    res.fitted_mesh = res.mesh
    res.mesh = mesh.with_vertices(res.mesh.vertices)
    return res
