"""Alternating optimizer for the projected covariance regression criterion.

The criterion is

    l(beta, gamma) = (1/2) sum_i T_i { x_i' beta + gamma' C_i gamma * exp(-x_i' beta) }

minimized subject to gamma' H gamma = 1, where C_i is the per-subject
covariance estimate chosen by the estimator mode and H is their pooled
average. The beta step is damped Newton on a strictly convex subproblem; the
gamma step is the exact smallest generalized eigenvector of (A, H) with
A = sum_i T_i exp(-x_i' beta) C_i. Multi-start over the leading pooled
eigenvectors guards against local minima; higher-order components come from
data deflation onto the orthogonal complement of the components found so far.
"""

import warnings
from dataclasses import dataclass, field
from enum import Enum

import numpy as np
import scipy.linalg

from .core import (
    CovKind,
    CovarianceSet,
    ProjectionState,
    Study,
    SubjectData,
    fix_sign,
    pooled_covariance,
    projected_variances,
    sample_covariance_set,
    symmetrize,
    validate_study,
    weighted_matrix_sum,
)
from .errors import (
    DegenerateShrinkage,
    DimensionExhausted,
    IllPosedCAP,
    NewtonDivergence,
    RankDeficientDesign,
    SingularH,
    SingularProjection,
)
from .shrinkage import (
    ShrinkageParams,
    _shrinkage_scalars,
    cs_projected_variance,
    cs_shrink,
    estimate_shrinkage_params,
    lw_shrink_set,
)

_EXP_BOUND = 700.0  # |eta| beyond this is computed in log-space / clipped


class Estimator(Enum):
    CAP = "cap"
    LW_CAP = "lw-cap"
    CS_CAP = "cs-cap"


@dataclass
class FitConfig:
    max_outer_iters: int = 100
    objective_rel_tol: float = 1e-6
    newton_tol: float = 1e-8
    newton_max_iters: int = 50
    n_inits: int | None = None  # None resolves to min(p, 20)
    estimator: Estimator = Estimator.CS_CAP
    seed: int = 0
    deflation: str = "euclidean"  # or "pooled" for H-weighted orthogonality
    clip_shrinkage: bool = True


@dataclass
class ComponentFit:
    state: ProjectionState
    objective_trace: list
    converged: bool
    init_index: int
    final_shrinkage: ShrinkageParams | None = None

    @property
    def objective(self) -> float:
        return self.objective_trace[-1]


@dataclass
class ComponentSet:
    gammas: np.ndarray  # (p, k)
    betas: np.ndarray  # (k, q)
    dfd_sequence: list
    fits: list = field(default_factory=list)


def _safe_exp_neg(eta):
    return np.exp(-np.clip(eta, -_EXP_BOUND, _EXP_BOUND))


def _objective_scalars(c, x, t, beta):
    """Criterion value from projected variances; exp taken in log-space."""
    eta = x @ beta
    with np.errstate(divide="ignore", invalid="ignore"):
        proj = np.where(c > 0, np.exp(np.log(np.where(c > 0, c, 1.0)) - eta), 0.0)
    return 0.5 * float(np.sum(t * (eta + proj)))


def objective(state: ProjectionState, covs: CovarianceSet, study: Study) -> float:
    """Evaluate the pseudo-likelihood criterion at (gamma, beta)."""
    c = projected_variances(np.asarray(state.gamma, dtype=np.float64), covs)
    x = study.design_matrix()
    t = covs.weights.astype(np.float64)
    return _objective_scalars(c, x, t, np.asarray(state.beta, dtype=np.float64))


def _newton_beta(c, x, t, cfg: FitConfig, beta0=None):
    """Damped Newton for the strictly convex beta subproblem.

    c_i >= 0 are projected variances, x the design, t the weights. Returns
    the minimizer with gradient norm <= cfg.newton_tol.
    """
    n, q = x.shape
    if np.linalg.matrix_rank(x) < q:
        raise RankDeficientDesign(f"design matrix has rank < q = {q}")
    if beta0 is None:
        # weighted least squares on log variances: near-optimal warm start
        logs = np.log(np.clip(c, 1e-300, None))
        sw = np.sqrt(t)
        beta = np.linalg.lstsq(sw[:, None] * x, sw * logs, rcond=None)[0]
    else:
        beta = np.asarray(beta0, dtype=np.float64).copy()
    f = _objective_scalars(c, x, t, beta)
    for _ in range(cfg.newton_max_iters):
        eta = x @ beta
        w = c * _safe_exp_neg(eta)
        grad = 0.5 * (x.T @ (t * (1.0 - w)))
        if np.linalg.norm(grad) <= cfg.newton_tol:
            return beta
        hess = 0.5 * (x.T @ ((t * w)[:, None] * x))
        try:
            step = np.linalg.solve(hess, -grad)
        except np.linalg.LinAlgError:
            raise NewtonDivergence("singular Hessian in beta step") from None
        slope = float(grad @ step)  # negative for a descent direction
        alpha = 1.0
        while alpha >= 2.0**-60:
            cand = beta + alpha * step
            fc = _objective_scalars(c, x, t, cand)
            if fc <= f + 1e-4 * alpha * slope + 1e-12 * (1.0 + abs(f)):
                beta, f = cand, fc
                break
            alpha /= 2.0
        else:
            raise NewtonDivergence("step halving exhausted in beta step")
    eta = x @ beta
    grad = 0.5 * (x.T @ (t * (1.0 - c * _safe_exp_neg(eta))))
    if np.linalg.norm(grad) <= cfg.newton_tol:
        return beta
    raise NewtonDivergence(
        f"beta step did not reach tolerance; |grad| = {np.linalg.norm(grad):.3e}"
    )


def update_beta(
    gamma: np.ndarray, covs: CovarianceSet, study: Study, cfg: FitConfig
) -> np.ndarray:
    """Minimize the criterion over beta for fixed gamma."""
    c = projected_variances(np.asarray(gamma, dtype=np.float64), covs)
    return _newton_beta(
        c, study.design_matrix(), covs.weights.astype(np.float64), cfg
    )


def update_gamma(beta: np.ndarray, covs: CovarianceSet, study: Study) -> np.ndarray:
    """Minimize the criterion over gamma for fixed beta.

    Only gamma' A gamma depends on gamma, so the constrained minimizer is the
    generalized eigenvector of (A, H) with smallest eigenvalue, scaled so that
    gamma' H gamma = 1 and sign-fixed.
    """
    x = study.design_matrix()
    t = covs.weights.astype(np.float64)
    wts = t * _safe_exp_neg(x @ np.asarray(beta, dtype=np.float64))
    a = symmetrize(weighted_matrix_sum(wts, covs.matrices))
    h = pooled_covariance(covs)
    ev = np.linalg.eigvalsh(h)
    if ev[-1] <= 0 or ev[0] <= 1e-12 * ev[-1]:
        raise SingularH(
            f"pooled matrix is numerically singular (lmin/lmax = {ev[0]:.3e}/{ev[-1]:.3e})"
        )
    try:
        _, vecs = scipy.linalg.eigh(a, h, check_finite=False)
    except (scipy.linalg.LinAlgError, np.linalg.LinAlgError) as exc:
        raise SingularH(str(exc)) from None
    return fix_sign(vecs[:, 0])  # eigh normalizes so that gamma' H gamma = 1


def _hat_covariances(gamma, beta, covs_sample, lw_set, study, cfg):
    """Covariance set the estimator mode plugs into the criterion."""
    if cfg.estimator is Estimator.CAP:
        return covs_sample, None
    if cfg.estimator is Estimator.LW_CAP:
        return lw_set, None
    try:
        params = estimate_shrinkage_params(
            ProjectionState(gamma=gamma, beta=beta),
            covs_sample,
            study,
            clip=cfg.clip_shrinkage,
        )
    except DegenerateShrinkage:
        warnings.warn("degenerate shrinkage: falling back to weight 0", stacklevel=2)
        mats = covs_sample.matrices.copy()
        return (
            CovarianceSet(mats, covs_sample.weights, CovKind.COVARIATE_SHRUNK),
            None,
        )
    return cs_shrink(covs_sample, params), params


def _run_single(study, covs_sample, lw_set, gamma0, cfg, init_index, on_iteration):
    gamma = gamma0
    beta = update_beta(gamma0, lw_set, study, cfg)
    hat, params = _hat_covariances(gamma, beta, covs_sample, lw_set, study, cfg)
    trace = [objective(ProjectionState(gamma, beta), hat, study)]
    converged = False
    for s in range(cfg.max_outer_iters):
        if s > 0 and cfg.estimator is Estimator.CS_CAP:
            hat, params = _hat_covariances(
                gamma, beta, covs_sample, lw_set, study, cfg
            )
        beta_new = update_beta(gamma, hat, study, cfg)
        gamma_new = update_gamma(beta_new, hat, study)
        obj = objective(ProjectionState(gamma_new, beta_new), hat, study)
        if on_iteration is not None:
            on_iteration(s, ProjectionState(gamma_new, beta_new), hat, params, obj)
        slack = 1e-8 * max(1.0, abs(trace[-1]))
        if obj > trace[-1] + slack:
            # the shrinkage refresh raised the criterion: the fixed-point
            # iteration is cycling, keep the previous iterate
            converged = True
            break
        gamma, beta = gamma_new, beta_new
        trace.append(obj)
        if abs(trace[-1] - trace[-2]) <= cfg.objective_rel_tol * max(
            1.0, abs(trace[-2])
        ):
            converged = True
            break
    return ComponentFit(
        state=ProjectionState(gamma=gamma, beta=beta),
        objective_trace=trace,
        converged=converged,
        init_index=init_index,
        final_shrinkage=params if cfg.estimator is Estimator.CS_CAP else None,
    )


def fit_component(study: Study, cfg: FitConfig, on_iteration=None) -> ComponentFit:
    """Fit one (gamma, beta) component by multi-start alternating descent.

    Initial gammas are the leading eigenvectors of the pooled sample
    covariance; the initial beta always comes from the per-subject shrunk
    set so the start is well-posed even when T_i < p. The run with the
    lowest final criterion wins; ties within 1e-10 go to the lowest
    initialization index.
    """
    validate_study(study)
    covs_sample = sample_covariance_set(study)
    t_min = int(study.obs_counts.min())
    if cfg.estimator is Estimator.CAP and t_min <= study.p:
        raise IllPosedCAP(
            f"sample-covariance mode needs T_min > p, got T_min={t_min}, p={study.p}"
        )
    lw_set = lw_shrink_set(study)
    sbar = pooled_covariance(covs_sample)
    _, vecs = np.linalg.eigh(sbar)
    p = study.p
    n_inits = min(p, 20) if cfg.n_inits is None else max(1, min(cfg.n_inits, p))
    best = None
    for j in range(n_inits):
        gamma0 = fix_sign(vecs[:, p - 1 - j])
        run = _run_single(
            study, covs_sample, lw_set, gamma0, cfg, j, on_iteration
        )
        if best is None or run.objective < best.objective - 1e-10:
            best = run
    return best


def _complement_basis(gammas: np.ndarray, h: np.ndarray | None) -> np.ndarray:
    """Orthonormal basis of the complement of span(gammas).

    With h None the complement is Euclidean; otherwise the basis columns are
    additionally H-orthogonal to the given components.
    """
    target = gammas if h is None else h @ gammas
    u, _, _ = np.linalg.svd(target, full_matrices=True)
    return u[:, gammas.shape[1] :]


def fit_components(study: Study, k: int, cfg: FitConfig) -> ComponentSet:
    """Extract k components, deflating the data after each one.

    After each fit the observations are projected onto the orthogonal
    complement of the components found so far, the next component is fitted
    in the reduced space and embedded back, so successive gammas are exactly
    orthogonal. ``dfd_sequence[j-1]`` is the diagonality deviation of the
    first j components under the estimator's covariance set.
    """
    validate_study(study)
    if k < 1 or k > study.p:
        raise DimensionExhausted(f"k must be in [1, p={study.p}], got {k}")
    covs_sample = sample_covariance_set(study)
    h_ref = pooled_covariance(covs_sample) if cfg.deflation == "pooled" else None
    fits = []
    gammas = []
    current = study
    basis = None  # maps reduced coordinates back to the original space
    for j in range(k):
        fit = fit_component(current, cfg, on_iteration=None)
        gamma_full = fit.state.gamma if basis is None else basis @ fit.state.gamma
        gamma_full = fix_sign(gamma_full)
        gammas.append(gamma_full)
        fits.append(fit)
        if j + 1 < k:
            g = np.column_stack(gammas)
            basis = _complement_basis(g, h_ref)
            reduced = [
                SubjectData(
                    id=s.id,
                    observations=s.observations @ basis,
                    covariates=s.covariates,
                )
                for s in study.subjects
            ]
            current = Study(subjects=reduced, centered=study.centered)
    dfd_covs = _dfd_covariances(covs_sample, study, fits[0], cfg)
    gam = np.column_stack(gammas)
    dfd_seq = [dfd(gam[:, : j + 1], dfd_covs) for j in range(k)]
    return ComponentSet(
        gammas=gam,
        betas=np.vstack([f.state.beta for f in fits]),
        dfd_sequence=dfd_seq,
        fits=fits,
    )


def _dfd_covariances(covs_sample, study, first_fit, cfg):
    if cfg.estimator is Estimator.LW_CAP:
        return lw_shrink_set(study)
    if cfg.estimator is Estimator.CS_CAP and first_fit.final_shrinkage is not None:
        return cs_shrink(covs_sample, first_fit.final_shrinkage)
    return covs_sample


def dfd(components, covs: CovarianceSet) -> float:
    """Average deviation from diagonality of Gamma' M_i Gamma.

    Accepts a ComponentSet or a p x k array. Computed through
    log-determinants; the result is >= 1 with equality iff every projected
    matrix is diagonal.
    """
    gam = components.gammas if isinstance(components, ComponentSet) else components
    gam = np.asarray(gam, dtype=np.float64)
    if gam.ndim == 1:
        gam = gam[:, None]
    w = covs.weights.astype(np.float64)
    w = w / w.sum()
    log_ratio = 0.0
    for i in range(covs.n):
        m = symmetrize(gam.T @ covs.matrices[i] @ gam)
        diag = np.diag(m)
        sign, logdet = np.linalg.slogdet(m)
        if sign <= 0 or not np.isfinite(logdet) or np.any(diag <= 0):
            raise SingularProjection(f"projected matrix {i} is numerically singular")
        log_ratio += w[i] * (np.sum(np.log(diag)) - logdet)
    return float(np.exp(log_ratio))


def unit_normalized(state: ProjectionState) -> ProjectionState:
    """Rescale gamma to unit norm, moving the scale into the intercept.

    log(gamma' S gamma) changes by -2 log ||gamma|| under the rescaling, so
    the intercept absorbs exactly that shift and the fitted model is
    unchanged.
    """
    norm = float(np.linalg.norm(state.gamma))
    if norm == 0.0:
        raise ValueError("gamma must be nonzero")
    beta = np.asarray(state.beta, dtype=np.float64).copy()
    beta[0] -= 2.0 * np.log(norm)
    return ProjectionState(gamma=fix_sign(state.gamma / norm), beta=beta)


def fit_beta_given_gamma(
    gamma, study: Study, cfg: FitConfig, covs_sample=None, beta0=None
):
    """Estimate beta with gamma held fixed, per the configured estimator.

    For the shared-shrinkage mode this alternates parameter re-estimation at
    the current beta with Newton refits until beta stabilizes; the other
    modes need a single Newton solve. ``beta0`` seeds the iteration (the
    per-subject shrunk set is used when absent). Returns (beta, params)
    where params is None unless the shared shrinkage was used.
    """
    gamma = np.asarray(gamma, dtype=np.float64)
    if covs_sample is None:
        covs_sample = sample_covariance_set(study)
    x = study.design_matrix()
    t = covs_sample.weights.astype(np.float64)
    g = float(gamma @ gamma)
    c = projected_variances(gamma, covs_sample)
    if cfg.estimator is Estimator.CAP:
        return _newton_beta(c, x, t, cfg, beta0=beta0), None
    if cfg.estimator is Estimator.LW_CAP:
        c_lw = projected_variances(gamma, lw_shrink_set(study))
        return _newton_beta(c_lw, x, t, cfg, beta0=beta0), None
    if beta0 is None:
        c_lw = projected_variances(gamma, lw_shrink_set(study))
        beta0 = _newton_beta(c_lw, x, t, cfg)
    return _fit_beta_cs_scalars(c, x, t, g, cfg, beta0)


def _fit_beta_cs_scalars(c, x, t, g, cfg, beta0):
    """Alternate shared-shrinkage re-estimation and Newton refits of beta.

    Works purely on projected-variance scalars; shared by the fixed-gamma
    simulation path and the bootstrap. Returns (beta, params), params None
    when the shrinkage degenerated to weight 0.
    """
    beta = np.asarray(beta0, dtype=np.float64).copy()
    params = None
    for _ in range(cfg.max_outer_iters):
        try:
            mu, delta2, psi2, phi2, per_subject = _shrinkage_scalars(
                c, np.exp(x @ beta), t, g, clip=cfg.clip_shrinkage
            )
            params = ShrinkageParams(mu, delta2, psi2, phi2, per_subject)
        except DegenerateShrinkage:
            params = None
            beta = _newton_beta(c, x, t, cfg, beta0=beta)
            break
        c_star = cs_projected_variance(c, params, g)
        beta_new = _newton_beta(c_star, x, t, cfg, beta0=beta)
        if np.max(np.abs(beta_new - beta)) <= cfg.newton_tol * (
            1.0 + np.max(np.abs(beta))
        ):
            beta = beta_new
            break
        beta = beta_new
    return beta, params
