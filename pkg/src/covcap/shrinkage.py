"""Linear shrinkage estimators for sets of subject covariance matrices.

Two families live here. ``lw_shrink`` applies the classical single-matrix
optimal linear shrinkage toward a multiple of the identity, independently per
subject. ``estimate_shrinkage_params``/``cs_shrink`` implement the shared
covariate-dependent shrinkage: one (mu, weight) pair estimated jointly from
all n subjects under the log-linear projected-variance model, so every
subject's sample covariance is moved toward the same spherical target.
``oracle_combination`` solves the companion least-squares problem over
unconstrained (rho1, rho2) pairs; it is used as a test oracle.
"""

from dataclasses import dataclass

import numpy as np

from .core import (
    CovKind,
    CovarianceSet,
    ProjectionState,
    Study,
    SubjectData,
    projected_variances,
    sample_covariance,
    symmetrize,
)
from .errors import DegenerateShrinkage, SingularDesign


@dataclass
class ShrinkageParams:
    """Shared shrinkage coefficients and their per-subject components.

    ``per_subject`` has one row (delta2_i, psi2_i, phi2_i) per subject; the
    aggregates are their means. Under the default clipping, psi2_i is capped
    at delta2_i and phi2_i = delta2_i - psi2_i, so phi2 + psi2 == delta2
    exactly and the shrink weight psi2/delta2 lies in [0, 1].
    """

    mu: float
    delta2: float
    psi2: float
    phi2: float
    per_subject: np.ndarray  # (n, 3)

    @property
    def weight(self) -> float:
        """Convex weight on the spherical target mu*I."""
        return self.psi2 / self.delta2 if self.delta2 > 0 else 0.0


@dataclass
class OracleCombination:
    """Least-squares-optimal coefficients of rho1*I + rho2*S_i."""

    rho1: float
    rho2: float


def _shrinkage_scalars(c, e, t, g, clip=True):
    """Shrinkage parameters from projected variances c_i, model means e_i.

    c_i = gamma' S_i gamma, e_i = exp(x_i' beta), t_i = T_i, g = gamma' gamma.
    Returns (mu, delta2, psi2, phi2, per_subject).
    """
    c = np.asarray(c, dtype=np.float64)
    e = np.asarray(e, dtype=np.float64)
    t = np.asarray(t, dtype=np.float64)
    mu = e.mean() / g
    d2 = (c - mu * g) ** 2
    p2_raw = (c - e) ** 2 / t
    p2 = np.minimum(p2_raw, d2)
    if clip:
        f2 = d2 - p2
    else:
        f2 = d2 - p2_raw
    per_subject = np.column_stack([d2, p2 if clip else p2_raw, f2])
    delta2 = d2.mean()
    if delta2 <= 0.0:
        raise DegenerateShrinkage(
            "all projected variances equal their pooled mean; any shrink weight is optimal"
        )
    return float(mu), float(delta2), float(p2.mean()), float(f2.mean()), per_subject


def estimate_shrinkage_params(
    state: ProjectionState,
    covs: CovarianceSet,
    study: Study,
    clip: bool = True,
) -> ShrinkageParams:
    """Estimate the shared shrinkage coefficients at the current (gamma, beta).

    Parameters
    ----------
    state : ProjectionState
        Current projection and coefficients; gamma must be nonzero.
    covs : CovarianceSet
        Per-subject sample covariances (kind SAMPLE).
    study : Study
        Supplies the covariates and observation counts.
    clip : bool
        Default True subtracts the clipped psi2_i from delta2_i when forming
        phi2_i, which keeps phi2 + psi2 == delta2 exact. False keeps the raw
        phi2_i = delta2_i - psi2_i (possibly negative per subject); intended
        for sensitivity checks only.

    Raises
    ------
    DegenerateShrinkage
        If delta2 == 0; callers fall back to weight 0 (no shrinkage).
    """
    if covs.kind is not CovKind.SAMPLE:
        raise ValueError(f"expected sample covariances, got kind={covs.kind}")
    gamma = np.asarray(state.gamma, dtype=np.float64)
    g = float(gamma @ gamma)
    if g == 0.0:
        raise ValueError("gamma must be nonzero")
    c = projected_variances(gamma, covs)
    eta = study.design_matrix() @ np.asarray(state.beta, dtype=np.float64)
    e = np.exp(eta)
    mu, delta2, psi2, phi2, per_subject = _shrinkage_scalars(
        c, e, study.obs_counts, g, clip=clip
    )
    return ShrinkageParams(
        mu=mu, delta2=delta2, psi2=psi2, phi2=phi2, per_subject=per_subject
    )


def cs_shrink(covs: CovarianceSet, params: ShrinkageParams) -> CovarianceSet:
    """Apply the shared shrinkage S_i* = w*mu*I + (1-w)*S_i, w = psi2/delta2.

    The same weight is used for every subject. Whenever psi2 > 0 the output
    matrices are strictly positive definite with smallest eigenvalue at least
    w*mu. A degenerate parameter set (delta2 == 0) passes the inputs through
    unchanged.
    """
    w = params.weight
    if w == 0.0:
        mats = covs.matrices.copy()
    else:
        mats = covs.matrices * (1.0 - w)
        idx = np.arange(covs.p)
        mats[:, idx, idx] += w * params.mu
    return CovarianceSet(
        matrices=mats, weights=covs.weights, kind=CovKind.COVARIATE_SHRUNK
    )


def cs_projected_variance(c, params: ShrinkageParams, g: float):
    """Projected variance gamma' S_i* gamma from the sample values c_i."""
    w = params.weight
    return w * params.mu * g + (1.0 - w) * np.asarray(c, dtype=np.float64)


def lw_shrink(subject: SubjectData) -> np.ndarray:
    """Single-subject optimal linear shrinkage toward a spherical target.

    Uses the normalized Frobenius inner product <A, B> = trace(A B') / p.
    With S the sample covariance, m = trace(S)/p, d2 = ||S - m I||^2 and
    b2 = min(d2, (1/T^2) sum_t ||y_t y_t' - S||^2), the estimate is

        (b2/d2) * m * I + (1 - b2/d2) * S.

    A spherical S (d2 == 0) is returned unchanged.
    """
    y = np.asarray(subject.observations, dtype=np.float64)
    t, p = y.shape
    s = sample_covariance(subject)
    m = np.trace(s) / p
    d2 = np.sum((s - m * np.eye(p)) ** 2) / p
    if d2 <= 0.0:
        return s.copy()
    # sum_t ||y_t y_t' - S||_F^2 = sum_t ||y_t||^4 - T * trace(S^2)
    sq_norms = np.einsum("ij,ij->i", y, y)
    b2_bar = (np.sum(sq_norms**2) - t * np.sum(s * s)) / (p * t * t)
    b2 = min(b2_bar, d2)
    a2 = d2 - b2
    return symmetrize((b2 / d2) * m * np.eye(p) + (a2 / d2) * s)


def lw_shrink_set(study: Study) -> CovarianceSet:
    """Apply :func:`lw_shrink` to every subject of a study."""
    mats = np.stack([lw_shrink(s) for s in study.subjects])
    return CovarianceSet(
        matrices=mats, weights=study.obs_counts, kind=CovKind.LEDOIT_WOLF
    )


def oracle_combination(
    state: ProjectionState, covs: CovarianceSet, study: Study
) -> OracleCombination:
    """Least-squares optimal (rho1, rho2) for rho1*I + rho2*S_i.

    Minimizes the average squared distance between the projected combination
    and exp(x_i' beta) across subjects. Used in tests as the dominance
    benchmark for the shared shrinkage weights.

    Raises
    ------
    SingularDesign
        The across-subject variance of gamma' S_i gamma is below 1e-14, so
        the normal equations are singular.
    """
    gamma = np.asarray(state.gamma, dtype=np.float64)
    g = float(gamma @ gamma)
    c = projected_variances(gamma, covs)
    e = np.exp(study.design_matrix() @ np.asarray(state.beta, dtype=np.float64))
    var_c = np.mean(c**2) - np.mean(c) ** 2
    if var_c < 1e-14:
        raise SingularDesign(
            f"projected-variance spread {var_c:.3e} too small for the normal equations"
        )
    rho2 = (np.mean(c * e) - np.mean(c) * np.mean(e)) / var_c
    rho1 = (np.mean(e) - rho2 * np.mean(c)) / g
    return OracleCombination(rho1=float(rho1), rho2=float(rho2))


def combination_loss(
    rho1: float,
    rho2: float,
    state: ProjectionState,
    covs: CovarianceSet,
    study: Study,
) -> float:
    """Average squared loss of the combination rho1*I + rho2*S_i."""
    gamma = np.asarray(state.gamma, dtype=np.float64)
    g = float(gamma @ gamma)
    c = projected_variances(gamma, covs)
    e = np.exp(study.design_matrix() @ np.asarray(state.beta, dtype=np.float64))
    return float(np.mean((rho1 * g + rho2 * c - e) ** 2))
