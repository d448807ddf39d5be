"""Subject-resampling bootstrap for the model coefficients.

Whole subjects are resampled with replacement because the model treats them
as i.i.d. draws; resampling within a subject would break its covariance
structure. By default the projection stays fixed at the fitted value and
only beta is re-estimated per replicate (shared-shrinkage parameters are
re-estimated at the fixed projection), which keeps each replicate a cheap
scalar problem. A full-refit mode re-runs the whole component fit instead.
"""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .core import Study, projected_variances, sample_covariance_set
from .errors import BootstrapFailure, NumericError
from .shrinkage import lw_shrink_set
from .solver import (
    ComponentFit,
    Estimator,
    FitConfig,
    _fit_beta_cs_scalars,
    _newton_beta,
    fit_component,
)


@dataclass
class BootstrapResult:
    """Percentile bootstrap draws and interval bounds for beta."""

    replicates: np.ndarray  # (B - n_failed, q)
    ci_lower: np.ndarray  # (q,)
    ci_upper: np.ndarray  # (q,)
    level: float
    B: int
    n_failed: int = 0


def _replicate_rng(seed: int, b: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(b,)))


def bootstrap_beta(
    study: Study,
    fit: ComponentFit,
    B: int,
    level: float,
    cfg: FitConfig,
    refit_gamma: bool = False,
    threads: int = 1,
) -> BootstrapResult:
    """Percentile bootstrap CI for beta by resampling subjects.

    Parameters
    ----------
    study : Study
        The data the component was fitted on.
    fit : ComponentFit
        Point estimate; its gamma is held fixed unless ``refit_gamma``.
    B : int
        Number of bootstrap replicates (>= 2).
    level : float
        Interval coverage level in (0, 1); bounds are the (1-level)/2 and
        1-(1-level)/2 empirical quantiles (linear interpolation).
    refit_gamma : bool
        Re-run the full component fit per replicate instead of holding gamma
        fixed. Slower; exposed for sensitivity checks.
    threads : int
        Worker threads for replicates; results do not depend on scheduling
        because every replicate derives its own stream from (seed, b).

    Raises
    ------
    BootstrapFailure
        More than 10% of replicates raised a numerical error.
    """
    if B < 2:
        raise ValueError(f"B must be >= 2, got {B}")
    if not 0.0 < level < 1.0:
        raise ValueError(f"level must be in (0, 1), got {level}")
    n = study.n
    x = study.design_matrix()
    t = study.obs_counts.astype(np.float64)
    gamma = np.asarray(fit.state.gamma, dtype=np.float64)
    beta_hat = np.asarray(fit.state.beta, dtype=np.float64)

    if refit_gamma:

        def one(b):
            rng = _replicate_rng(cfg.seed, b)
            idx = rng.integers(0, n, size=n)
            boot = Study(
                subjects=[study.subjects[i] for i in idx], centered=study.centered
            )
            return fit_component(boot, cfg).state.beta

    else:
        # with gamma fixed, resampling subjects only re-indexes the
        # precomputed projected variances
        c_sample = projected_variances(gamma, sample_covariance_set(study))
        g = float(gamma @ gamma)
        if cfg.estimator is Estimator.LW_CAP:
            c_base = projected_variances(gamma, lw_shrink_set(study))
        else:
            c_base = c_sample

        def one(b):
            rng = _replicate_rng(cfg.seed, b)
            idx = rng.integers(0, n, size=n)
            if cfg.estimator is Estimator.CS_CAP:
                beta, _ = _fit_beta_cs_scalars(
                    c_sample[idx], x[idx], t[idx], g, cfg, beta_hat
                )
                return beta
            return _newton_beta(c_base[idx], x[idx], t[idx], cfg, beta0=beta_hat)

    if threads and threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(_guard(one), range(B)))
    else:
        results = [_guard(one)(b) for b in range(B)]
    draws = [r for r in results if r is not None]
    n_failed = B - len(draws)
    if n_failed > 0.1 * B:
        raise BootstrapFailure(f"{n_failed}/{B} bootstrap replicates failed")
    reps = np.vstack(draws)
    alpha = (1.0 - level) / 2.0
    lower = np.quantile(reps, alpha, axis=0)
    upper = np.quantile(reps, 1.0 - alpha, axis=0)
    return BootstrapResult(
        replicates=reps,
        ci_lower=lower,
        ci_upper=upper,
        level=level,
        B=B,
        n_failed=n_failed,
    )


def _guard(fn):
    def wrapped(b):
        try:
            return fn(b)
        except NumericError:
            return None

    return wrapped
