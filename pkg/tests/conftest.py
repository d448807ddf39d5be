import numpy as np
import pytest

from covcap import Study, SubjectData


def make_subject(rng, sid, t, p, x_extra=None):
    x = [1.0] + ([] if x_extra is None else list(np.atleast_1d(x_extra)))
    return SubjectData(
        id=str(sid),
        observations=rng.standard_normal((t, p)),
        covariates=np.array(x, dtype=np.float64),
    )


def make_study(rng, n=6, t=12, p=4, binary_x=True):
    """Random study with a single binary (or uniform) predictor."""
    subjects = []
    for i in range(n):
        x = float(i % 2) if binary_x else float(rng.random())
        subjects.append(make_subject(rng, f"s{i:03d}", t, p, x_extra=[x]))
    return Study(subjects=subjects, centered=False)


def diag_scalar_study(cs, ks, ts, beta_scale=np.log(2.0)):
    """Study whose sample covariances are diag(c_i, 0) with covariates (1, k_i).

    With gamma = (1, 0) the projected variances are exactly the c_i, and
    beta = (0, beta_scale) gives exp(x_i' beta) = exp(beta_scale * k_i).
    """
    subjects = []
    for i, (c, k, t) in enumerate(zip(cs, ks, ts)):
        obs = np.zeros((t, 2))
        obs[0, 0] = np.sqrt(t * c)
        subjects.append(
            SubjectData(
                id=f"d{i}", observations=obs, covariates=np.array([1.0, float(k)])
            )
        )
    return Study(subjects=subjects, centered=False)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)
