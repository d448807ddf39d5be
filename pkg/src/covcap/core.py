"""Domain types, dataset validation, and covariance primitives.

A study is a collection of subjects, each contributing a (T_i x p)
observation matrix and a covariate vector of length q whose first entry is
the intercept slot (always 1). All estimators downstream consume the
per-subject sample covariances S_i = Y_i' Y_i / T_i and their pooled,
observation-weighted average.
"""

from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .errors import DimensionMismatch, MissingIntercept, NonFiniteData


class CovKind(Enum):
    """Provenance of a set of per-subject covariance estimates."""

    SAMPLE = "sample"
    LEDOIT_WOLF = "ledoit-wolf"
    COVARIATE_SHRUNK = "covariate-shrunk"
    ORACLE = "oracle"


@dataclass
class SubjectData:
    """One subject's observation matrix (T_i x p) and covariates (length q)."""

    id: str
    observations: np.ndarray
    covariates: np.ndarray

    @property
    def num_obs(self) -> int:
        return int(self.observations.shape[0])

    @property
    def dim(self) -> int:
        return int(self.observations.shape[1])


@dataclass
class Study:
    """An ordered collection of subjects sharing p and q.

    ``centered`` records whether per-subject column means have already been
    subtracted from the observations.
    """

    subjects: list
    centered: bool = False

    @property
    def n(self) -> int:
        return len(self.subjects)

    @property
    def p(self) -> int:
        return self.subjects[0].dim

    @property
    def q(self) -> int:
        return int(self.subjects[0].covariates.shape[0])

    @property
    def obs_counts(self) -> np.ndarray:
        return np.array([s.num_obs for s in self.subjects], dtype=np.int64)

    @property
    def total_obs(self) -> int:
        return int(self.obs_counts.sum())

    def design_matrix(self) -> np.ndarray:
        """Stack covariate vectors into the n x q design matrix."""
        return np.vstack([s.covariates for s in self.subjects])


@dataclass
class CovarianceSet:
    """Per-subject symmetric p x p estimates with observation weights T_i."""

    matrices: np.ndarray  # (n, p, p)
    weights: np.ndarray  # (n,)
    kind: CovKind

    @property
    def n(self) -> int:
        return int(self.matrices.shape[0])

    @property
    def p(self) -> int:
        return int(self.matrices.shape[1])


@dataclass
class ProjectionState:
    """A projection direction gamma (length p) and model coefficients beta (length q)."""

    gamma: np.ndarray
    beta: np.ndarray


def symmetrize(m: np.ndarray) -> np.ndarray:
    """Average a matrix with its transpose to suppress floating-point drift."""
    return (m + m.T) / 2.0


def fix_sign(v: np.ndarray) -> np.ndarray:
    """Flip a vector so its largest-magnitude entry is positive."""
    idx = int(np.argmax(np.abs(v)))
    return -v if v[idx] < 0 else v


def validate_study(study: Study) -> Study:
    """Check all type invariants and return the study unchanged.

    Raises
    ------
    DimensionMismatch
        Subjects differ in p or q, or a subject is too small (T_i < 2,
        p < 2, q < 1), or the study has fewer than two subjects.
    NonFiniteData
        Any observation or covariate entry is NaN or infinite.
    MissingIntercept
        The first covariate entry of a subject is not exactly 1.
    """
    if study.n < 2:
        raise DimensionMismatch(f"study needs at least 2 subjects, got {study.n}")
    first = study.subjects[0]
    p, q = first.dim, first.covariates.shape[0]
    for s in study.subjects:
        if s.observations.ndim != 2:
            raise DimensionMismatch(f"subject {s.id}: observations must be a matrix")
        if s.num_obs < 2:
            raise DimensionMismatch(f"subject {s.id}: needs T >= 2, got {s.num_obs}")
        if s.dim != p:
            raise DimensionMismatch(f"subject {s.id}: p={s.dim}, expected {p}")
        if s.dim < 2:
            raise DimensionMismatch(f"subject {s.id}: needs p >= 2, got {s.dim}")
        if s.covariates.ndim != 1 or s.covariates.shape[0] != q:
            raise DimensionMismatch(
                f"subject {s.id}: q={s.covariates.shape[0]}, expected {q}"
            )
        if q < 1:
            raise DimensionMismatch(f"subject {s.id}: needs q >= 1")
        if not np.isfinite(s.observations).all():
            raise NonFiniteData(f"subject {s.id}: non-finite observation entries")
        if not np.isfinite(s.covariates).all():
            raise NonFiniteData(f"subject {s.id}: non-finite covariate entries")
        if s.covariates[0] != 1.0:
            raise MissingIntercept(
                f"subject {s.id}: covariates[0] must be 1, got {s.covariates[0]}"
            )
    return study


def center_study(study: Study) -> Study:
    """Subtract per-subject column means and flag the result as centered."""
    subjects = [
        SubjectData(
            id=s.id,
            observations=s.observations - s.observations.mean(axis=0, keepdims=True),
            covariates=s.covariates,
        )
        for s in study.subjects
    ]
    return Study(subjects=subjects, centered=True)


def sample_covariance(subject: SubjectData) -> np.ndarray:
    """Per-subject sample covariance S_i = Y_i' Y_i / T_i.

    The observations are used as-is; centering, when wanted, must happen
    upstream (see :func:`center_study`). The result is symmetric positive
    semidefinite with rank at most min(T_i, p).
    """
    y = np.asarray(subject.observations, dtype=np.float64)
    t = y.shape[0]
    return symmetrize(y.T @ y / t)


def sample_covariance_set(study: Study) -> CovarianceSet:
    """Stack the per-subject sample covariances of a study."""
    mats = np.stack([sample_covariance(s) for s in study.subjects])
    return CovarianceSet(matrices=mats, weights=study.obs_counts, kind=CovKind.SAMPLE)


def weighted_matrix_sum(weights: np.ndarray, matrices: np.ndarray) -> np.ndarray:
    """sum_i weights_i * matrices_i for a stacked (n, p, p) array."""
    n, p, _ = matrices.shape
    return (matrices.reshape(n, p * p).T @ weights).reshape(p, p)


def pooled_covariance(covs: CovarianceSet) -> np.ndarray:
    """Observation-weighted average sum_i T_i M_i / sum_i T_i."""
    w = covs.weights.astype(np.float64)
    return symmetrize(weighted_matrix_sum(w, covs.matrices) / w.sum())


def projected_variances(gamma: np.ndarray, covs: CovarianceSet) -> np.ndarray:
    """Quadratic forms gamma' M_i gamma for every matrix in the set."""
    return (covs.matrices @ gamma) @ gamma
