import numpy as np
import pytest

from covcap import (
    CovKind,
    CovarianceSet,
    ProjectionState,
    SubjectData,
    combination_loss,
    cs_shrink,
    estimate_shrinkage_params,
    generate_study,
    lw_shrink,
    lw_shrink_set,
    oracle_combination,
    sample_covariance_set,
)
from covcap.shrinkage import ShrinkageParams
from covcap.errors import DegenerateShrinkage, SingularDesign
from covcap.simgen import SimDesign

from conftest import diag_scalar_study

GAMMA2 = np.array([1.0, 0.0])


def _state(beta):
    return ProjectionState(gamma=GAMMA2, beta=np.asarray(beta, dtype=np.float64))


def test_mu_is_average_model_variance():
    # exp(x'beta) = (1, 3) and gamma'gamma = 1, so mu = 2
    study = diag_scalar_study(cs=[1.0, 1.0], ks=[0, 1], ts=[4, 4], beta_scale=np.log(3.0))
    covs = sample_covariance_set(study)
    params = estimate_shrinkage_params(_state([0.0, np.log(3.0)]), covs, study)
    assert abs(params.mu - 2.0) < 1e-12


def test_zero_deviation_subject_is_clipped():
    # e = (1, 3) -> mu * gamma'gamma = 2; subject 0 has c = 2 exactly
    study = diag_scalar_study(cs=[2.0, 5.0], ks=[0, 1], ts=[4, 4], beta_scale=np.log(3.0))
    covs = sample_covariance_set(study)
    params = estimate_shrinkage_params(_state([0.0, np.log(3.0)]), covs, study)
    d2, p2, f2 = params.per_subject[0]
    # c equals mu * gamma'gamma up to float round-trip, so everything clips to ~0
    assert abs(d2) < 1e-20
    assert p2 <= d2 and abs(f2) < 1e-20
    assert params.per_subject[1, 1] > 0  # the other subject is not clipped


def test_hand_computed_three_subject_instance():
    # c = (2, 5, 1), e = (1, 4, 2), T = (4, 4, 2); spreadsheet-style evaluation
    study = diag_scalar_study(cs=[2.0, 5.0, 1.0], ks=[0, 2, 1], ts=[4, 4, 2])
    covs = sample_covariance_set(study)
    params = estimate_shrinkage_params(_state([0.0, np.log(2.0)]), covs, study)
    mu = (1.0 + 4.0 + 2.0) / 3.0
    d2 = [(2.0 - mu) ** 2, (5.0 - mu) ** 2, (1.0 - mu) ** 2]
    p2_raw = [(2.0 - 1.0) ** 2 / 4.0, (5.0 - 4.0) ** 2 / 4.0, (1.0 - 2.0) ** 2 / 2.0]
    p2 = [min(a, b) for a, b in zip(p2_raw, d2)]
    f2 = [a - b for a, b in zip(d2, p2)]
    assert abs(params.mu - mu) < 1e-12
    assert abs(params.delta2 - np.mean(d2)) < 1e-12
    assert abs(params.psi2 - np.mean(p2)) < 1e-12
    assert abs(params.phi2 - np.mean(f2)) < 1e-12
    assert np.max(np.abs(params.per_subject - np.column_stack([d2, p2, f2]))) < 1e-12


def test_identity_and_convexity_on_random_instances(rng):
    for _ in range(100):
        n = int(rng.integers(3, 9))
        cs = rng.uniform(0.2, 6.0, size=n)
        ks = rng.integers(0, 3, size=n)
        ts = rng.integers(2, 12, size=n)
        study = diag_scalar_study(cs=cs, ks=ks, ts=ts)
        covs = sample_covariance_set(study)
        try:
            params = estimate_shrinkage_params(_state([0.1, 0.4]), covs, study)
        except DegenerateShrinkage:
            continue
        rel = abs(params.phi2 + params.psi2 - params.delta2) / params.delta2
        assert rel < 1e-12
        w = params.weight
        assert 0.0 <= w <= 1.0
        assert abs(w + params.phi2 / params.delta2 - 1.0) < 1e-12


def test_unclipped_variant_keeps_raw_phi():
    # subject 0 sits near the pooled mean but far from its own model variance,
    # so its raw psi-hat exceeds delta-hat and clipping matters
    study = diag_scalar_study(cs=[2.3, 5.0, 1.0], ks=[0, 2, 1], ts=[2, 4, 2])
    covs = sample_covariance_set(study)
    state = _state([0.0, np.log(2.0)])
    clipped = estimate_shrinkage_params(state, covs, study, clip=True)
    raw = estimate_shrinkage_params(state, covs, study, clip=False)
    assert clipped.psi2 == raw.psi2  # the psi aggregate is clipped in both
    assert raw.phi2 <= clipped.phi2
    assert raw.per_subject[0, 2] < 0 < clipped.per_subject[0, 2] + 1e-15


def test_degenerate_when_all_projected_variances_match():
    # c_i = 1 exactly (sqrt(4) = 2 is exact) and beta = 0 gives e_i = 1 exactly
    study = diag_scalar_study(cs=[1.0, 1.0, 1.0], ks=[0, 0, 0], ts=[4, 4, 4])
    covs = sample_covariance_set(study)
    with pytest.raises(DegenerateShrinkage):
        estimate_shrinkage_params(_state([0.0, 0.0]), covs, study)


def _random_covs(rng, n=4, p=3, rank=None):
    mats = []
    for _ in range(n):
        a = rng.standard_normal((rank or p, p))
        mats.append(a.T @ a / (rank or p))
    return CovarianceSet(
        matrices=np.stack(mats), weights=rng.integers(2, 9, n), kind=CovKind.SAMPLE
    )


def test_cs_shrink_no_shrinkage_endpoint(rng):
    covs = _random_covs(rng)
    params = ShrinkageParams(mu=5.0, delta2=2.0, psi2=0.0, phi2=2.0, per_subject=np.zeros((4, 3)))
    out = cs_shrink(covs, params)
    assert out.kind is CovKind.COVARIATE_SHRUNK
    assert np.array_equal(out.matrices, covs.matrices)


def test_cs_shrink_full_shrinkage_endpoint(rng):
    covs = _random_covs(rng)
    params = ShrinkageParams(mu=5.0, delta2=2.0, psi2=2.0, phi2=0.0, per_subject=np.zeros((4, 3)))
    out = cs_shrink(covs, params)
    for m in out.matrices:
        assert np.allclose(m, 5.0 * np.eye(3), atol=1e-14)


def test_cs_shrink_spd_floor_rank_deficient(rng):
    covs = _random_covs(rng, n=6, p=8, rank=3)  # rank 3 < p
    study = diag_scalar_study(cs=np.ones(6), ks=rng.integers(0, 2, 6), ts=covs.weights)
    gamma = rng.standard_normal(8)
    c = (covs.matrices @ gamma) @ gamma
    mu = c.mean() / (gamma @ gamma)
    # synthetic but valid parameter set with a meaningful weight
    params = ShrinkageParams(mu=mu, delta2=4.0, psi2=1.0, phi2=3.0, per_subject=np.zeros((6, 3)))
    out = cs_shrink(covs, params)
    floor = params.weight * params.mu
    for m in out.matrices:
        assert np.linalg.eigvalsh(m)[0] >= floor - 1e-10


def test_cs_shrink_commutes_with_sample(rng):
    covs = _random_covs(rng, n=5, p=4)
    params = ShrinkageParams(mu=1.7, delta2=2.0, psi2=0.5, phi2=1.5, per_subject=np.zeros((5, 3)))
    out = cs_shrink(covs, params)
    for s, ss in zip(covs.matrices, out.matrices):
        comm = ss @ s - s @ ss
        assert np.max(np.abs(comm)) < 1e-10


def test_closed_form_weights_minimize_grid_objective(rng):
    # single-instance version of the acceptance grid check, coarse grid
    n, t, g = 8, 40, 1.3
    e = np.exp(rng.uniform(0.2, 1.1, n))
    m_draws = 40000
    c = e[:, None] * rng.chisquare(t, (n, m_draws)) / t
    mu_cf = e.mean() / g
    psi2 = ((c - e[:, None]) ** 2).mean()
    delta2 = ((c - mu_cf * g) ** 2).mean()
    rho_cf = psi2 / delta2
    mus = np.linspace(0.1, 10.0, 100)
    rhos = np.linspace(0.0, 1.0, 100)
    cbar, c2bar = c.mean(axis=1), (c**2).mean(axis=1)
    best, arg = np.inf, None
    for mu in mus:
        a = rho_cf * 0 + mu  # placeholder to keep loop simple
        for rho in rhos:
            aa = rho * mu * g - e
            bb = 1.0 - rho
            val = np.mean(aa**2 + 2 * aa * bb * cbar + bb**2 * c2bar)
            if val < best:
                best, arg = val, (mu, rho)
    assert abs(arg[1] - rho_cf) <= 1.0 / 99 + 1e-9
    assert abs(arg[0] - mu_cf) <= 9.9 / 99 + 1e-9


def test_lw_spherical_fixed_point():
    s = SubjectData(id="x", observations=np.sqrt(3.0) * np.eye(2), covariates=np.array([1.0]))
    out = lw_shrink(s)
    assert np.allclose(out, 1.5 * np.eye(2), atol=1e-15)


def test_lw_maximal_shrinkage_endpoint():
    obs = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])
    s = SubjectData(id="x", observations=obs, covariates=np.array([1.0]))
    out = lw_shrink(s)
    assert np.allclose(out, np.eye(3) / 3.0, atol=1e-14)


def test_lw_matches_step_by_step_transcription(rng):
    y = rng.standard_normal((10, 4)) * 1.7
    s = SubjectData(id="x", observations=y, covariates=np.array([1.0]))
    t, p = y.shape
    samp = y.T @ y / t
    m = np.trace(samp) / p
    d2 = np.sum((samp - m * np.eye(p)) ** 2) / p
    b2_bar = 0.0
    for k in range(t):
        diff = np.outer(y[k], y[k]) - samp
        b2_bar += np.sum(diff**2) / p
    b2_bar /= t**2
    b2 = min(b2_bar, d2)
    expected = (b2 / d2) * m * np.eye(p) + ((d2 - b2) / d2) * samp
    assert np.max(np.abs(lw_shrink(s) - expected)) < 1e-12


def test_lw_strictly_pd_when_rank_deficient(rng):
    y = rng.standard_normal((3, 6))  # T < p
    s = SubjectData(id="x", observations=y, covariates=np.array([1.0]))
    assert np.linalg.eigvalsh(lw_shrink(s))[0] > 0


def test_lw_set_shape_and_kind(rng):
    study, _ = generate_study(SimDesign(p=5, n=4, T=7, seed=1))
    covs = lw_shrink_set(study)
    assert covs.kind is CovKind.LEDOIT_WOLF
    assert covs.matrices.shape == (4, 5, 5)
    assert np.array_equal(covs.weights, study.obs_counts)


def test_oracle_perfect_fit():
    # c_i == exp(x_i' beta) with spread: the regression is exact
    study = diag_scalar_study(cs=[1.0, 2.0, 4.0], ks=[0, 1, 2], ts=[4, 4, 4])
    covs = sample_covariance_set(study)
    comb = oracle_combination(_state([0.0, np.log(2.0)]), covs, study)
    assert abs(comb.rho2 - 1.0) < 1e-9
    assert abs(comb.rho1) < 1e-9


def test_oracle_constant_model_variance():
    # e constant c: slope 0, intercept c / gamma'gamma
    study = diag_scalar_study(cs=[1.0, 2.0, 4.0], ks=[0, 0, 0], ts=[4, 4, 4])
    covs = sample_covariance_set(study)
    state = ProjectionState(gamma=np.array([2.0, 0.0]), beta=np.array([np.log(5.0), 0.0]))
    # projected variances with gamma = (2, 0) are 4 * c_i, still spread
    comb = oracle_combination(state, covs, study)
    assert abs(comb.rho2) < 1e-12
    assert abs(comb.rho1 - 5.0 / 4.0) < 1e-12


def test_oracle_matches_normal_equations(rng):
    study = diag_scalar_study(cs=[2.0, 5.0, 1.0, 3.5], ks=[0, 2, 1, 1], ts=[4, 4, 2, 3])
    covs = sample_covariance_set(study)
    gamma = np.array([1.3, -0.4])
    state = ProjectionState(gamma=gamma, beta=np.array([0.1, np.log(1.7)]))
    comb = oracle_combination(state, covs, study)
    g = gamma @ gamma
    c = (covs.matrices @ gamma) @ gamma
    e = np.exp(study.design_matrix() @ state.beta)
    design = np.column_stack([np.full_like(c, g), c])
    rho, *_ = np.linalg.lstsq(design, e, rcond=None)
    assert abs(comb.rho1 - rho[0]) < 1e-10
    assert abs(comb.rho2 - rho[1]) < 1e-10
    # and the reported loss at the solution matches the residual
    loss = combination_loss(comb.rho1, comb.rho2, state, covs, study)
    assert abs(loss - np.mean((design @ rho - e) ** 2)) < 1e-12


def test_oracle_singular_design():
    study = diag_scalar_study(cs=[2.0, 2.0, 2.0], ks=[0, 1, 0], ts=[4, 4, 4])
    covs = sample_covariance_set(study)
    with pytest.raises(SingularDesign):
        oracle_combination(_state([0.0, 0.1]), covs, study)


def test_shrunk_estimate_approaches_sample_optimum_with_t():
    # the shared-shrinkage matrices converge to the per-dataset optimal
    # combination as the per-subject sample size grows
    from covcap.core import center_study

    med = []
    for t_idx, t in enumerate((50, 100, 500, 1000)):
        gaps = []
        for rep in range(20):
            study, truth = generate_study(SimDesign(p=10, n=20, T=t, seed=7000 + 97 * t_idx + rep))
            covs = sample_covariance_set(study)
            state = ProjectionState(
                gamma=truth.pi[:, 1],
                beta=np.array([truth.beta[2][0], truth.beta[2][1]]),
            )
            params = estimate_shrinkage_params(state, covs, study)
            shrunk = cs_shrink(covs, params)
            comb = oracle_combination(state, covs, study)
            diffs = [
                np.sum((ss - (comb.rho1 * np.eye(10) + comb.rho2 * s)) ** 2) / 10.0
                for ss, s in zip(shrunk.matrices, covs.matrices)
            ]
            gaps.append(np.mean(diffs))
        med.append(np.median(gaps))
    assert med[0] > med[1] > med[2] > med[3]
