import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays
from scipy import integrate, linalg, stats

from varinf.cavi import (
    CaviError,
    PpcaModel,
    VariationalState,
    cavi_fit,
    cavi_sweep,
    elbo,
    elbo_fixed_loadings,
    initial_state,
    log_evidence_fixed_loadings,
    natural_estimate,
    spd_inverse,
    svi_fit,
    svi_step,
    update_global,
    update_local,
)
from varinf.cli import load_csv
from varinf.deepmodels import sample_ppca_dataset
from varinf.expfam import RngState
from varinf.schedules import RmSchedule

from .conftest import DATA_DIR


def synthetic(seed, d=10, k=2, n=500, sigma_x2=0.1):
    x, loadings, _ = sample_ppca_dataset(d, k, n, sigma_x2, RngState(seed))
    return PpcaModel(x, k, sigma_x2), loadings


def is_spd(m):
    if not np.allclose(m, m.T, rtol=0, atol=1e-12 * max(1.0, np.abs(m).max())):
        return False
    try:
        np.linalg.cholesky(m)
    except np.linalg.LinAlgError:
        return False
    return True


def one_dim_state(mu_beta, sigma_beta, mu_z, sigma_z):
    return VariationalState(np.array([[mu_beta]]), np.array([[sigma_beta]]), np.array([[mu_z]]), np.array([[sigma_z]]))


# -- model -----------------------------------------------------------------


def test_model_validation():
    with pytest.raises(CaviError):
        PpcaModel(np.zeros((5, 3)), 4)
    with pytest.raises(CaviError):
        PpcaModel(np.zeros((5, 3)), 1, sigma_x2=0.0)
    with pytest.raises(CaviError):
        PpcaModel(np.zeros((0, 3)), 1)


def test_centering_is_stored():
    x = np.array([[1.0, 2.0], [3.0, 6.0]])
    model = PpcaModel(x, 1)
    np.testing.assert_array_equal(model.mean, [2.0, 4.0])
    np.testing.assert_array_equal(model.data.sum(axis=0), [0.0, 0.0])


# -- local and global updates ----------------------------------------------


def test_zero_loadings_decouple_scores():
    model, _ = synthetic(0, n=20)
    state = replace(initial_state(model, RngState(0)), mu_beta=np.zeros((10, 2)))
    sigma_z, mu_z = update_local(model, state)
    np.testing.assert_array_equal(sigma_z, np.eye(2))
    np.testing.assert_array_equal(mu_z, np.zeros((20, 2)))


def test_local_update_by_hand():
    model = PpcaModel(np.array([[2.0]]), 1, sigma_x2=1.0, center=False)
    sigma_z, mu_z = update_local(model, one_dim_state(1.0, 1.0, 0.0, 1.0))
    assert sigma_z[0, 0] == pytest.approx(0.5, abs=1e-15)
    assert mu_z[0, 0] == pytest.approx(1.0, abs=1e-15)


def test_global_update_by_hand():
    model = PpcaModel(np.array([[0.0]]), 1, sigma_x2=1.0, center=False, ard=False)
    sigma_beta, mu_beta = update_global(model, one_dim_state(0.3, 1.0, 0.0, 1.0))
    assert sigma_beta[0, 0] == pytest.approx(0.5, abs=1e-15)
    assert mu_beta[0, 0] == 0.0


def test_zero_data_gives_zero_loadings():
    model = PpcaModel(np.zeros((8, 4)), 2)
    state = initial_state(model, RngState(3))
    state = replace(state, mu_z=np.random.default_rng(0).normal(size=(8, 2)))
    _, mu_beta = update_global(model, state)
    np.testing.assert_array_equal(mu_beta, 0.0)


@settings(max_examples=40, deadline=None)
@given(mu_beta=arrays(np.float64, (5, 3), elements=st.floats(-3, 3)), log_s2=st.floats(-3, 1))
def test_updates_keep_covariances_spd(mu_beta, log_s2):
    x = np.random.default_rng(0).normal(size=(12, 5))
    model = PpcaModel(x, 3, sigma_x2=math.exp(log_s2))
    state = replace(initial_state(model, RngState(0)), mu_beta=mu_beta)
    sigma_z, mu_z = update_local(model, state)
    assert is_spd(sigma_z)
    sigma_beta, _ = update_global(model, replace(state, sigma_z=sigma_z, mu_z=mu_z))
    assert is_spd(sigma_beta)


def test_spd_inverse_rejects_indefinite():
    with pytest.raises(CaviError):
        spd_inverse(np.array([[1.0, 0.0], [0.0, -1.0]]))


# -- ELBO --------------------------------------------------------------------


@pytest.mark.parametrize("ard", [False, True])
def test_elbo_matches_quadrature_k1_n1(ard):
    """The closed form against a direct 2-D integral of E_q[ln p - ln q]."""
    x, s2 = 0.8, 0.5
    model = PpcaModel(np.array([[x]]), 1, sigma_x2=s2, center=False, ard=ard)
    mb, sb, mz, sz = 0.6, 0.7, -0.4, 0.9
    state = one_dim_state(mb, sb, mz, sz)
    a = 1.0 / mb**2 if ard else 1.0
    vb = s2 * sb  # loading covariance is sigma_x2 * Sigma_beta

    def lnorm(v, m, var):
        return -0.5 * math.log(2 * math.pi * var) - (v - m) ** 2 / (2 * var)

    def integrand(z, b):
        log_joint = lnorm(x, b * z, s2) + lnorm(z, 0, 1) + lnorm(b, 0, 1 / a)
        log_q_b = lnorm(b, mb, vb)
        log_q_z = lnorm(z, mz, sz)
        return math.exp(log_q_b + log_q_z) * (log_joint - log_q_b - log_q_z)

    wb, wz = 12 * math.sqrt(vb), 12 * math.sqrt(sz)
    value, _ = integrate.dblquad(integrand, mb - wb, mb + wb, mz - wz, mz + wz, epsabs=1e-12, epsrel=1e-12)
    assert elbo(model, state) == pytest.approx(value, abs=1e-8)


def test_elbo_standard_values_closed_form():
    """Unit everything, x = 0: a hand-derived closed form."""
    model = PpcaModel(np.array([[0.0]]), 1, sigma_x2=1.0, center=False, ard=False)
    state = one_dim_state(0.0, 1.0, 0.0, 1.0)
    ln2pi = math.log(2 * math.pi)
    # E[ln N(0|bz,1)] = -ln2pi/2 - E[b^2]E[z^2]/2 = -ln2pi/2 - 1/2
    # E[ln N(z|0,1)] = E[ln N(b|0,1)] = -ln2pi/2 - 1/2; entropies = (ln2pi + 1)/2 each
    expected = 3 * (-0.5 * ln2pi - 0.5) + 2 * 0.5 * (ln2pi + 1)
    assert elbo(model, state) == pytest.approx(expected, abs=1e-14)


@pytest.mark.parametrize("seed", range(5))
def test_cavi_is_monotone(seed):
    model, _ = synthetic(seed)
    _, trace = cavi_fit(model, max_sweeps=200, rel_tol=0.0, rng=RngState(seed))
    steps = np.diff(trace)
    assert np.all(steps >= -1e-8 * np.abs(trace[:-1]))


def test_fixed_loading_elbo_bounds_evidence():
    model, loadings = synthetic(1, n=200)
    b = loadings.T
    state = replace(initial_state(model, RngState(1)), mu_beta=b)
    evidence = log_evidence_fixed_loadings(model, b)
    assert elbo_fixed_loadings(model, b, state.sigma_z, state.mu_z) < evidence
    rng = np.random.default_rng(0)
    for _ in range(20):
        mu_z = rng.normal(size=(200, 2))
        m = rng.normal(size=(2, 2))
        assert elbo_fixed_loadings(model, b, m @ m.T + 0.1 * np.eye(2), mu_z) <= evidence
    # the exact posterior closes the gap
    sigma_z, mu_z = update_local(model, state)
    assert elbo_fixed_loadings(model, b, sigma_z, mu_z) == pytest.approx(evidence, rel=1e-12)


def test_log_evidence_matches_scipy():
    model, loadings = synthetic(2, d=4, k=2, n=30)
    b = loadings.T
    cov = b @ b.T + model.sigma_x2 * np.eye(4)
    expected = stats.multivariate_normal(np.zeros(4), cov).logpdf(model.data).sum()
    assert log_evidence_fixed_loadings(model, b) == pytest.approx(expected, rel=1e-12)


# -- fitting -----------------------------------------------------------------


def test_infinite_tolerance_gives_one_sweep():
    model, _ = synthetic(0, n=50)
    _, trace = cavi_fit(model, max_sweeps=100, rel_tol=math.inf, rng=RngState(0))
    assert len(trace) == 1


def test_sweep_budget():
    model, _ = synthetic(0, n=50)
    _, trace = cavi_fit(model, max_sweeps=7, rel_tol=0.0)
    assert len(trace) == 7
    with pytest.raises(CaviError):
        cavi_fit(model, max_sweeps=0)


def test_subspace_recovery():
    model, loadings = synthetic(4)
    state, _ = cavi_fit(model, rng=RngState(4))
    angle = np.degrees(linalg.subspace_angles(loadings.T, state.mu_beta).max())
    assert angle < 5.0


def test_permutation_invariance():
    model, _ = synthetic(6, n=100)
    perm = np.random.default_rng(0).permutation(100)
    permuted = PpcaModel(model.data[perm] + model.mean, 2, model.sigma_x2)
    a, _ = cavi_fit(model, max_sweeps=30, rel_tol=0.0, rng=RngState(1))
    b, _ = cavi_fit(permuted, max_sweeps=30, rel_tol=0.0, rng=RngState(1))
    np.testing.assert_allclose(b.mu_z, a.mu_z[perm], rtol=1e-9, atol=1e-12)
    for name in ("mu_beta", "sigma_beta", "sigma_z"):
        np.testing.assert_allclose(getattr(b, name), getattr(a, name), rtol=1e-9, atol=1e-12)


def test_iris_embedding_separates_classes():
    from sklearn.linear_model import LogisticRegression
    from sklearn.model_selection import cross_val_score

    x = load_csv(DATA_DIR / "iris.csv")
    labels = load_csv(DATA_DIR / "iris_labels.csv")[:, 0]
    state, _ = cavi_fit(PpcaModel(x, 2), rng=RngState(0))
    acc = cross_val_score(LogisticRegression(max_iter=1000), state.mu_z, labels, cv=5).mean()
    assert acc > 0.8  # chance is 1/3


# -- stochastic VI -----------------------------------------------------------


def test_schedule_values():
    rho = RmSchedule(tau=1.0, kappa=0.75)
    assert rho(0) == 1.0
    assert rho(1) == pytest.approx(0.5946, abs=1e-4)
    assert rho(1) == 2.0**-0.75


@pytest.mark.parametrize("tau, kappa", [(1.0, 0.4), (1.0, 0.5), (1.0, 1.2), (-1.0, 0.75), (0.0, 0.75)])
def test_schedule_rejects_invalid(tau, kappa):
    with pytest.raises(ValueError):
        RmSchedule(tau, kappa)


def test_full_batch_unit_step_is_a_cavi_sweep():
    model, _ = synthetic(2, n=80)
    state = initial_state(model, RngState(2))
    state = cavi_sweep(model, state)  # move away from the initial point
    via_svi = svi_step(model, state, np.arange(model.n), 1.0)
    via_cavi = cavi_sweep(model, state)
    for name in ("mu_beta", "sigma_beta", "mu_z", "sigma_z"):
        np.testing.assert_allclose(getattr(via_svi, name), getattr(via_cavi, name), rtol=1e-12, atol=1e-14)


def test_singleton_estimates_average_to_full_batch_target():
    model, _ = synthetic(3, n=60)
    state = cavi_sweep(model, initial_state(model, RngState(3)))
    full_p, full_s, _, _ = natural_estimate(model, state, np.arange(model.n))
    p_sum, s_sum = np.zeros_like(full_p), np.zeros_like(full_s)
    for i in range(model.n):
        p, s, _, _ = natural_estimate(model, state, [i])
        p_sum += p
        s_sum += s
    np.testing.assert_allclose(p_sum / model.n, full_p, rtol=1e-12)
    np.testing.assert_allclose(s_sum / model.n, full_s, rtol=1e-12, atol=1e-12)


def test_svi_step_preconditions():
    model, _ = synthetic(0, n=20)
    state = initial_state(model, RngState(0))
    with pytest.raises(CaviError):
        svi_step(model, state, [0, 1], 0.0)
    with pytest.raises(CaviError):
        svi_step(model, state, [], 0.5)
    with pytest.raises(CaviError):
        svi_fit(model, None, RmSchedule(), 21, 10, RngState(0))
    with pytest.raises(CaviError, match="exceeds 1"):
        svi_fit(model, None, RmSchedule(tau=0.5), 5, 10, RngState(0))


def test_svi_is_deterministic_and_improves():
    model, _ = synthetic(5, n=200)
    _, a = svi_fit(model, None, RmSchedule(), 20, 300, RngState(9), trace_every=10)
    _, b = svi_fit(model, None, RmSchedule(), 20, 300, RngState(9), trace_every=10)
    assert a == b
    assert a[-1][1] > a[0][1]
    assert [s for s, _ in a][-1] == 300
