import math

import numpy as np
import pytest
from scipy import stats

from varinf.estimators import (
    PATHWISE,
    SCORE,
    DivergenceError,
    EstimatorError,
    StochasticObjective,
    elbo_mc,
    gaussian_kl_objective,
    maximize,
    pathwise_grad,
    quadratic_objective,
    score_grad,
)
from varinf.expfam import RngState
from varinf.ndgraph import Graph
from varinf.schedules import ConstantSchedule, RmSchedule


def grad_and_se(est, name="z.mean"):
    return est.mean[name].item(), est.std_error[name].item()


# -- elbo_mc -----------------------------------------------------------------


def test_identical_prior_and_posterior_cancel():
    obj = gaussian_kl_objective(0.0, 0.0, K=100)
    per = obj.evaluate(RngState(0))
    np.testing.assert_array_equal(per, 0.0)
    value, se = elbo_mc(obj, RngState(0), 100)
    assert value == 0.0 and se == 0.0


def test_elbo_is_minus_kl_without_likelihood():
    value, se = elbo_mc(gaussian_kl_objective(1.0, 0.0, K=10_000), RngState(1), 10_000)
    assert abs(value - (-0.5)) < 4 * se


def test_single_sample_has_no_standard_error():
    value, se = elbo_mc(gaussian_kl_objective(1.0, 0.0, K=1), RngState(1), 1)
    assert se is None and math.isfinite(value)


def test_exact_posterior_recovers_evidence():
    # z ~ N(0,1), x | z ~ N(z, 1): posterior N(x/2, 1/2), evidence N(x | 0, 2)
    x = 1.3
    obj = gaussian_kl_objective(x / 2, 0.5 * math.log(0.5), K=1000, observation=x)
    value, se = elbo_mc(obj, RngState(2), 1000)
    assert value == pytest.approx(stats.norm.logpdf(x, 0, math.sqrt(2)), abs=1e-12)
    assert se < 1e-12


def test_k_must_divide_into_passes():
    obj = gaussian_kl_objective(0.0, 0.0, K=10)
    with pytest.raises(EstimatorError):
        elbo_mc(obj, RngState(0), 15)
    assert elbo_mc(obj, RngState(0), 30)[0] == 0.0


# -- pathwise ----------------------------------------------------------------


@pytest.mark.parametrize("mu", [3.0, 5.0])
def test_pathwise_matches_analytic_gradient(mu):
    K = 100_000
    g, se = grad_and_se(pathwise_grad(quadratic_objective(mu, K), RngState(0), K))
    assert abs(g - 2 * (mu - 5)) < 3 * se


def test_pathwise_per_sample_adjoints():
    mu = 3.0
    obj = quadratic_objective(mu, 1)
    node = obj.stochastic[0]
    for e in np.linspace(-2.5, 2.5, 10):
        b = obj.draw(RngState(0), noise={node.eps: np.array([e])})
        obj.graph.forward(b)
        adj = obj.graph.backward(obj.value)[node.mean]
        assert abs(adj.item() - 2 * (mu + e - 5)) < 1e-10


def test_batched_rows_give_per_sample_gradients():
    mu, K = 3.0, 10
    obj = quadratic_objective(mu, K)
    node = obj.stochastic[0]
    eps = np.linspace(-2, 2, K).reshape(K, 1)
    b = obj.draw(RngState(0), noise={node.eps: eps})
    obj.graph.forward(b)
    rows = K * obj.graph.backward(obj.value, wrt=[node.mean_rows])[node.mean_rows]
    np.testing.assert_allclose(rows, 2 * (mu + eps - 5), atol=1e-12)


def test_pathwise_rejects_score_nodes():
    with pytest.raises(EstimatorError, match="score_grad"):
        pathwise_grad(quadratic_objective(3.0, 10, mode=SCORE), RngState(0), 10)


# -- score function ----------------------------------------------------------


def test_score_matches_gaussian_moment_target():
    K = 1_000_000
    g, se = grad_and_se(score_grad(quadratic_objective(3.0, K, mode=SCORE), RngState(0), K))
    assert abs(g - (-4.0)) < 4 * se


def test_single_draw_score_integrand():
    mu = 3.0
    for seed in range(5):
        est = score_grad(quadratic_objective(mu, 1, mode=SCORE), RngState(seed), 1)
        z = mu + RngState(seed).normal((1,))[0]
        assert est.mean["z.mean"].item() == pytest.approx((z - 5) ** 2 * (z - mu), rel=1e-12, abs=1e-12)
        assert est.std_error["z.mean"] is None


def test_score_needs_log_q():
    with pytest.raises(EstimatorError, match="missing log q"):
        score_grad(quadratic_objective(3.0, 10), RngState(0), 10)


def test_score_identity_has_zero_mean():
    K = 1_000_000
    obj = StochasticObjective(Graph(), n_samples=K)
    obj.stochastic_node("r", [0.7], [-0.3], mode=SCORE)
    obj.finish(obj.graph.add_constant(np.ones((K, 1))))
    est = score_grad(obj, RngState(3), K)
    for name in ("r.mean", "r.log_std"):
        assert abs(est.mean[name].item()) < 4 * est.std_error[name].item()


def test_sample_values_are_detached_in_score_mode():
    """With g independent of r, the only gradient is g * grad log q."""
    obj = StochasticObjective(Graph(), n_samples=1)
    r = obj.stochastic_node("r", [0.0], [0.0], mode=SCORE)
    obj.finish(obj.graph.apply("scalar_mul", r, c=2.0))
    est = score_grad(obj, RngState(4), 1)
    z = RngState(4).normal((1,))[0]
    # the pathwise contribution (2.0) must be absent
    assert est.mean["r.mean"].item() == pytest.approx(2 * z * z, rel=1e-12)


def test_estimators_agree():
    K = 100_000
    gp, sp = grad_and_se(pathwise_grad(quadratic_objective(3.0, K), RngState(10), K))
    gs, ss = grad_and_se(score_grad(quadratic_objective(3.0, K, mode=SCORE), RngState(11), K))
    assert abs(gp - gs) < 3 * math.hypot(sp, ss)


def test_score_variance_is_larger():
    K, wins = 1000, 0
    for child in RngState(0).spawn(10):
        vp = pathwise_grad(quadratic_objective(3.0, K), child, K).per_sample["z.mean"].var()
        vs = score_grad(quadratic_objective(3.0, K, mode=SCORE), child, K).per_sample["z.mean"].var()
        wins += vs > vp
    assert wins == 10


def test_standard_errors_are_nonnegative():
    est = pathwise_grad(gaussian_kl_objective(0.5, -0.2, K=50, observation=0.3), RngState(0), 50)
    assert est.n_samples == 50
    for se in est.std_error.values():
        assert np.all(se >= 0)


# -- maximize ----------------------------------------------------------------


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_maximize_reaches_optimum(seed):
    obj = quadratic_objective(0.0, 32, sign=-1.0)
    maximize(obj, PATHWISE, RmSchedule(), 2000, RngState(seed), record_params=False)
    assert abs(obj.get("z.mean").item() - 5.0) < 0.05


def test_maximize_kl_objective_learns_posterior():
    obj = gaussian_kl_objective(0.0, 0.0, K=64, observation=2.0)
    maximize(obj, PATHWISE, ConstantSchedule(0.02), 3000, RngState(0), optimizer="adam", record_params=False)
    assert obj.get("z.mean").item() == pytest.approx(1.0, abs=0.05)
    assert obj.get("z.log_std").item() == pytest.approx(0.5 * math.log(0.5), abs=0.05)


def test_maximize_is_deterministic():
    runs = []
    for _ in range(2):
        obj = quadratic_objective(0.0, 8, sign=-1.0)
        runs.append(maximize(obj, PATHWISE, RmSchedule(), 50, RngState(7), trace_every=5))
    (nu_a, elbo_a), (nu_b, elbo_b) = runs
    assert elbo_a == elbo_b
    assert len(elbo_a) == 10 and elbo_a[-1][0] == 50
    for (sa, pa), (sb, pb) in zip(nu_a, nu_b):
        assert sa == sb and all(np.array_equal(pa[k], pb[k]) for k in pa)


def test_maximize_preconditions():
    obj = quadratic_objective(0.0, 8, sign=-1.0)
    with pytest.raises(EstimatorError):
        maximize(obj, PATHWISE, RmSchedule(), 0, RngState(0))
    with pytest.raises(EstimatorError):
        maximize(obj, "bogus", RmSchedule(), 1, RngState(0))


def test_divergence_guard():
    obj = quadratic_objective(0.0, 8, sign=1.0)  # ascending an unbounded objective
    with pytest.raises(DivergenceError):
        maximize(obj, PATHWISE, ConstantSchedule(1.0), 100, RngState(0))
