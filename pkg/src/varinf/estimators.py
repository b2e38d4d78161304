"""Stochastic computational graphs and black-box ELBO gradient estimators.

An objective ``g(r, nu)`` lives in a :class:`~varinf.ndgraph.Graph`. Each
stochastic variable ``r ~ N(mean, exp(log_std)^2)`` is either

* ``"pathwise"``: ``r = mean + exp(log_std) * eps`` is part of the graph, so
  adjoints flow from ``g`` through the sample into the parameters, or
* ``"score"``: ``r`` is a placeholder bound to a sample drawn outside the
  graph. Nothing flows through it; the gradient comes from
  ``g * d log q(r) / d nu``.

When an objective is built with ``n_samples = K > 1`` the K samples occupy
the rows of every sampled tensor and ``value`` is the mean of the per-sample
column ``per_sample``. Variational parameters are then expanded to K rows by
a matmul with a column of ones, which makes per-sample gradients available
as the adjoints of the expanded rows.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .expfam import LOG_2PI, RngState
from .ndgraph import Graph, NodeId, Tensor

PATHWISE = "pathwise"
SCORE = "score"


class EstimatorError(ValueError):
    pass


class DivergenceError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# graph helpers
# ---------------------------------------------------------------------------


def row_sums(g: Graph, x: NodeId) -> NodeId:
    """[m x n] -> [m x 1]."""
    n = g.shape(x)[1]
    return g.apply("matmul", x, g.add_constant(np.ones((n, 1))))


def normal_logpdf(
    g: Graph,
    x: NodeId,
    mean: Union[NodeId, float],
    log_std: Union[NodeId, float],
    per_row: bool = False,
) -> NodeId:
    """Log-density of independent Normals, summed to a scalar or to row sums.

    ``mean`` and ``log_std`` may be graph nodes (broadcast by row) or plain
    floats.
    """
    shape = g.shape(x)
    diff = x if isinstance(mean, (int, float)) and mean == 0 else (
        g.apply("sub", x, mean if isinstance(mean, NodeId) else g.add_constant(np.full(shape, float(mean))))
    )
    if isinstance(log_std, NodeId):
        inv_std = g.apply("exp", g.apply("neg", log_std))
        z = g.apply("mul", diff, inv_std)
        terms = g.apply("sub", g.apply("scalar_mul", g.apply("square", z), c=-0.5), log_std)
        const = -0.5 * LOG_2PI
    else:
        z = g.apply("scalar_mul", diff, c=math.exp(-float(log_std)))
        terms = g.apply("scalar_mul", g.apply("square", z), c=-0.5)
        const = -0.5 * LOG_2PI - float(log_std)
    if per_row:
        return g.apply("add", row_sums(g, terms), g.add_constant([const * shape[1]]))
    n = int(np.prod(shape))
    return g.apply("add", g.apply("sum", terms), g.add_constant([const * n]))


# ---------------------------------------------------------------------------
# objectives
# ---------------------------------------------------------------------------


@dataclass
class StochasticNode:
    name: str
    sample: NodeId
    mean: NodeId
    log_std: NodeId
    log_q: NodeId
    mode: str
    eps: Optional[NodeId] = None
    mean_rows: Optional[NodeId] = None
    log_std_rows: Optional[NodeId] = None


@dataclass
class StochasticObjective:
    """A graph evaluating ``g(r, nu)`` plus the bookkeeping to sample it."""

    graph: Graph
    n_samples: int = 1
    value: Optional[NodeId] = None
    per_sample: Optional[NodeId] = None
    stochastic: List[StochasticNode] = field(default_factory=list)
    noise: List[NodeId] = field(default_factory=list)
    params: Dict[str, NodeId] = field(default_factory=dict)
    bindings: Dict[NodeId, Tensor] = field(default_factory=dict)
    _score: Optional[Tuple[NodeId, NodeId]] = None

    # -- building -----------------------------------------------------------

    def parameter(self, name: str, init) -> NodeId:
        init = np.asarray(init, dtype=np.float64)
        nid = self.graph.add_parameter(init.shape, init, name=name)
        self.params[name] = nid
        return nid

    def add_noise(self, shape: Sequence[int], name: Optional[str] = None) -> NodeId:
        nid = self.graph.add_placeholder(shape, name=name)
        self.noise.append(nid)
        return nid

    def stochastic_node(
        self,
        name: str,
        mean_init,
        log_std_init,
        mode: str = PATHWISE,
    ) -> NodeId:
        """Add ``r ~ N(mean, exp(log_std)^2)`` with trainable mean and log_std.

        With ``n_samples > 1`` the initial values must be vectors of length n
        and the returned sample node has shape [n_samples x n].
        """
        if mode not in (PATHWISE, SCORE):
            raise EstimatorError(f"unknown estimator mode {mode!r}")
        g = self.graph
        mean_init = np.asarray(mean_init, dtype=np.float64)
        log_std_init = np.broadcast_to(np.asarray(log_std_init, dtype=np.float64), mean_init.shape)
        k = self.n_samples
        if k > 1:
            if mean_init.ndim != 1:
                raise EstimatorError("batched stochastic nodes take vector parameters")
            n = mean_init.shape[0]
            mean = self.parameter(f"{name}.mean", mean_init.reshape(1, n))
            log_std = self.parameter(f"{name}.log_std", log_std_init.reshape(1, n))
            ones = g.add_constant(np.ones((k, 1)))
            mean_used = g.apply("matmul", ones, mean)
            log_std_used = g.apply("matmul", ones, log_std)
            shape = (k, n)
        else:
            mean = self.parameter(f"{name}.mean", mean_init)
            log_std = self.parameter(f"{name}.log_std", log_std_init)
            mean_used, log_std_used = mean, log_std
            shape = mean_init.shape
        eps = None
        if mode == PATHWISE:
            eps = self.add_noise(shape, name=f"{name}.eps")
            scaled = g.apply("mul", g.apply("exp", log_std_used), eps)
            sample = g.apply("add", mean_used, scaled)
        else:
            sample = g.add_placeholder(shape, name=f"{name}.sample")
        log_q = normal_logpdf(g, sample, mean_used, log_std_used, per_row=k > 1)
        node = StochasticNode(name, sample, mean, log_std, log_q, mode, eps)
        if k > 1:
            node.mean_rows, node.log_std_rows = mean_used, log_std_used
        self.stochastic.append(node)
        return sample

    def finish(self, per_sample: NodeId) -> "StochasticObjective":
        """Declare the per-sample objective ([K x 1], or [1] when unbatched)."""
        shape = self.graph.shape(per_sample)
        expected = (self.n_samples, 1) if self.n_samples > 1 else (1,)
        if shape != expected:
            raise EstimatorError(f"per-sample objective must have shape {list(expected)}, got {list(shape)}")
        self.per_sample = per_sample
        self.value = self.graph.apply("mean", per_sample)
        return self

    def _score_surrogate(self) -> Tuple[NodeId, NodeId]:
        """``mean(stop_grad(g) * sum log q)`` over the samples."""
        if self._score is None:
            g = self.graph
            nodes = [s for s in self.stochastic if s.mode == SCORE]
            if not nodes:
                raise EstimatorError("objective has no score-mode stochastic nodes")
            total = nodes[0].log_q
            for s in nodes[1:]:
                total = g.apply("add", total, s.log_q)
            g_const = g.add_input(g.shape(self.per_sample), name="g.detached")
            surrogate = g.apply("mean", g.apply("mul", g_const, total))
            self._score = (g_const, surrogate)
        return self._score

    # -- evaluation ---------------------------------------------------------

    def draw(self, rng: RngState, noise: Optional[Dict[NodeId, Tensor]] = None) -> Dict[NodeId, Tensor]:
        """Bindings for one pass: data, standard-normal noise and score samples."""
        g = self.graph
        b = dict(self.bindings)
        for nid in self.noise:
            b[nid] = noise[nid] if noise and nid in noise else rng.normal(g.shape(nid))
        for s in self.stochastic:
            if s.mode == SCORE:
                eps = noise[s.sample] if noise and s.sample in noise else rng.normal(g.shape(s.sample))
                mu = g.get_value(s.mean)
                sd = np.exp(g.get_value(s.log_std))
                b[s.sample] = mu + sd * eps
        return b

    def evaluate(self, rng: RngState, noise: Optional[Dict[NodeId, Tensor]] = None) -> np.ndarray:
        """Per-sample objective values for one pass."""
        vals = self.graph.forward(self.draw(rng, noise))
        return vals[self.per_sample].reshape(-1).copy()

    def get(self, name: str) -> Tensor:
        return self.graph.get_value(self.params[name])

    def set(self, name: str, value) -> None:
        self.graph.set_value(self.params[name], value)


@dataclass
class GradientEstimate:
    """Monte Carlo gradient with per-parameter standard errors.

    ``std_error`` entries are ``None`` where fewer than two independent
    per-sample gradients exist.
    """

    mean: Dict[str, Tensor]
    std_error: Dict[str, Optional[Tensor]]
    n_samples: int
    value: float
    value_std_error: Optional[float]
    per_sample: Dict[str, np.ndarray] = field(default_factory=dict, repr=False)


def _std_error(rows: np.ndarray) -> Optional[np.ndarray]:
    if rows.shape[0] < 2:
        return None
    return rows.std(axis=0, ddof=1) / math.sqrt(rows.shape[0])


def _passes(obj: StochasticObjective, K: int) -> int:
    if K < 1:
        raise EstimatorError("K must be at least 1")
    if K % obj.n_samples:
        raise EstimatorError(f"K={K} is not a multiple of the objective's batch of {obj.n_samples}")
    return K // obj.n_samples


def elbo_mc(obj: StochasticObjective, rng: RngState, K: int) -> Tuple[float, Optional[float]]:
    """Mean of K independent evaluations of ``g`` and its standard error."""
    values = []
    for _ in range(_passes(obj, K)):
        v = obj.evaluate(rng)
        bad = np.flatnonzero(~np.isfinite(v))
        if bad.size:
            raise EstimatorError(f"non-finite objective at sample {len(values) * obj.n_samples + bad[0]}")
        values.append(v)
    values = np.concatenate(values)
    se = None if values.size < 2 else float(values.std(ddof=1) / math.sqrt(values.size))
    return float(values.mean()), se


def _collect(obj: StochasticObjective, output: NodeId, bindings, K_pass: int):
    """One forward/backward; returns per-parameter (total grad, per-sample rows or None)."""
    g = obj.graph
    vals = g.forward(bindings)
    expanded = {}
    for s in obj.stochastic:
        if s.mean_rows is not None:
            expanded[s.mean] = s.mean_rows
            expanded[s.log_std] = s.log_std_rows
    adj = g.backward(output, wrt=list(expanded.values()))
    out = {}
    for name, nid in obj.params.items():
        rows = None
        if nid in expanded:
            rows = K_pass * adj[expanded[nid]]
        out[name] = (adj[nid], rows)
    return vals, out


def _estimate(obj: StochasticObjective, rng: RngState, K: int, score: bool) -> GradientEstimate:
    passes = _passes(obj, K)
    per_param: Dict[str, List[np.ndarray]] = {name: [] for name in obj.params}
    values = []
    for _ in range(passes):
        b = obj.draw(rng)
        if score:
            g_const, surrogate = obj._score_surrogate()
            g_vals = obj.graph.forward({**b, g_const: np.zeros(obj.graph.shape(g_const))})[obj.per_sample]
            b[g_const] = g_vals.copy()
            vals, grads = _collect(obj, surrogate, b, obj.n_samples)
        else:
            vals, grads = _collect(obj, obj.value, b, obj.n_samples)
        values.append(vals[obj.per_sample].reshape(-1).copy())
        for name, (total, rows) in grads.items():
            if rows is not None:
                per_param[name].append(rows.reshape(obj.n_samples, -1))
            else:
                per_param[name].append(total.reshape(1, -1))
    values = np.concatenate(values)
    means, ses, samples = {}, {}, {}
    for name, chunks in per_param.items():
        shape = obj.graph.shape(obj.params[name])
        rows = np.concatenate(chunks, axis=0)
        samples[name] = rows
        means[name] = rows.mean(axis=0).reshape(shape)
        se = _std_error(rows)
        ses[name] = None if se is None else se.reshape(shape)
    value_se = None if values.size < 2 else float(values.std(ddof=1) / math.sqrt(values.size))
    return GradientEstimate(means, ses, K, float(values.mean()), value_se, samples)


def pathwise_grad(obj: StochasticObjective, rng: RngState, K: int) -> GradientEstimate:
    """Reparameterisation gradient: average adjoints of ``g`` over K noise draws."""
    for s in obj.stochastic:
        if s.mode != PATHWISE:
            raise EstimatorError(
                f"stochastic node {s.name!r} is in score mode; use score_grad or give every node pathwise mode"
            )
    return _estimate(obj, rng, K, score=False)


def score_grad(obj: StochasticObjective, rng: RngState, K: int) -> GradientEstimate:
    """Score-function gradient ``mean_k g(r_k) * grad log q(r_k)``.

    Parameters that do not enter any score-mode ``log q`` get zero gradient;
    the sampled values are constants in the graph.
    """
    if not any(s.mode == SCORE for s in obj.stochastic):
        raise EstimatorError("missing log q subexpression: no score-mode stochastic node")
    return _estimate(obj, rng, K, score=True)


ESTIMATORS: Dict[str, Callable[[StochasticObjective, RngState, int], GradientEstimate]] = {
    PATHWISE: pathwise_grad,
    SCORE: score_grad,
}


# ---------------------------------------------------------------------------
# optimisation
# ---------------------------------------------------------------------------


class Adam:
    """Adam ascent steps; the schedule supplies the base learning rate."""

    def __init__(self, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m: Dict[str, np.ndarray] = {}
        self.v: Dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, grads: Dict[str, np.ndarray], rate: float) -> Dict[str, np.ndarray]:
        self.t += 1
        out = {}
        for name, g in grads.items():
            m = self.m.get(name, np.zeros_like(g))
            v = self.v.get(name, np.zeros_like(g))
            m = self.beta1 * m + (1 - self.beta1) * g
            v = self.beta2 * v + (1 - self.beta2) * g * g
            self.m[name], self.v[name] = m, v
            mhat = m / (1 - self.beta1**self.t)
            vhat = v / (1 - self.beta2**self.t)
            out[name] = rate * mhat / (np.sqrt(vhat) + self.eps)
        return out


def maximize(
    obj: StochasticObjective,
    estimator: str,
    schedule: Callable[[int], float],
    steps: int,
    rng: RngState,
    K: Optional[int] = None,
    trace_every: int = 1,
    optimizer: str = "sgd",
    record_params: bool = True,
    on_step: Optional[Callable[[int, StochasticObjective], None]] = None,
) -> Tuple[List[Tuple[int, Dict[str, np.ndarray]]], List[Tuple[int, float, Optional[float]]]]:
    """Stochastic gradient ascent on the variational parameters.

    ``optimizer="sgd"`` takes plain steps ``nu += rho_t * grad``;
    ``"adam"`` rescales them per coordinate. Returns ``(nu_trace,
    elbo_trace)`` where the ELBO entries are the Monte Carlo values from the
    same samples as the gradient. ``on_step`` runs before each step (e.g. to
    rebind a minibatch).
    """
    if steps < 1:
        raise EstimatorError("steps must be at least 1")
    if estimator not in ESTIMATORS:
        raise EstimatorError(f"unknown estimator {estimator!r}")
    if optimizer not in ("sgd", "adam"):
        raise EstimatorError(f"unknown optimizer {optimizer!r}")
    K = obj.n_samples if K is None else K
    estimate = ESTIMATORS[estimator]
    adam = Adam() if optimizer == "adam" else None
    nu_trace: List[Tuple[int, Dict[str, np.ndarray]]] = []
    elbo_trace: List[Tuple[int, float, Optional[float]]] = []
    for t in range(steps):
        if on_step is not None:
            on_step(t, obj)
        est = estimate(obj, rng, K)
        if not math.isfinite(est.value) or abs(est.value) > 1e12:
            raise DivergenceError(f"ELBO estimate {est.value!r} at step {t} exceeds the divergence guard")
        rate = schedule(t)
        if adam is not None:
            deltas = adam.step(est.mean, rate)
        else:
            deltas = {name: rate * g for name, g in est.mean.items()}
        for name, delta in deltas.items():
            obj.set(name, obj.get(name) + delta)
        if (t + 1) % trace_every == 0 or t + 1 == steps:
            elbo_trace.append((t + 1, est.value, est.value_std_error))
            if record_params:
                nu_trace.append((t + 1, {n: obj.get(n).copy() for n in obj.params}))
    return nu_trace, elbo_trace


# ---------------------------------------------------------------------------
# reference objectives
# ---------------------------------------------------------------------------


def quadratic_objective(mu: float, K: int, mode: str = PATHWISE, target: float = 5.0, sign: float = 1.0) -> StochasticObjective:
    """``sign * (Z - target)^2`` with ``Z ~ N(mu, 1)``; only the mean is trained."""
    obj = StochasticObjective(Graph(), n_samples=K)
    z = obj.stochastic_node("z", [mu], [0.0], mode=mode)
    g = obj.graph
    sq = g.apply("square", g.apply("sub", z, g.add_constant([target])))
    obj.finish(g.apply("scalar_mul", sq, c=sign) if sign != 1.0 else sq)
    # unit scale is fixed
    del obj.params["z.log_std"]
    return obj


def gaussian_kl_objective(
    q_mean: float, q_log_std: float, K: int, mode: str = PATHWISE, observation: Optional[float] = None, noise_std: float = 1.0
) -> StochasticObjective:
    """``g = ln p(z) [+ ln N(x | z, noise_std^2)] - ln q(z)`` with ``p(z) = N(0, 1)``."""
    obj = StochasticObjective(Graph(), n_samples=K)
    z = obj.stochastic_node("z", [q_mean], [q_log_std], mode=mode)
    g = obj.graph
    node = obj.stochastic[-1]
    log_p = normal_logpdf(g, z, 0.0, 0.0, per_row=K > 1)
    if observation is not None:
        x = g.add_constant(np.full(g.shape(z), observation))
        log_p = g.apply("add", log_p, normal_logpdf(g, x, z, math.log(noise_std), per_row=K > 1))
    obj.finish(g.apply("sub", log_p, node.log_q))
    return obj
