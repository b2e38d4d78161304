"""PPCA data generator, non-linear PCA and the amortised VAE as stochastic objectives.

Both deep models share the decoder

    h = relu(z beta0^T + alpha0),   mu_x = h beta1^T + alpha1,

with ``x ~ N(mu_x, sigma_x2 I)``, ``z ~ N(0, I)`` and N(0, I) priors on the
decoder weights. Non-linear PCA keeps a free Normal posterior per data row;
the VAE replaces those with an encoder network of the same shape.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .estimators import PATHWISE, StochasticObjective, maximize, normal_logpdf
from .expfam import DiagNormal, RngState
from .ndgraph import Graph, NodeId
from .schedules import ConstantSchedule

BAYES = "bayes"
POINT = "point"


class ModelError(ValueError):
    pass


def sample_ppca_dataset(d: int, k: int, n: int, sigma_x2: float, rng: RngState):
    """Draw ``(X, loadings, z)`` from the linear generative model.

    ``loadings`` is k x d with N(0, 1) entries and ``X = z loadings + noise``.
    """
    if not (d >= 1 and 1 <= k <= d and n >= 1 and sigma_x2 >= 0):
        raise ModelError("invalid dimensions or noise variance")
    loadings = rng.normal((k, d))
    z = rng.normal((n, k))
    noise = rng.normal((n, d))
    return z @ loadings + math.sqrt(sigma_x2) * noise, loadings, z


@dataclass(frozen=True)
class MlpSpec:
    """Layer widths ``[in, hidden..., out]`` and one activation per layer."""

    widths: Tuple[int, ...]
    activations: Tuple[str, ...]

    def __post_init__(self):
        if len(self.activations) != len(self.widths) - 1:
            raise ModelError("need one activation per layer")
        if any(a not in ("relu", "identity") for a in self.activations):
            raise ModelError("activations must be relu or identity")
        if any(w < 1 for w in self.widths):
            raise ModelError("layer widths must be positive")

    @classmethod
    def single_hidden(cls, n_in: int, hidden: int, n_out: int) -> "MlpSpec":
        return cls((n_in, hidden, n_out), ("relu", "identity"))


def mlp_forward(g: Graph, x: NodeId, spec: MlpSpec, weights: Sequence[Tuple[NodeId, NodeId]]) -> NodeId:
    h = x
    for (w, b), act in zip(weights, spec.activations):
        h = g.apply("affine", h, w, b)
        if act == "relu":
            h = g.apply("relu", h)
    return h


@dataclass
class InitConfig:
    """Starting values for the variational parameters."""

    weight_log_std: float = -5.0
    z_log_std: float = -1.0
    z_mean_scale: float = 0.01
    encoder_log_std: float = -5.0

    def weight_mean(self, rng: RngState, shape):
        fan_in = shape[-1] if len(shape) == 2 else 1
        if len(shape) == 1:
            return np.zeros(shape)
        return rng.normal(shape) / math.sqrt(fan_in)


def _layer(obj: StochasticObjective, name: str, shape, mode: str, init: InitConfig, rng: RngState, log_std: float):
    mean = init.weight_mean(rng, shape)
    if mode == BAYES:
        return obj.stochastic_node(name, mean, np.full(shape, log_std), mode=PATHWISE)
    if mode == POINT:
        return obj.parameter(name, mean)
    raise ModelError(f"unknown weight mode {mode!r}")


def _add_all(g: Graph, nodes: List[NodeId]) -> NodeId:
    total = nodes[0]
    for n in nodes[1:]:
        total = g.apply("add", total, n)
    return total


def _decoder(obj: StochasticObjective, k: int, hidden: int, d: int, mode: str, init: InitConfig, rng: RngState):
    """Decoder weights plus their prior and (Bayesian mode) entropy terms."""
    g = obj.graph
    names = [("alpha0", (hidden,)), ("beta0", (hidden, k)), ("alpha1", (d,)), ("beta1", (d, hidden))]
    w = {n: _layer(obj, n, s, mode, init, rng, init.weight_log_std) for n, s in names}
    priors = [normal_logpdf(g, w[n], 0.0, 0.0) for n, _ in names]
    entropies = [s.log_q for s in obj.stochastic if s.name in w]
    return w, priors, entropies


def _decode(g: Graph, z: NodeId, w: Dict[str, NodeId]) -> NodeId:
    h0 = g.apply("relu", g.apply("affine", z, w["beta0"], w["alpha0"]))
    return g.apply("affine", h0, w["beta1"], w["alpha1"])


@dataclass
class DeepModel:
    """A built objective plus the names needed to use it after training."""

    kind: str
    objective: StochasticObjective
    k: int
    hidden: int
    d: int
    sigma_x2: float
    weights: str
    data_node: NodeId
    n_total: int
    terms: Dict[str, NodeId] = field(default_factory=dict)

    # parameter lookup that works in both weight modes
    def weight(self, name: str) -> np.ndarray:
        obj = self.objective
        key = f"{name}.mean" if f"{name}.mean" in obj.params else name
        return obj.get(key)

    def decode(self, z) -> np.ndarray:
        """Decoder mean ``mu_x(z)`` using the variational means of the weights."""
        z = np.atleast_2d(np.asarray(z, dtype=np.float64))
        if z.shape[1] != self.k:
            raise ModelError(f"latent vectors must have {self.k} columns")
        h = np.maximum(z @ self.weight("beta0").T + self.weight("alpha0"), 0.0)
        return h @ self.weight("beta1").T + self.weight("alpha1")

    def encode_batch(self, x) -> Tuple[np.ndarray, np.ndarray]:
        """Means and scales of q(z | x) for each row of x (VAE only)."""
        if self.kind != "vae":
            raise ModelError("only the VAE has an encoder; use embedding() for non-linear PCA")
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        if x.shape[1] != self.d:
            raise ModelError(f"data rows must have {self.d} columns")
        h = np.maximum(x @ self.weight("theta0").T + self.weight("theta0p"), 0.0)
        out = h @ self.weight("theta1").T + self.weight("theta1p")
        return out[:, : self.k], softplus(out[:, self.k :])

    def encode(self, x) -> DiagNormal:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 1:
            raise ModelError("encode takes a single data row; use encode_batch for matrices")
        mean, scale = self.encode_batch(x[None, :])
        return DiagNormal.from_std(mean[0], scale[0])

    def embedding(self, x=None) -> np.ndarray:
        if self.kind == "vae":
            return self.encode_batch(x)[0]
        return self.objective.get("z.mean")


def softplus(x):
    return np.logaddexp(0.0, x)


def build_nonlinear_pca_elbo(
    data,
    k: int,
    hidden: int = 100,
    sigma_x2: float = 0.1,
    weights: str = BAYES,
    rng: Optional[RngState] = None,
    init: Optional[InitConfig] = None,
) -> DeepModel:
    """Single-sample reparameterised ELBO of the decoder-only model.

    Every data row has its own Normal posterior over z.
    """
    x = np.asarray(data, dtype=np.float64)
    if x.ndim != 2 or not np.all(np.isfinite(x)):
        raise ModelError("data must be a finite N x d matrix")
    rng = rng or RngState(0)
    init = init or InitConfig()
    n, d = x.shape
    obj = StochasticObjective(Graph())
    g = obj.graph
    x_node = g.add_input((n, d), name="x")
    obj.bindings[x_node] = x

    w, priors, entropies = _decoder(obj, k, hidden, d, weights, init, rng)
    z = obj.stochastic_node(
        "z", init.z_mean_scale * rng.normal((n, k)), np.full((n, k), init.z_log_std), mode=PATHWISE
    )
    z_node = obj.stochastic[-1]
    mu_x = _decode(g, z, w)

    log_lik = normal_logpdf(g, x_node, mu_x, 0.5 * math.log(sigma_x2))
    energy = _add_all(g, [log_lik, normal_logpdf(g, z, 0.0, 0.0)] + priors)
    entropy = _add_all(g, [z_node.log_q] + entropies)
    obj.finish(g.apply("sub", energy, entropy))
    return DeepModel("nlpca", obj, k, hidden, d, sigma_x2, weights, x_node, n,
                     terms={"log_lik": log_lik, "energy": energy, "entropy": entropy})


def build_vae_elbo(
    minibatch,
    n_total: int,
    k: int,
    hidden: int = 100,
    sigma_x2: float = 0.1,
    weights: str = BAYES,
    rng: Optional[RngState] = None,
    init: Optional[InitConfig] = None,
) -> DeepModel:
    """Amortised ELBO estimate on a minibatch, with the per-row terms scaled by N/M.

    The encoder outputs 2k columns: the first k are the posterior means, the
    last k pass through softplus to give the posterior scales.
    """
    x = np.asarray(minibatch, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 1:
        raise ModelError("minibatch must be a non-empty M x d matrix")
    m, d = x.shape
    if n_total < m:
        raise ModelError("N_total must be at least the minibatch size")
    rng = rng or RngState(0)
    init = init or InitConfig()
    obj = StochasticObjective(Graph())
    g = obj.graph
    x_node = g.add_input((m, d), name="x")
    obj.bindings[x_node] = x

    enc_shapes = [("theta0", (hidden, d)), ("theta0p", (hidden,)), ("theta1", (2 * k, hidden)), ("theta1p", (2 * k,))]
    th = {n: _layer(obj, n, s, weights, init, rng, init.encoder_log_std) for n, s in enc_shapes}
    h_z0 = g.apply("relu", g.apply("affine", x_node, th["theta0"], th["theta0p"]))
    h_z1 = g.apply("affine", h_z0, th["theta1"], th["theta1p"])
    select = np.eye(2 * k)
    h_mu = g.apply("matmul", h_z1, g.add_constant(select[:, :k]))
    h_raw = g.apply("matmul", h_z1, g.add_constant(select[:, k:]))
    h_sigma = g.apply("log", g.apply("add", g.apply("exp", h_raw), g.add_constant(np.ones((m, k)))))
    eps_z = obj.add_noise((m, k), name="z.eps")
    z = g.apply("add", h_mu, g.apply("mul", eps_z, h_sigma))

    w, priors, entropies = _decoder(obj, k, hidden, d, weights, init, rng)
    mu_x = _decode(g, z, w)

    log_lik = normal_logpdf(g, x_node, mu_x, 0.5 * math.log(sigma_x2))
    log_pz = normal_logpdf(g, z, 0.0, 0.0)
    log_qz = normal_logpdf(g, z, h_mu, g.apply("log", h_sigma))
    local = g.apply("sub", g.apply("add", log_lik, log_pz), log_qz)
    local_scaled = g.apply("scalar_mul", local, c=n_total / m)
    global_terms = _add_all(g, priors)
    if entropies:
        global_terms = g.apply("sub", global_terms, _add_all(g, entropies))
    obj.finish(g.apply("add", local_scaled, global_terms))
    return DeepModel("vae", obj, k, hidden, d, sigma_x2, weights, x_node, n_total,
                     terms={"local": local, "local_scaled": local_scaled, "global": global_terms})


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


def fit_nonlinear_pca(
    data,
    k: int = 2,
    hidden: int = 100,
    sigma_x2: float = 0.1,
    steps: int = 2000,
    rate: float = 1e-2,
    seed: int = 0,
    weights: str = BAYES,
    trace_every: int = 10,
    init: Optional[InitConfig] = None,
    mc_samples: int = 1,
):
    """Train the decoder-only model; ``mc_samples`` noise draws per gradient."""
    rng = RngState(seed)
    model = build_nonlinear_pca_elbo(data, k, hidden, sigma_x2, weights, rng, init)
    _, trace = maximize(model.objective, PATHWISE, ConstantSchedule(rate), steps, rng, K=mc_samples,
                        trace_every=trace_every, optimizer="adam", record_params=False)
    return model, trace


def fit_vae(
    data,
    k: int = 2,
    hidden: int = 100,
    sigma_x2: float = 0.1,
    minibatch: int = 100,
    steps: int = 2000,
    rate: float = 1e-3,
    seed: int = 0,
    weights: str = BAYES,
    trace_every: int = 10,
    init: Optional[InitConfig] = None,
    mc_samples: int = 1,
):
    """Train the amortised model with minibatches drawn without replacement per step."""
    x = np.asarray(data, dtype=np.float64)
    n = x.shape[0]
    if not 1 <= minibatch <= n:
        raise ModelError("minibatch size must lie in [1, N]")
    rng = RngState(seed)
    model = build_vae_elbo(x[:minibatch], n, k, hidden, sigma_x2, weights, rng, init)

    def next_batch(t, obj):
        rows = rng.generator.choice(n, size=minibatch, replace=False)
        obj.bindings[model.data_node] = x[rows]

    _, trace = maximize(model.objective, PATHWISE, ConstantSchedule(rate), steps, rng, K=mc_samples,
                        trace_every=trace_every, optimizer="adam", record_params=False, on_step=next_batch)
    return model, trace


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------

_NAME = re.compile(r"^[A-Za-z0-9_.\-]+$")


def save_tensors(path, tensors: Dict[str, np.ndarray]) -> None:
    """Write ``name<TAB>shape<TAB>values`` lines; shape as ``2x3``, values row-major."""
    lines = ["# varinf tensors v1"]
    for name in sorted(tensors):
        if not _NAME.match(name):
            raise ModelError(f"invalid tensor name {name!r}")
        t = np.asarray(tensors[name], dtype=np.float64)
        shape = "x".join(str(s) for s in t.shape) or "scalar"
        lines.append(f"{name}\t{shape}\t" + " ".join(repr(float(v)) for v in t.reshape(-1)))
    Path(path).write_text("\n".join(lines) + "\n")


def load_tensors(path) -> Dict[str, np.ndarray]:
    out = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line or line.startswith("#"):
            continue
        try:
            name, shape, values = line.split("\t")
        except ValueError:
            raise ModelError(f"line {lineno}: expected three tab-separated fields") from None
        dims = () if shape == "scalar" else tuple(int(s) for s in shape.split("x"))
        vals = np.array([float(v) for v in values.split()], dtype=np.float64)
        if vals.size != int(np.prod(dims)):
            raise ModelError(f"line {lineno}: {vals.size} values do not fill shape {dims}")
        out[name] = vals.reshape(dims)
    return out


def save_model(model: DeepModel, path) -> None:
    tensors = {f"param.{n}": model.objective.get(n) for n in model.objective.params}
    tensors["meta.dims"] = np.array([model.k, model.hidden, model.d, model.n_total], dtype=np.float64)
    tensors["meta.sigma_x2"] = np.array([model.sigma_x2])
    tensors[f"meta.kind.{model.kind}.{model.weights}"] = np.array([1.0])
    save_tensors(path, tensors)


def load_model(path, data=None) -> DeepModel:
    """Rebuild a saved model; ``data`` rebinds the observed input (defaults to zeros)."""
    t = load_tensors(path)
    kind_key = next(key for key in t if key.startswith("meta.kind."))
    _, _, kind, weights = kind_key.split(".")
    k, hidden, d, n_total = (int(v) for v in t["meta.dims"])
    sigma_x2 = float(t["meta.sigma_x2"][0])
    params = {key[len("param."):]: v for key, v in t.items() if key.startswith("param.")}
    if kind == "vae":
        rows = 1 if data is None else np.asarray(data).shape[0]
        x = np.zeros((rows, d)) if data is None else data
        model = build_vae_elbo(x, max(n_total, rows), k, hidden, sigma_x2, weights)
    else:
        n = params["z.mean"].shape[0]
        x = np.zeros((n, d)) if data is None else data
        model = build_nonlinear_pca_elbo(x, k, hidden, sigma_x2, weights)
    for name, value in params.items():
        model.objective.set(name, value)
    return model
