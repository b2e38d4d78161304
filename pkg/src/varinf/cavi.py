"""Mean-field variational inference for probabilistic PCA.

Model: loadings ``B`` (d x k), scores ``z_i ~ N(0, I_k)`` and
``x_i ~ N(B z_i, sigma_x2 I_d)``. The variational family factorises over the
d rows of ``B``, all sharing one k x k matrix, and over the N score vectors,
all sharing one covariance ``sigma_z``.

Covariance convention: ``sigma_beta`` is the precision-normalised matrix
``(sum E[z z^T] + sigma_x2 A)^-1`` that the coordinate updates produce; the
actual covariance of each loading row under q is ``sigma_x2 * sigma_beta``.

``A`` is the diagonal prior precision of the loading columns. With
``ard=True`` (default) its entries are ``d / |mu_beta[:, j]|^2``, re-evaluated
from the current loading means; with ``ard=False`` it is the identity, i.e.
the unit-variance prior of the generative process.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .expfam import LOG_2PI, RngState
from .schedules import RmSchedule

A_GUARD = 1e-12
JITTER = 1e-8


class CaviError(ValueError):
    pass


def spd_inverse(m: np.ndarray) -> np.ndarray:
    """Inverse of a symmetric positive-definite matrix via Cholesky.

    Retries once with ``1e-8 * I`` added before giving up.
    """
    m = 0.5 * (m + m.T)
    try:
        chol = np.linalg.cholesky(m)
    except np.linalg.LinAlgError:
        try:
            chol = np.linalg.cholesky(m + JITTER * np.eye(m.shape[0]))
        except np.linalg.LinAlgError as exc:
            raise CaviError("matrix is not positive definite") from exc
    inv_chol = np.linalg.inv(chol)
    out = inv_chol.T @ inv_chol
    return 0.5 * (out + out.T)


def spd_logdet(m: np.ndarray) -> float:
    try:
        chol = np.linalg.cholesky(0.5 * (m + m.T))
    except np.linalg.LinAlgError as exc:
        raise CaviError("covariance is not positive definite") from exc
    return 2.0 * float(np.sum(np.log(np.diag(chol))))


@dataclass
class PpcaModel:
    data: np.ndarray
    k: int
    sigma_x2: float = 0.1
    ard: bool = True
    center: bool = True
    mean: np.ndarray = field(init=False)

    def __post_init__(self):
        x = np.asarray(self.data, dtype=np.float64)
        if x.ndim != 2 or x.shape[0] < 1:
            raise CaviError("data must be a non-empty N x d matrix")
        if not 1 <= self.k <= x.shape[1]:
            raise CaviError(f"latent dimension must satisfy 1 <= k <= d, got k={self.k}, d={x.shape[1]}")
        if not self.sigma_x2 > 0:
            raise CaviError("sigma_x2 must be positive")
        self.mean = x.mean(axis=0) if self.center else np.zeros(x.shape[1])
        self.data = x - self.mean

    @property
    def n(self) -> int:
        return self.data.shape[0]

    @property
    def d(self) -> int:
        return self.data.shape[1]


@dataclass
class VariationalState:
    mu_beta: np.ndarray  # d x k
    sigma_beta: np.ndarray  # k x k
    mu_z: np.ndarray  # N x k
    sigma_z: np.ndarray  # k x k

    def copy(self) -> "VariationalState":
        return VariationalState(*(a.copy() for a in (self.mu_beta, self.sigma_beta, self.mu_z, self.sigma_z)))


def initial_state(model: PpcaModel, rng: RngState) -> VariationalState:
    k = model.k
    return VariationalState(
        mu_beta=0.1 * rng.normal((model.d, k)),
        sigma_beta=np.eye(k),
        mu_z=np.zeros((model.n, k)),
        sigma_z=np.eye(k),
    )


def a_diagonal(model: PpcaModel, mu_beta: np.ndarray) -> np.ndarray:
    if not model.ard:
        return np.ones(model.k)
    return model.d / np.maximum(np.sum(mu_beta**2, axis=0), A_GUARD)


def update_local(
    model: PpcaModel, state: VariationalState, rows: Optional[np.ndarray] = None
) -> Tuple[np.ndarray, np.ndarray]:
    """Closed-form score posteriors; returns ``(sigma_z, mu_z)``.

    ``rows`` restricts the means to a subset of the data (minibatches).
    """
    mu_beta = state.mu_beta
    if not np.all(np.isfinite(mu_beta)):
        raise CaviError("loading means are not finite")
    s2 = model.sigma_x2
    sigma_z = spd_inverse(np.eye(model.k) + mu_beta.T @ mu_beta / s2)
    x = model.data if rows is None else model.data[rows]
    mu_z = x @ mu_beta @ sigma_z / s2
    return sigma_z, mu_z


def expected_zz(sigma_z: np.ndarray, mu_z: np.ndarray) -> np.ndarray:
    """Sum over rows of E[z z^T]."""
    return mu_z.shape[0] * sigma_z + mu_z.T @ mu_z


def update_global(
    model: PpcaModel, state: VariationalState, a_diag: Optional[np.ndarray] = None
) -> Tuple[np.ndarray, np.ndarray]:
    """Closed-form loading posterior; returns ``(sigma_beta, mu_beta)``."""
    if not (np.all(np.isfinite(state.mu_z)) and np.all(np.isfinite(state.sigma_z))):
        raise CaviError("local parameters are not finite")
    a = a_diagonal(model, state.mu_beta) if a_diag is None else np.asarray(a_diag, dtype=np.float64)
    sigma_beta = spd_inverse(expected_zz(state.sigma_z, state.mu_z) + model.sigma_x2 * np.diag(a))
    mu_beta = model.data.T @ state.mu_z @ sigma_beta
    return sigma_beta, mu_beta


def elbo(model: PpcaModel, state: VariationalState) -> float:
    """Exact ELBO in closed form (Gaussian expectations plus entropies)."""
    n, d, k, s2 = model.n, model.d, model.k, model.sigma_x2
    x = model.data
    cov_beta = s2 * state.sigma_beta
    ezz = expected_zz(state.sigma_z, state.mu_z)
    ebb = state.mu_beta.T @ state.mu_beta + d * cov_beta
    a = a_diagonal(model, state.mu_beta)

    cross = np.sum((x @ state.mu_beta) * state.mu_z)
    log_lik = -0.5 * n * d * math.log(2 * math.pi * s2) - 0.5 / s2 * (
        np.sum(x * x) - 2.0 * cross + np.sum(ebb * ezz)
    )
    log_pz = -0.5 * n * k * LOG_2PI - 0.5 * np.trace(ezz)
    log_pb = 0.5 * d * np.sum(np.log(a)) - 0.5 * d * k * LOG_2PI - 0.5 * np.sum(a * np.diag(ebb))
    ent_z = n * (0.5 * k * (LOG_2PI + 1.0) + 0.5 * spd_logdet(state.sigma_z))
    ent_b = d * (0.5 * k * (LOG_2PI + 1.0) + 0.5 * spd_logdet(cov_beta))
    return float(log_lik + log_pz + log_pb + ent_z + ent_b)


def elbo_fixed_loadings(model: PpcaModel, loadings: np.ndarray, sigma_z: np.ndarray, mu_z: np.ndarray) -> float:
    """ELBO of the model with the loadings held at a known value.

    Only the scores are latent, so this bounds
    :func:`log_evidence_fixed_loadings` from below.
    """
    n, d, k, s2 = model.n, model.d, model.k, model.sigma_x2
    x = model.data
    ezz = expected_zz(sigma_z, mu_z)
    btb = loadings.T @ loadings
    cross = np.sum((x @ loadings) * mu_z)
    log_lik = -0.5 * n * d * math.log(2 * math.pi * s2) - 0.5 / s2 * (np.sum(x * x) - 2.0 * cross + np.sum(btb * ezz))
    log_pz = -0.5 * n * k * LOG_2PI - 0.5 * np.trace(ezz)
    ent_z = n * (0.5 * k * (LOG_2PI + 1.0) + 0.5 * spd_logdet(sigma_z))
    return float(log_lik + log_pz + ent_z)


def log_evidence_fixed_loadings(model: PpcaModel, loadings: np.ndarray) -> float:
    """``sum_i log N(x_i | 0, B B^T + sigma_x2 I)``."""
    d = model.d
    cov = loadings @ loadings.T + model.sigma_x2 * np.eye(d)
    chol = np.linalg.cholesky(cov)
    sol = np.linalg.solve(chol, model.data.T)
    logdet = 2.0 * np.sum(np.log(np.diag(chol)))
    return float(-0.5 * np.sum(sol * sol) - 0.5 * model.n * (d * LOG_2PI + logdet))


def cavi_sweep(model: PpcaModel, state: VariationalState) -> VariationalState:
    sigma_z, mu_z = update_local(model, state)
    state = replace(state, sigma_z=sigma_z, mu_z=mu_z)
    sigma_beta, mu_beta = update_global(model, state)
    return replace(state, sigma_beta=sigma_beta, mu_beta=mu_beta)


def cavi_fit(
    model: PpcaModel,
    init: Optional[VariationalState] = None,
    max_sweeps: int = 500,
    rel_tol: float = 1e-9,
    rng: Optional[RngState] = None,
) -> Tuple[VariationalState, List[float]]:
    """Alternate local and global updates; one trace entry per sweep."""
    if max_sweeps < 1:
        raise CaviError("max_sweeps must be at least 1")
    state = init.copy() if init is not None else initial_state(model, rng or RngState(0))
    prev = elbo(model, state)
    trace: List[float] = []
    for _ in range(max_sweeps):
        state = cavi_sweep(model, state)
        cur = elbo(model, state)
        trace.append(cur)
        if abs(cur - prev) < rel_tol * abs(prev):
            break
        prev = cur
    return state, trace


# ---------------------------------------------------------------------------
# stochastic variational inference
# ---------------------------------------------------------------------------


def natural_estimate(
    model: PpcaModel, state: VariationalState, rows: Sequence[int]
) -> Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Minibatch estimate of the loading posterior's natural parameters.

    Returns ``(precision, shift, sigma_z, mu_z_rows)`` where the target
    covariance is ``precision^-1`` and the target mean is
    ``shift @ precision^-1``; the local parameters are those of the rows.
    """
    rows = np.asarray(rows, dtype=np.int64)
    if rows.size == 0:
        raise CaviError("empty minibatch")
    scale = model.n / rows.size
    sigma_z, mu_z = update_local(model, state, rows)
    a = a_diagonal(model, state.mu_beta)
    precision = scale * expected_zz(sigma_z, mu_z) + model.sigma_x2 * np.diag(a)
    shift = scale * model.data[rows].T @ mu_z
    return precision, shift, sigma_z, mu_z


def svi_step(model: PpcaModel, state: VariationalState, rows: Sequence[int], rho: float) -> VariationalState:
    """Interpolate the loading posterior's natural parameters toward a minibatch target."""
    rows = np.asarray(rows, dtype=np.int64)
    if rows.size == 0:
        raise CaviError("empty minibatch")
    if not 1 <= rows.size <= model.n:
        raise CaviError("minibatch size must lie in [1, N]")
    if not 0.0 < rho <= 1.0:
        raise CaviError(f"step size must lie in (0, 1], got {rho}")
    precision_hat, shift_hat, sigma_z, mu_z_rows = natural_estimate(model, state, rows)
    old_precision = spd_inverse(state.sigma_beta)
    precision = (1.0 - rho) * old_precision + rho * precision_hat
    sigma_beta = spd_inverse(precision)
    shift = (1.0 - rho) * state.mu_beta @ old_precision + rho * shift_hat
    mu_z = state.mu_z.copy()
    mu_z[rows] = mu_z_rows
    return VariationalState(mu_beta=shift @ sigma_beta, sigma_beta=sigma_beta, mu_z=mu_z, sigma_z=sigma_z)


def with_optimal_locals(model: PpcaModel, state: VariationalState) -> VariationalState:
    sigma_z, mu_z = update_local(model, state)
    return replace(state, sigma_z=sigma_z, mu_z=mu_z)


def svi_fit(
    model: PpcaModel,
    init: Optional[VariationalState],
    schedule: RmSchedule,
    minibatch: int,
    steps: int,
    rng: RngState,
    trace_every: int = 1,
) -> Tuple[VariationalState, List[Tuple[int, float]]]:
    """Stochastic VI with uniform-with-replacement minibatches.

    The trace holds ``(step, elbo)`` pairs, where the ELBO is evaluated with
    every local parameter at its optimum for the current global parameters.
    The returned state carries those optimal locals.
    """
    if steps < 1:
        raise CaviError("steps must be at least 1")
    if not 1 <= minibatch <= model.n:
        raise CaviError("minibatch size must lie in [1, N]")
    if schedule(0) > 1.0:
        raise CaviError(f"first step size {schedule(0)!r} exceeds 1; use tau >= 1")
    state = init.copy() if init is not None else initial_state(model, rng)
    trace: List[Tuple[int, float]] = []
    for t in range(steps):
        rows = rng.integers(model.n, minibatch)
        state = svi_step(model, state, rows, schedule(t))
        if (t + 1) % trace_every == 0 or t + 1 == steps:
            trace.append((t + 1, elbo(model, with_optimal_locals(model, state))))
    return with_optimal_locals(model, state), trace
