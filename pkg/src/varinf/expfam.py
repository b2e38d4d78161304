"""Exponential-family distributions, with the diagonal Normal fully supported."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Tuple

import numpy as np

LOG_2PI = math.log(2.0 * math.pi)


class DimensionError(ValueError):
    pass


class RngState:
    """Seeded counter-based generator (Philox) owned by a single caller."""

    def __init__(self, seed: int = 0):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.generator = np.random.Generator(np.random.Philox(self.seed))

    def normal(self, size) -> np.ndarray:
        return self.generator.standard_normal(size)

    def integers(self, high: int, size) -> np.ndarray:
        return self.generator.integers(0, high, size=size)

    def spawn(self, n: int) -> list:
        """Independent child streams, e.g. one per worker thread."""
        seeds = self.generator.integers(0, 2**63 - 1, size=n)
        return [RngState(int(s)) for s in seeds]


@dataclass(frozen=True)
class ExpFamSpec:
    """Density ``h(x) + eta . t(x) - a(eta)`` in log space."""

    family: str
    dim: int
    log_base_measure: Callable[[np.ndarray], float]
    sufficient_statistics: Callable[[np.ndarray], np.ndarray]
    log_normalizer: Callable[[np.ndarray], float]
    natural: np.ndarray

    def log_prob(self, x) -> float:
        x = np.asarray(x, dtype=np.float64)
        t = self.sufficient_statistics(x)
        return float(self.log_base_measure(x) + self.natural @ t - self.log_normalizer(self.natural))


def _check_dim(dim: int, x: np.ndarray) -> None:
    if x.shape[-1] != dim:
        raise DimensionError(f"expected dimension {dim}, got {x.shape[-1]}")


def sufficient_statistics(x) -> Tuple[np.ndarray, np.ndarray]:
    x = np.asarray(x, dtype=np.float64)
    return x, x * x


def diag_normal_log_normalizer(eta: np.ndarray) -> float:
    """a(eta) for the stacked natural parameters ``[eta1..., eta2...]``."""
    eta1, eta2 = np.split(np.asarray(eta, dtype=np.float64), 2)
    if np.any(eta2 >= 0):
        raise ValueError("second natural parameter must be negative")
    return float(np.sum(-eta1**2 / (4.0 * eta2) - 0.5 * np.log(-2.0 * eta2)))


@dataclass(frozen=True)
class DiagNormal:
    mean: np.ndarray
    log_std: np.ndarray

    def __post_init__(self):
        mean = np.atleast_1d(np.asarray(self.mean, dtype=np.float64))
        log_std = np.broadcast_to(np.asarray(self.log_std, dtype=np.float64), mean.shape).copy()
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "log_std", log_std)

    @classmethod
    def from_std(cls, mean, std) -> "DiagNormal":
        return cls(mean, np.log(std))

    @classmethod
    def from_natural(cls, eta1, eta2) -> "DiagNormal":
        eta1 = np.asarray(eta1, dtype=np.float64)
        eta2 = np.asarray(eta2, dtype=np.float64)
        var = -0.5 / eta2
        return cls(var * eta1, 0.5 * np.log(var))

    @property
    def dim(self) -> int:
        return self.mean.shape[0]

    @property
    def std(self) -> np.ndarray:
        return np.exp(self.log_std)

    @property
    def var(self) -> np.ndarray:
        return np.exp(2.0 * self.log_std)

    def natural_params(self) -> Tuple[np.ndarray, np.ndarray]:
        prec = np.exp(-2.0 * self.log_std)
        return prec * self.mean, -0.5 * prec

    def as_expfam(self) -> ExpFamSpec:
        d = self.dim
        return ExpFamSpec(
            family="diag_normal",
            dim=d,
            log_base_measure=lambda x: -0.5 * d * LOG_2PI,
            sufficient_statistics=lambda x: np.concatenate(sufficient_statistics(x)),
            log_normalizer=diag_normal_log_normalizer,
            natural=np.concatenate(self.natural_params()),
        )

    def log_prob(self, x) -> float:
        x = np.asarray(x, dtype=np.float64)
        _check_dim(self.dim, x)
        z = (x - self.mean) * np.exp(-self.log_std)
        return float(np.sum(-0.5 * z * z - self.log_std - 0.5 * LOG_2PI))

    def sample(self, rng: RngState, n: int) -> np.ndarray:
        eps = rng.normal((n, self.dim))
        return self.reparam_sample(eps)

    def reparam_sample(self, eps) -> np.ndarray:
        eps = np.asarray(eps, dtype=np.float64)
        if eps.ndim != 2 or eps.shape[1] != self.dim:
            raise DimensionError(f"noise must have shape [n x {self.dim}], got {list(eps.shape)}")
        return self.mean + self.std * eps


def kl_diag_normal(q: DiagNormal, p: DiagNormal) -> float:
    if q.dim != p.dim:
        raise DimensionError(f"dimension mismatch: {q.dim} vs {p.dim}")
    ratio = np.exp(2.0 * (q.log_std - p.log_std))
    maha = (q.mean - p.mean) ** 2 * np.exp(-2.0 * p.log_std)
    return float(0.5 * np.sum(ratio + maha - 1.0) - np.sum(q.log_std - p.log_std))
