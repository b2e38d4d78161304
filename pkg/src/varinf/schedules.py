"""Step-size rules for stochastic optimisation."""

from __future__ import annotations

from dataclasses import dataclass


@dataclass(frozen=True)
class RmSchedule:
    """Robbins-Monro step sizes ``rho_t = (tau + t) ** -kappa``, t = 0, 1, ...

    With kappa in (0.5, 1] the steps sum to infinity while their squares
    stay summable.
    """

    tau: float = 1.0
    kappa: float = 0.75

    def __post_init__(self):
        if not 0.5 < self.kappa <= 1.0:
            raise ValueError(f"kappa must lie in (0.5, 1], got {self.kappa} (violates Robbins-Monro)")
        if self.tau < 0:
            raise ValueError(f"tau must be nonnegative, got {self.tau}")
        if self.tau == 0:
            # rho_0 would be infinite
            raise ValueError("tau = 0 gives an infinite first step")

    def __call__(self, t: int) -> float:
        return float((self.tau + t) ** (-self.kappa))


@dataclass(frozen=True)
class ConstantSchedule:
    rate: float

    def __post_init__(self):
        if self.rate <= 0:
            raise ValueError("rate must be positive")

    def __call__(self, t: int) -> float:
        return self.rate
