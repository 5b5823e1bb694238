"""Exact steady-state analysis of stock-dependent admission policies.

The available-stock process under a stock-dependent policy is a birth-
death chain on {0, ..., c}: admissions at rate lambda*x_j move the stock
down, unit returns at rate (c-j)/d move it up.  Its stationary law
depends on the usage-duration distribution only through the mean d
(insensitivity), and solves

    pi_j * lambda * x_j = pi_{j-1} * (c - j + 1) / d,   j = 1..c.

Everything here is a pure function of immutable inputs.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .reward import RewardFunction

__all__ = [
    "ProblemInstance",
    "StockDependentPolicy",
    "SteadyState",
    "fluid_value",
    "steady_state",
    "erlang_stockout",
    "performance_loss",
    "varsigma_stats",
]


@dataclass(frozen=True)
class ProblemInstance:
    """Single-resource system: c units, Poisson(lam) arrivals, mean duration d."""

    c: int
    lam: float
    d: float
    g: RewardFunction

    def __post_init__(self):
        if self.c < 1 or self.c != int(self.c):
            raise ValueError("c must be a positive integer")
        if self.lam <= 0 or self.d <= 0:
            raise ValueError("lambda and d must be positive")

    @property
    def x_star(self) -> float:
        return self.c / (self.lam * self.d)

    @property
    def scarce(self) -> bool:
        return self.x_star < 1.0


@dataclass(frozen=True)
class StockDependentPolicy:
    """Admission probabilities x_1..x_c indexed by available stock."""

    x: np.ndarray

    def __post_init__(self):
        x = np.ascontiguousarray(self.x, dtype=float)
        if x.ndim != 1 or len(x) == 0:
            raise ValueError("policy must be a nonempty vector")
        if np.any(x < 0) or np.any(x > 1):
            raise ValueError("admission probabilities must lie in [0, 1]")
        object.__setattr__(self, "x", x)

    def __len__(self):
        return len(self.x)


@dataclass(frozen=True)
class SteadyState:
    """Stationary distribution and derived performance of one policy."""

    pi: np.ndarray
    reward: float
    loss: float
    pi0: float


def fluid_value(inst: ProblemInstance) -> float:
    """Fluid upper bound lambda * g(min(1, x*)) on any policy's reward rate."""
    if inst.x_star >= 1.0:
        warnings.warn(
            f"x* = {inst.x_star:.4g} >= 1: resource is not scarce, "
            "the fluid optimum admits everyone", stacklevel=2)
    return inst.lam * float(inst.g(min(1.0, inst.x_star)))


def log_stationary_weights(c: int, lam: float, d: float, x) -> np.ndarray:
    """Unnormalized log pi_0..pi_c (relative to pi_c) from the balance
    recursion w_{j-1} = w_j * lam*d*x_j / (c-j+1); x_j = 0 gives -inf."""
    x = np.asarray(x, dtype=float)
    if len(x) != c:
        raise ValueError(f"policy length {len(x)} != c = {c}")
    if c == 0:
        raise ValueError("c must be positive")
    j = np.arange(1, c + 1)
    with np.errstate(divide="ignore"):
        step = np.log(lam * d * x) - np.log(c - j + 1.0)
    logw = np.zeros(c + 1)
    logw[:c] = np.cumsum(step[::-1])[::-1]
    return logw


def stationary_distribution(c: int, lam: float, d: float, x: np.ndarray) -> np.ndarray:
    """Stationary pi_0..pi_c for admission vector x_1..x_c.

    Log-space downward recursion from the always-reachable full-stock
    state.  Working in logs keeps the recursion overflow-free at any
    scale, and x_j = 0 sends all lower states to exactly zero mass
    (they are transient).
    """
    logw = log_stationary_weights(c, lam, d, x)
    w = np.exp(logw - logw.max())
    return w / w.sum()


def steady_state(inst: ProblemInstance, policy: StockDependentPolicy) -> SteadyState:
    """Solve the balance equations and evaluate the long-run reward rate."""
    pi = stationary_distribution(inst.c, inst.lam, inst.d, policy.x)
    gx = inst.g(policy.x)
    reward = float(np.dot(pi[1:], inst.lam * gx))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        flu = fluid_value(inst)
    return SteadyState(pi=pi, reward=reward, loss=flu - reward, pi0=float(pi[0]))


def erlang_stockout(c: int, offered_load: float) -> float:
    """Erlang-B blocking probability B(c, a) for offered load a = lambda*x*d.

    Uses the numerically stable recursion B(0) = 1,
    B(n) = a B(n-1) / (n + a B(n-1)).
    """
    if c < 1:
        raise ValueError("c must be >= 1")
    a = float(offered_load)
    if a < 0:
        raise ValueError("offered load must be nonnegative")
    if a == 0.0:
        return 0.0
    B = 1.0
    for n in range(1, int(c) + 1):
        B = a * B / (n + a * B)
    return B


def performance_loss(inst: ProblemInstance, policy: StockDependentPolicy) -> float:
    """Fluid value minus the policy's long-run reward (always >= 0)."""
    return steady_state(inst, policy).loss


def varsigma_stats(ss: SteadyState, tau: int):
    """Mass ratios (sum_{1..tau} pi_j / pi_0, sum_{tau+1..c} pi_j / pi_0)."""
    c = len(ss.pi) - 1
    if not 0 <= tau <= c:
        raise ValueError("tau out of range")
    if ss.pi0 <= 0.0:
        return float("inf"), float("inf")
    lo = float(ss.pi[1:tau + 1].sum()) / ss.pi0
    hi = float(ss.pi[tau + 1:].sum()) / ss.pi0
    return lo, hi
