"""Linear-beta diffusion schedule and the forward/reverse step algebra.

Steps are indexed t = 1..T. alpha_bar at t=0 is 1 by convention, which makes
the final reverse step recover x0 exactly when given the exact noise.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .volume import Volume3

SIGMA_RULES = ("sqrt_beta", "posterior")


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    """Per-step arrays, entry i corresponding to step t = i + 1."""

    T: int
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    gamma: np.ndarray  # sqrt(1 - alpha_bar)
    sigma: np.ndarray
    sigma_rule: str

    def _check_t(self, t: int) -> int:
        t = int(t)
        if t < 1 or t > self.T:
            raise ValueError(f"step {t} outside schedule range 1..{self.T}")
        return t

    def beta_at(self, t: int) -> float:
        return float(self.beta[self._check_t(t) - 1])

    def alpha_at(self, t: int) -> float:
        return float(self.alpha[self._check_t(t) - 1])

    def alpha_bar_at(self, t: int) -> float:
        return float(self.alpha_bar[self._check_t(t) - 1])

    def alpha_bar_prev(self, t: int) -> float:
        t = self._check_t(t)
        return 1.0 if t == 1 else float(self.alpha_bar[t - 2])

    def gamma_at(self, t: int) -> float:
        return float(self.gamma[self._check_t(t) - 1])

    def sigma_at(self, t: int) -> float:
        return float(self.sigma[self._check_t(t) - 1])


def build_schedule(T: int, beta_start: float = 1e-4, beta_end: float = 2e-2,
                   sigma_rule: str = "sqrt_beta") -> NoiseSchedule:
    """Linearly interpolated betas over T steps."""
    T = int(T)
    if T < 1:
        raise ValueError("T must be >= 1")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ValueError(f"betas must satisfy 0 < start <= end < 1, got {beta_start}, {beta_end}")
    if sigma_rule not in SIGMA_RULES:
        raise ValueError(f"sigma_rule must be one of {SIGMA_RULES}")
    beta = np.linspace(beta_start, beta_end, T)
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    gamma = np.sqrt(1.0 - alpha_bar)
    if sigma_rule == "sqrt_beta":
        sigma = np.sqrt(beta)
    else:
        prev = np.concatenate([[1.0], alpha_bar[:-1]])
        sigma = np.sqrt((1.0 - prev) / (1.0 - alpha_bar) * beta)
    for arr in (beta, alpha, alpha_bar, gamma, sigma):
        arr.setflags(write=False)
    return NoiseSchedule(T, beta, alpha, alpha_bar, gamma, sigma, sigma_rule)


def _unwrap(x):
    return (x.data, x) if isinstance(x, Volume3) else (np.asarray(x), None)


def _rewrap(data, ref):
    return ref.with_data(data) if ref is not None else data


def _pair(x, other, name: str):
    xd, ref = _unwrap(x)
    od, _ = _unwrap(other)
    if od.shape != xd.shape:
        raise ValueError(f"{name} shape {od.shape} does not match volume shape {xd.shape}")
    return xd, od, ref


def forward_step(x_prev, t: int, eps, sched: NoiseSchedule):
    """One forward noising step: sqrt(1-beta_t) x_{t-1} + sqrt(beta_t) eps."""
    xd, ed, ref = _pair(x_prev, eps, "eps")
    b = sched.beta_at(t)
    out = np.sqrt(1.0 - b) * xd + np.sqrt(b) * ed
    return _rewrap(out, ref)


def forward_marginal(x0, t: int, eps, sched: NoiseSchedule):
    """Jump straight to step t: sqrt(alpha_bar_t) x0 + gamma_t eps."""
    xd, ed, ref = _pair(x0, eps, "eps")
    out = np.sqrt(sched.alpha_bar_at(t)) * xd + sched.gamma_at(t) * ed
    return _rewrap(out, ref)


def reverse_step(x_t, eps_hat, t: int, z, sched: NoiseSchedule):
    """One reverse update given a noise estimate; z is the injected noise
    (pass zeros for the mean-only update)."""
    xd, ed, ref = _pair(x_t, eps_hat, "eps_hat")
    zd, _ = _unwrap(z)
    if zd.shape != xd.shape:
        raise ValueError(f"z shape {zd.shape} does not match volume shape {xd.shape}")
    a = sched.alpha_at(t)
    abar = sched.alpha_bar_at(t)
    mean = (xd - (1.0 - a) / np.sqrt(1.0 - abar) * ed) / np.sqrt(a)
    out = mean + sched.sigma_at(t) * zd
    return _rewrap(out, ref)
