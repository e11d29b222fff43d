"""Closed-form diffusion mathematics on float64 numpy arrays.

Conventions: steps are 1-indexed (t = 1..T). ``alpha_bar_prev(t)`` is
``alpha_bar[t-1]`` with ``alpha_bar[0] = 1``. The noise level fed to the
network is ``sqrt(alpha_bar)``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable

import numpy as np



class NumericError(RuntimeError):
    """A loss, gradient or sampler state became non-finite; ``dump`` holds context."""

    def __init__(self, message, dump=None):
        super().__init__(message)
        self.dump = dump or {}

@dataclass(frozen=True)
class NoiseSchedule:
    """Per-step constants of a discrete variance-preserving diffusion.

    Arrays are stored 0-indexed; use the accessor methods for 1-indexed steps.
    ``levels`` has T+1 entries, ``levels[0] == 1``.
    """

    beta: np.ndarray
    alpha: np.ndarray = field(init=False)
    alpha_bar: np.ndarray = field(init=False)
    sigma: np.ndarray = field(init=False)
    levels: np.ndarray = field(init=False)

    def __post_init__(self):
        beta = np.asarray(self.beta, dtype=np.float64)
        if beta.ndim != 1 or beta.size < 1:
            raise ValueError("beta must be a non-empty 1-d array")
        if not np.all(np.isfinite(beta)) or np.any(beta <= 0) or np.any(beta >= 1):
            raise ValueError("every beta must lie strictly inside (0, 1)")
        alpha = 1.0 - beta
        alpha_bar = np.cumprod(alpha)
        levels = np.concatenate([[1.0], np.sqrt(alpha_bar)])
        for name, value in (
            ("beta", beta),
            ("alpha", alpha),
            ("alpha_bar", alpha_bar),
            ("sigma", np.sqrt(beta)),
            ("levels", levels),
        ):
            value.setflags(write=False)
            object.__setattr__(self, name, value)

    @classmethod
    def from_betas(cls, betas) -> "NoiseSchedule":
        return cls(np.asarray(betas, dtype=np.float64))

    @property
    def T(self) -> int:
        return int(self.beta.size)

    def check_step(self, t: int) -> int:
        if isinstance(t, (bool, np.bool_)) or int(t) != t or not 1 <= t <= self.T:
            raise ValueError(f"step {t!r} outside 1..{self.T}")
        return int(t)

    def beta_at(self, t: int) -> float:
        return float(self.beta[self.check_step(t) - 1])

    def alpha_at(self, t: int) -> float:
        return float(self.alpha[self.check_step(t) - 1])

    def alpha_bar_at(self, t: int) -> float:
        return float(self.alpha_bar[self.check_step(t) - 1])

    def alpha_bar_prev(self, t: int) -> float:
        t = self.check_step(t)
        return 1.0 if t == 1 else float(self.alpha_bar[t - 2])

    def sigma_at(self, t: int) -> float:
        return float(self.sigma[self.check_step(t) - 1])

    def table(self) -> list[dict]:
        """Rows of (t, beta, alpha, alpha_bar, sigma, l) for t = 0..T."""
        rows = [{"t": 0, "beta": None, "alpha": None, "alpha_bar": 1.0, "sigma": None, "l": 1.0}]
        for i in range(self.T):
            rows.append(
                {
                    "t": i + 1,
                    "beta": float(self.beta[i]),
                    "alpha": float(self.alpha[i]),
                    "alpha_bar": float(self.alpha_bar[i]),
                    "sigma": float(self.sigma[i]),
                    "l": float(self.levels[i + 1]),
                }
            )
        return rows

    def to_json(self) -> str:
        return json.dumps(self.table(), indent=1)


def make_schedule(T: int = 60, base: float = 0.02, lo: float = 1e-5, hi: float = 0.4) -> NoiseSchedule:
    """``beta_t = base + g_t`` with ``g`` geometric from ``lo`` to ``hi`` over T steps."""
    if int(T) != T or T < 2:
        raise ValueError(f"T must be an integer >= 2, got {T!r}")
    if not lo > 0:
        raise ValueError(f"lo must be positive, got {lo!r}")
    if not hi > lo:
        raise ValueError(f"need lo < hi, got lo={lo!r} hi={hi!r}")
    if not base >= 0:
        raise ValueError(f"base must be non-negative, got {base!r}")
    if base + hi >= 1:
        raise ValueError(f"base + hi must be < 1, got {base + hi!r}")
    # geomspace pins both endpoints exactly
    increments = np.geomspace(lo, hi, int(T))
    return NoiseSchedule(base + increments)


def _as_array(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


def _check_level(alpha_bar: float, name: str = "alpha_bar") -> float:
    alpha_bar = float(alpha_bar)
    if not (0.0 < alpha_bar <= 1.0):
        raise ValueError(f"{name} must lie in (0, 1], got {alpha_bar!r}")
    return alpha_bar


def _same_shape(a: np.ndarray, b: np.ndarray, what: str):
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch for {what}: {a.shape} vs {b.shape}")


def forward_diffuse(y0, alpha_bar: float, eps) -> np.ndarray:
    """Sample ``y_t`` directly from ``y_0`` at cumulative signal ``alpha_bar``."""
    y0, eps = _as_array(y0), _as_array(eps)
    _same_shape(y0, eps, "y0/eps")
    alpha_bar = _check_level(alpha_bar)
    return np.sqrt(alpha_bar) * y0 + np.sqrt(1.0 - alpha_bar) * eps


def recover_y0(y_t, eps_hat, alpha_bar: float) -> np.ndarray:
    """Invert the forward sample given a noise estimate."""
    y_t, eps_hat = _as_array(y_t), _as_array(eps_hat)
    _same_shape(y_t, eps_hat, "y_t/eps_hat")
    alpha_bar = _check_level(alpha_bar)
    return (y_t - np.sqrt(1.0 - alpha_bar) * eps_hat) / np.sqrt(alpha_bar)


def posterior_mean_eps(y_t, eps, schedule: NoiseSchedule, t: int) -> np.ndarray:
    """Forward-process posterior mean written through the noise that produced ``y_t``."""
    y_t, eps = _as_array(y_t), _as_array(eps)
    _same_shape(y_t, eps, "y_t/eps")
    beta = schedule.beta_at(t)
    coef = beta / np.sqrt(1.0 - schedule.alpha_bar_at(t))
    return (y_t - coef * eps) / np.sqrt(schedule.alpha_at(t))


def reverse_step_original(y_t, eps_hat, z, schedule: NoiseSchedule, t: int, sigma_fn: Callable | None = None) -> np.ndarray:
    """Ancestral step: posterior-mean estimate plus ``sigma_t z``.

    ``sigma_fn(schedule, t)`` overrides the default ``sqrt(beta_t)``.
    """
    z = _as_array(z)
    mean = posterior_mean_eps(y_t, eps_hat, schedule, t)
    _same_shape(mean, z, "y_t/z")
    sigma = schedule.sigma_at(t) if sigma_fn is None else float(sigma_fn(schedule, t))
    return mean + sigma * z


def modified_step_from_levels(y_t, eps_hat, z, alpha_bar: float, alpha_bar_prev: float) -> np.ndarray:
    """Estimate ``y_0`` then renoise it to ``alpha_bar_prev``; schedule-free form."""
    y_t, eps_hat, z = _as_array(y_t), _as_array(eps_hat), _as_array(z)
    _same_shape(y_t, eps_hat, "y_t/eps_hat")
    _same_shape(y_t, z, "y_t/z")
    alpha_bar = _check_level(alpha_bar)
    alpha_bar_prev = _check_level(alpha_bar_prev, "alpha_bar_prev")
    if alpha_bar_prev < alpha_bar:
        raise ValueError("alpha_bar_prev must not be below alpha_bar")
    alpha = alpha_bar / alpha_bar_prev
    return (y_t - np.sqrt(1.0 - alpha_bar) * eps_hat) / np.sqrt(alpha) + np.sqrt(1.0 - alpha_bar_prev) * z


def reverse_step_modified(y_t, eps_hat, z, schedule: NoiseSchedule, t: int) -> np.ndarray:
    y_t, eps_hat, z = _as_array(y_t), _as_array(eps_hat), _as_array(z)
    _same_shape(y_t, eps_hat, "y_t/eps_hat")
    _same_shape(y_t, z, "y_t/z")
    alpha_bar = schedule.alpha_bar_at(t)
    alpha = schedule.alpha_at(t)
    return (y_t - np.sqrt(1.0 - alpha_bar) * eps_hat) / np.sqrt(alpha) + np.sqrt(1.0 - schedule.alpha_bar_prev(t)) * z


def renoise(y0_hat, z, alpha_bar_prev: float) -> np.ndarray:
    """Place an estimate of ``y_0`` back at level ``alpha_bar_prev``."""
    alpha_bar_prev = _check_level(alpha_bar_prev, "alpha_bar_prev")
    return np.sqrt(alpha_bar_prev) * _as_array(y0_hat) + np.sqrt(1.0 - alpha_bar_prev) * _as_array(z)


def sample_noise_level(schedule: NoiseSchedule, t: int, rng: np.random.Generator) -> float:
    """Draw a continuous ``sqrt(alpha_bar)`` between the step-t and step-(t-1) levels."""
    t = schedule.check_step(t)
    upper = float(schedule.levels[t - 1])
    lower = float(schedule.levels[t])
    if upper == lower:
        return upper
    # uniform on (lower, upper]
    return upper - (upper - lower) * rng.random()


def step_kl_diagnostic(y0, y_t, mu_theta, schedule: NoiseSchedule, t: int) -> float:
    """Per-step KL between the forward posterior and a model mean with shared variance."""
    y0, y_t, mu_theta = _as_array(y0), _as_array(y_t), _as_array(mu_theta)
    _same_shape(y0, y_t, "y0/y_t")
    _same_shape(y_t, mu_theta, "y_t/mu_theta")
    for name, arr in (("y0", y0), ("y_t", y_t), ("mu_theta", mu_theta)):
        if not np.all(np.isfinite(arr)):
            raise ValueError(f"{name} contains non-finite values")
    alpha_bar = schedule.alpha_bar_at(t)
    eps = (y_t - np.sqrt(alpha_bar) * y0) / np.sqrt(1.0 - alpha_bar)
    mu_tilde = posterior_mean_eps(y_t, eps, schedule, t)
    sigma2 = schedule.sigma_at(t) ** 2
    return float(np.sum((mu_tilde - mu_theta) ** 2) / (2.0 * sigma2))
