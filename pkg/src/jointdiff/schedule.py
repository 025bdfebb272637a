"""Discrete diffusion schedules and the forward/reverse process primitives.

The forward process is

    q(x_t | x_0) = N(x_t; sqrt(ab_t) x_0, (1 - ab_t) I),   ab_t = prod_{s<=t} (1 - beta_s)

with ab indexed from 0 so that ab_0 = 1 and t = 0 always means "clean input",
for training and sampling alike. All functions are pure: randomness enters only
through explicit noise arguments, and they accept torch tensors or numpy arrays
interchangeably (coefficients are cast to the input's dtype).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .errors import ConfigError, DimensionError, ScheduleError

SCHEDULE_KINDS = ("linear",)


@dataclass(frozen=True)
class NoiseSchedule:
    """Tables {beta_t, alpha_t, ab_t} for t = 0..T, plus the build recipe.

    ``alpha_bars`` has T+1 entries with alpha_bars[0] == 1; ``betas`` and
    ``alphas`` have T entries for t = 1..T. Checkpoints serialize only the
    recipe (T, beta_start, beta_end, kind), never the tables.
    """

    T: int
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray
    beta_start: float
    beta_end: float
    kind: str

    def recipe(self) -> dict:
        return {
            "T": self.T,
            "beta_start": self.beta_start,
            "beta_end": self.beta_end,
            "kind": self.kind,
        }


def make_schedule(
    T: int, beta_start: float = 1e-4, beta_end: float = 0.2, kind: str = "linear"
) -> NoiseSchedule:
    """Build a schedule with beta interpolated from beta_start to beta_end.

    Raises ConfigError for T < 1, betas outside (0, 1), beta_start > beta_end,
    or an unknown kind.
    """
    if not isinstance(T, (int, np.integer)) or T < 1:
        raise ConfigError(f"T must be a positive integer, got {T!r}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ConfigError(
            f"betas must satisfy 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})"
        )
    if kind not in SCHEDULE_KINDS:
        raise ConfigError(f"unknown schedule kind {kind!r}, expected one of {SCHEDULE_KINDS}")

    if T == 1:
        betas = np.array([beta_start], dtype=np.float64)
    else:
        betas = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    alphas = 1.0 - betas
    alpha_bars = np.concatenate([[1.0], np.cumprod(alphas)])
    return NoiseSchedule(
        T=int(T),
        betas=betas,
        alphas=alphas,
        alpha_bars=alpha_bars,
        beta_start=float(beta_start),
        beta_end=float(beta_end),
        kind=kind,
    )


def _check_t(schedule: NoiseSchedule, t) -> None:
    t_arr = np.asarray(t.cpu() if isinstance(t, torch.Tensor) else t)
    if t_arr.size == 0:
        raise ScheduleError("empty timestep array")
    if t_arr.min() < 0 or t_arr.max() > schedule.T:
        raise ScheduleError(f"timestep out of range [0, {schedule.T}]: {t_arr.min()}..{t_arr.max()}")


def _coeff(values: np.ndarray, t, ref):
    """Look up per-sample coefficients and shape them to broadcast over ref.

    ``t`` may be a python int, a numpy array, or a torch tensor of shape (B,)
    matching ref's leading dimension. The result carries ref's dtype (and
    device, for torch) so mixed-precision promotion never occurs.
    """
    if isinstance(ref, torch.Tensor):
        if isinstance(t, torch.Tensor):
            idx = t.long().cpu().numpy()
        else:
            idx = np.asarray(t)
        picked = values[idx]
        out = torch.as_tensor(picked, dtype=ref.dtype, device=ref.device)
        if out.ndim == 0:
            return out
        return out.reshape((-1,) + (1,) * (ref.ndim - 1))
    idx = np.asarray(t)
    picked = values[idx].astype(ref.dtype if hasattr(ref, "dtype") else np.float64)
    if picked.ndim == 0:
        return picked
    return picked.reshape((-1,) + (1,) * (np.ndim(ref) - 1))


def add_noise(x0, t, eps, schedule: NoiseSchedule):
    """sqrt(ab_t) * x0 + sqrt(1 - ab_t) * eps; t = 0 returns x0 exactly."""
    if tuple(np.shape(x0)) != tuple(np.shape(eps)):
        raise DimensionError(f"x0 shape {np.shape(x0)} != eps shape {np.shape(eps)}")
    _check_t(schedule, t)
    ab = _coeff(schedule.alpha_bars, t, x0)
    if isinstance(x0, torch.Tensor):
        return torch.sqrt(ab) * x0 + torch.sqrt(1.0 - ab) * eps
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps


def predict_x0(z_t, eps_hat, t, schedule: NoiseSchedule):
    """Invert add_noise given a noise estimate: (z_t - sqrt(1-ab_t) eps) / sqrt(ab_t)."""
    if tuple(np.shape(z_t)) != tuple(np.shape(eps_hat)):
        raise DimensionError(f"z_t shape {np.shape(z_t)} != eps_hat shape {np.shape(eps_hat)}")
    _check_t(schedule, t)
    ab = _coeff(schedule.alpha_bars, t, z_t)
    if isinstance(z_t, torch.Tensor):
        return (z_t - torch.sqrt(1.0 - ab) * eps_hat) / torch.sqrt(ab)
    return (z_t - np.sqrt(1.0 - ab) * eps_hat) / np.sqrt(ab)


def ddim_sigma(schedule: NoiseSchedule, t, t_next, eta: float):
    """Stochasticity of the t -> t_next update for the given eta.

    sigma = eta * sqrt((1-ab_next)/(1-ab_t)) * sqrt(1 - ab_t/ab_next).
    eta=0 is the deterministic update; eta=1 matches the ancestral posterior
    standard deviation when stepping one schedule index at a time.
    """
    ab_t = schedule.alpha_bars[np.asarray(t)]
    ab_n = schedule.alpha_bars[np.asarray(t_next)]
    return eta * np.sqrt((1.0 - ab_n) / (1.0 - ab_t)) * np.sqrt(1.0 - ab_t / ab_n)


def _like(values, ref):
    """Cast a scalar or (B,) numpy coefficient to ref's dtype, broadcastable over ref."""
    arr = np.asarray(values)
    if isinstance(ref, torch.Tensor):
        out = torch.as_tensor(arr, dtype=ref.dtype, device=ref.device)
        if out.ndim == 0:
            return out
        return out.reshape((-1,) + (1,) * (ref.ndim - 1))
    out = arr.astype(ref.dtype) if hasattr(ref, "dtype") else float(arr)
    if np.ndim(out) == 0:
        return out
    return np.reshape(out, (-1,) + (1,) * (np.ndim(ref) - 1))


def reverse_step(z_t, eps_hat, t, t_next, eta: float, noise, schedule: NoiseSchedule):
    """One reverse update z_t -> z_{t_next}.

    z_next = sqrt(ab_next) * x0_hat + sqrt(1 - ab_next - sigma^2) * eps_hat + sigma * noise.
    Requires 0 <= t_next < t <= T elementwise and 0 <= eta <= 1. ``noise`` may
    be None when eta == 0.
    """
    if not (0.0 <= eta <= 1.0):
        raise ConfigError(f"eta must lie in [0, 1], got {eta}")
    t_arr = np.asarray(t.cpu() if isinstance(t, torch.Tensor) else t)
    tn_arr = np.asarray(t_next.cpu() if isinstance(t_next, torch.Tensor) else t_next)
    if np.any(tn_arr >= t_arr):
        raise ScheduleError(f"t_next must be strictly below t, got t={t_arr}, t_next={tn_arr}")
    _check_t(schedule, t)
    _check_t(schedule, t_next)

    x0_hat = predict_x0(z_t, eps_hat, t, schedule)
    sigma = ddim_sigma(schedule, t_arr, tn_arr, eta)
    ab_n = schedule.alpha_bars[tn_arr]
    dir_coeff = np.sqrt(np.maximum(1.0 - ab_n - sigma**2, 0.0))

    out = _like(np.sqrt(ab_n), z_t) * x0_hat + _like(dir_coeff, z_t) * eps_hat
    if eta > 0.0 and np.any(sigma > 0.0):
        if noise is None:
            raise DimensionError("noise array required when eta > 0")
        out = out + _like(sigma, z_t) * noise
    return out
