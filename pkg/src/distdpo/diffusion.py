"""Noise schedules, point-wise forward noising and reverse samplers.

The forward process is local: each point keeps its unscaled position and
receives additive noise, ``g_t = g_0 + sqrt(1 - alpha_bar[t]) * eps``.

Two reverse steppers are provided:

``ddpm``
    The textbook DDPM update with ``1/sqrt(alpha)`` signal scaling.
``local-consistent``
    The update implied by the local forward marginals. With the true noise
    and ``deterministic=True`` it inverts the forward process exactly.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .pointcloud import as_cloud, replicate_scan

VARIANTS = ("ddpm", "local-consistent")


class DiffusionError(ValueError):
    pass


@dataclass(frozen=True)
class NoiseSchedule:
    """Arrays are indexed by ``t`` directly; index 0 is the clean state."""

    T: int
    kind: str
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    sigma: np.ndarray

    def noise_scale(self, t: int) -> float:
        """Forward marginal standard deviation ``sqrt(1 - alpha_bar[t])``."""
        return float(np.sqrt(1.0 - self.alpha_bar[t]))

    def check_t(self, t: int, allow_zero: bool = False) -> int:
        lo = 0 if allow_zero else 1
        if int(t) != t or not lo <= t <= self.T:
            raise DiffusionError(f"timestep {t} outside [{lo}, {self.T}]")
        return int(t)


def build_schedule(T: int, kind: str = "linear",
                   beta_start: float = 1e-4, beta_end: float = 2e-2) -> NoiseSchedule:
    if int(T) != T or T < 1:
        raise DiffusionError(f"T must be a positive integer, got {T}")
    if kind != "linear":
        raise DiffusionError(f"unknown schedule kind {kind!r}")
    T = int(T)
    beta = np.empty(T + 1)
    beta[0] = 0.0
    beta[1:] = np.linspace(beta_start, beta_end, T) if T > 1 else [beta_start]
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    sigma = np.sqrt(beta)
    for arr in (beta, alpha, alpha_bar, sigma):
        arr.setflags(write=False)
    return NoiseSchedule(T, kind, beta, alpha, alpha_bar, sigma)


@dataclass(frozen=True)
class NoisySample:
    cloud: np.ndarray
    t: int
    eps: np.ndarray


def noise_point_cloud(g0, t: int, eps, sched: NoiseSchedule) -> NoisySample:
    g0 = as_cloud(g0)
    eps = np.asarray(eps, dtype=np.float64)
    if eps.shape != g0.shape:
        raise DiffusionError(f"noise shape {eps.shape} does not match cloud {g0.shape}")
    t = sched.check_t(t)
    return NoisySample(g0 + sched.noise_scale(t) * eps, t, eps)


def init_noisy(p_star, sched: NoiseSchedule, lam: float = 1.0, seed=None,
               eps=None) -> NoisySample:
    """Noisy starting cloud at ``t = T`` with the noise magnitude scaled by ``lam``.

    ``eps`` may be passed directly; otherwise it is drawn from ``seed``.
    """
    if lam < 1:
        raise DiffusionError(f"lambda must be >= 1, got {lam}")
    p_star = as_cloud(p_star)
    if eps is None:
        eps = np.random.default_rng(seed).standard_normal(p_star.shape)
    if lam == 1:
        return noise_point_cloud(p_star, sched.T, eps, sched)
    return NoisySample(p_star + lam * sched.noise_scale(sched.T) * eps, sched.T, eps)


def step_coefficients(sched: NoiseSchedule, t: int, t_prev: int, variant: str,
                      deterministic: bool = False) -> tuple[float, float, float]:
    """Coefficients ``(a, b, c)`` of ``g_prev = a*g_t - b*eps_pred + c*z``."""
    if variant not in VARIANTS:
        raise DiffusionError(f"unknown sampler variant {variant!r}")
    t = sched.check_t(t)
    t_prev = sched.check_t(t_prev, allow_zero=True)
    if t_prev >= t:
        raise DiffusionError("reverse step must decrease t")
    if variant == "ddpm":
        if t_prev == t - 1:
            alpha_t = float(sched.alpha[t])
            sig = float(sched.sigma[t])
        else:
            # strided step: the ratio of cumulative products acts as alpha
            alpha_t = float(sched.alpha_bar[t] / sched.alpha_bar[t_prev])
            sig = float(np.sqrt(1.0 - alpha_t))
        a = 1.0 / np.sqrt(alpha_t)
        b = a * (1.0 - alpha_t) / sched.noise_scale(t) if alpha_t < 1 else 0.0
        c = 0.0 if (deterministic or t_prev == 0) else sig
        return a, b, c
    s_t = sched.noise_scale(t)
    s_prev = sched.noise_scale(t_prev)
    if deterministic or t_prev == 0:
        return 1.0, s_t - s_prev, 0.0
    # posterior std of the local process; the eps coefficient shrinks so the
    # marginal at t_prev keeps variance s_prev**2
    c = s_prev * np.sqrt(max(s_t ** 2 - s_prev ** 2, 0.0)) / s_t
    return 1.0, s_t - np.sqrt(max(s_prev ** 2 - c ** 2, 0.0)), float(c)


def reverse_step(gt: NoisySample, eps_pred, sched: NoiseSchedule,
                 variant: str = "local-consistent", seed=None, *,
                 t_prev: int | None = None, deterministic: bool = False,
                 z=None) -> np.ndarray:
    """One reverse update from ``gt.t`` to ``t_prev`` (default ``gt.t - 1``)."""
    if gt.t == 0:
        raise DiffusionError("cannot step below t = 0")
    g = as_cloud(gt.cloud)
    eps_pred = np.asarray(eps_pred, dtype=np.float64)
    if eps_pred.shape != g.shape:
        raise DiffusionError("eps_pred shape does not match the cloud")
    t_prev = gt.t - 1 if t_prev is None else t_prev
    a, b, c = step_coefficients(sched, gt.t, t_prev, variant, deterministic)
    out = a * g - b * eps_pred
    if c > 0:
        if z is None:
            z = np.random.default_rng(seed).standard_normal(g.shape)
        out = out + c * z
    return out


def strided_steps(T: int, nfe: int) -> list[int]:
    """``nfe`` ascending timesteps with uniform strides ending at ``T``."""
    if nfe < 1 or nfe > T:
        raise DiffusionError(f"NFE must lie in [1, {T}], got {nfe}")
    steps = np.round(np.linspace(T / nfe, T, nfe)).astype(int)
    steps = sorted(set(int(s) for s in steps))
    if len(steps) != nfe or steps[0] < 1:
        raise DiffusionError(f"cannot place {nfe} distinct steps in [1, {T}]")
    return steps


@dataclass(frozen=True)
class SampleConfig:
    K: int = 8
    steps: tuple = (50,)
    lam: float = 1.0
    variant: str = "local-consistent"
    deterministic: bool = True


EpsModel = Callable[[np.ndarray, int], np.ndarray]


def sample(model: EpsModel, p, sched: NoiseSchedule, cfg: SampleConfig, seed=None,
           eps_T=None) -> np.ndarray:
    """Complete scan ``p`` with ``model(g_t, t) -> eps`` over ``cfg.steps``.

    ``model`` is already bound to the conditioning scan. NFE equals
    ``len(cfg.steps)``.
    """
    steps = sorted(int(s) for s in cfg.steps)
    if not steps:
        raise DiffusionError("sampling needs at least one step")
    if steps[-1] != sched.T:
        raise DiffusionError(f"the largest step must be T={sched.T}, got {steps[-1]}")
    rng = np.random.default_rng(seed)
    p_star = replicate_scan(p, cfg.K)
    if eps_T is None:
        eps_T = rng.standard_normal(p_star.shape)
    x = init_noisy(p_star, sched, cfg.lam, eps=eps_T).cloud
    schedule = list(reversed(steps)) + [0]
    for t, t_prev in zip(schedule[:-1], schedule[1:]):
        eps_pred = model(x, t)
        a, b, c = step_coefficients(sched, t, t_prev, cfg.variant, cfg.deterministic)
        x = a * x - b * eps_pred
        if c > 0:
            x = x + c * rng.standard_normal(x.shape)
    return x
