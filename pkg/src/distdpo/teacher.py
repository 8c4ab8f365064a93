"""Desk-scale teacher pretraining and completion-quality evaluation."""
from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import metrics
from .diffusion import NoiseSchedule, SampleConfig, sample, strided_steps
from .distill import diffusion_loss
from .net import (Architecture, NetParams, adam_init, adam_step, bind, encode_context,
                  init_params)


@dataclass(frozen=True)
class PretrainConfig:
    iterations: int = 6000
    lr: float = 2e-3
    lr_final: float = 1e-4
    batch_scenes: int = 4
    seed: int = 0


def pretrain_teacher(dataset, sched: NoiseSchedule, arch: Architecture = Architecture(),
                     cfg: PretrainConfig = PretrainConfig(), params: NetParams | None = None,
                     log_every: int = 0, log=print):
    """Fit a noise-prediction network to ground-truth scenes with Adam.

    Each step averages the diffusion loss over ``batch_scenes`` scenes, each
    with its own ``(t, eps)`` draw.
    """
    rng = np.random.default_rng(cfg.seed)
    params = init_params(arch, seed=int(rng.integers(2 ** 31))) if params is None else params
    ctxs = [encode_context(s.sparse) for s in dataset]
    opt = adam_init(params)
    losses = []
    decay = (cfg.lr_final / cfg.lr) ** (1.0 / max(cfg.iterations - 1, 1))
    for it in range(cfg.iterations):
        grad = np.zeros_like(params.flat)
        total = 0.0
        for _ in range(cfg.batch_scenes):
            i = int(rng.integers(len(dataset)))
            gt = dataset[i].ground_truth
            t = int(rng.integers(1, sched.T + 1))
            eps = rng.standard_normal(gt.shape)
            loss, g = diffusion_loss(params, gt, ctxs[i], t, eps, sched)
            grad += g
            total += loss
        params = adam_step(params, grad / cfg.batch_scenes, opt, cfg.lr * decay ** it)
        losses.append(total / cfg.batch_scenes)
        if log_every and (it + 1) % log_every == 0:
            log(f"pretrain {it + 1}/{cfg.iterations} loss {np.mean(losses[-log_every:]):.4f}")
    return params, np.array(losses)


def complete(params: NetParams, scan, sched: NoiseSchedule, K: int, nfe: int,
             lam: float = 1.0, variant: str = "local-consistent",
             deterministic: bool = True, seed=0) -> np.ndarray:
    ctx = encode_context(scan)
    cfg = SampleConfig(K=K, steps=tuple(strided_steps(sched.T, nfe)), lam=lam,
                       variant=variant, deterministic=deterministic)
    return sample(bind(params, ctx, sched.T), scan, sched, cfg, seed)


def evaluate_model(params: NetParams, scenes, sched: NoiseSchedule, K: int, nfe: int,
                   metric_cfg: metrics.MetricConfig | None = None, seed: int = 0,
                   variant: str = "local-consistent", deterministic: bool = True,
                   cd_only: bool = False):
    """Average metrics of ``nfe``-step completions over ``scenes``.

    Completion ``i`` uses seed ``seed + i`` so reruns match exactly. With
    ``cd_only`` the mean Chamfer distance is returned as a float.
    """
    reports = []
    cds = []
    for i, scene in enumerate(scenes):
        start = time.perf_counter()
        out = complete(params, scene.sparse, sched, K, nfe, variant=variant,
                       deterministic=deterministic, seed=seed + i)
        elapsed = time.perf_counter() - start
        if cd_only:
            cds.append(metrics.chamfer(out, scene.ground_truth))
        else:
            mcfg = metric_cfg or metrics.MetricConfig(seed=seed + i)
            reports.append(metrics.evaluate(out, scene.ground_truth, mcfg, elapsed))
    if cd_only:
        return float(np.mean(cds))
    return metrics.mean_report(reports)
