"""Off-policy Diffusion-DPO on a fixed set of preference pairs.

Used to fine-tune the teacher before distillation. Noisy samples follow the
local forward process, ``x_t = x_0 + sqrt(1 - alpha_bar[t]) * eps``.
"""
from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass

import numpy as np

from .diffusion import NoiseSchedule, noise_point_cloud
from .distill import rank_pair, score_completion
from .net import (ContextEmbedding, NetParams, encode_context, eps_backward, eps_forward,
                  lr_schedule, sgd_step)
from .pointcloud import ScenePair, load_xyz, save_xyz
from .teacher import complete

WEIGHTINGS = ("constant", "snr")


class DPOError(ValueError):
    pass


@dataclass(frozen=True)
class DPOConfig:
    beta: float = 1.0
    weighting: str = "constant"

    def __post_init__(self):
        if not self.beta > 0:
            raise DPOError("beta must be > 0")
        if self.weighting not in WEIGHTINGS:
            raise DPOError(f"weighting must be one of {WEIGHTINGS}")


def snr(sched: NoiseSchedule, t: int) -> float:
    """Marginal signal-to-noise ratio ``alpha_bar / (1 - alpha_bar)``."""
    t = sched.check_t(t)
    ab = float(sched.alpha_bar[t])
    return ab / (1.0 - ab)


def weight(sched: NoiseSchedule, t: int, cfg: DPOConfig) -> float:
    if cfg.weighting == "constant":
        return 1.0
    return snr(sched, t)


def _sq_error(params, x_t, t, eps, ctx, T, want_grad):
    pred, cache = eps_forward(params, x_t, t, ctx, T, return_cache=True)
    resid = eps - pred
    n = x_t.shape[0]
    err = float(np.sum(resid * resid)) / n
    if not want_grad:
        return err, None
    grad, _ = eps_backward(params, cache, -2.0 * resid / n)
    return err, grad


def log_sigmoid(x: float) -> float:
    return -float(np.logaddexp(0.0, -x))


@dataclass
class DPOLoss:
    loss: float
    inner: float
    grad: np.ndarray


def diffusion_dpo_loss(eta: NetParams, ref: NetParams, winner, loser, ctx: ContextEmbedding,
                       t: int, eps_w, eps_l, sched: NoiseSchedule,
                       cfg: DPOConfig = DPOConfig()) -> DPOLoss:
    """``-log sigmoid(inner)`` for one pair and its exact gradient w.r.t. ``eta``.

    ``inner = -beta*T*w(t) * [(e_eta^w - e_ref^w) - (e_eta^l - e_ref^l)]`` where
    ``e`` is the per-point mean squared noise-prediction error.
    """
    T = sched.T
    x_w = noise_point_cloud(winner, t, eps_w, sched).cloud
    x_l = noise_point_cloud(loser, t, eps_l, sched).cloud
    e_eta_w, g_w = _sq_error(eta, x_w, t, eps_w, ctx, T, True)
    e_eta_l, g_l = _sq_error(eta, x_l, t, eps_l, ctx, T, True)
    e_ref_w, _ = _sq_error(ref, x_w, t, eps_w, ctx, T, False)
    e_ref_l, _ = _sq_error(ref, x_l, t, eps_l, ctx, T, False)
    scale = cfg.beta * T * weight(sched, t, cfg)
    inner = -scale * ((e_eta_w - e_ref_w) - (e_eta_l - e_ref_l))
    loss = -log_sigmoid(inner)
    # d loss / d inner = -sigmoid(-inner)
    dinner = -0.5 * (1.0 - math.tanh(0.5 * inner))
    grad = dinner * (-scale) * (g_w - g_l)
    return DPOLoss(loss, inner, grad)


# --- fixed preference dataset ------------------------------------------------

@dataclass(frozen=True)
class StoredPair:
    scene: ScenePair
    winner: np.ndarray
    loser: np.ndarray
    winner_score: float
    loser_score: float
    metric: str
    lambda_alt: float
    winner_lambda: float


def build_pair_dataset(ref: NetParams, scenes, sched: NoiseSchedule, n_pairs: int,
                       K: int, nfe: int, lambda_alt: float = 1.1, metric: str = "cd",
                       seed: int = 0) -> list[StoredPair]:
    """Pregenerate pairs with the reference model; degenerate pairs are skipped."""
    rng = np.random.default_rng(seed)
    pairs = []
    attempts = 0
    while len(pairs) < n_pairs:
        attempts += 1
        if attempts > 4 * n_pairs + 10:
            raise DPOError("too many degenerate pairs")
        scene = scenes[len(pairs) % len(scenes)]
        s = int(rng.integers(2 ** 63))
        g_d = complete(ref, scene.sparse, sched, K, nfe, lam=1.0, seed=s)
        g_a = complete(ref, scene.sparse, sched, K, nfe, lam=lambda_alt, seed=s)
        pair = rank_pair(g_d, g_a, score_completion(g_d, scene.ground_truth, metric),
                         score_completion(g_a, scene.ground_truth, metric), lambda_alt, metric)
        if pair.degenerate:
            continue
        pairs.append(StoredPair(scene, pair.winner, pair.loser, pair.winner_score,
                                pair.loser_score, metric, lambda_alt, pair.winner_lambda))
    return pairs


MANIFEST_FIELDS = ("pair_id", "scene_id", "sparse_file", "gt_file", "winner_file",
                   "loser_file", "winner_score", "loser_score", "metric", "lambda_alt",
                   "winner_lambda")


def save_pair_dataset(pairs, directory) -> str:
    """Write XYZ files per pair plus ``manifest.csv``; returns the manifest path."""
    os.makedirs(directory, exist_ok=True)
    rows = []
    for i, p in enumerate(pairs):
        stem = f"pair_{i:05d}"
        names = {k: f"{stem}_{k}.xyz" for k in ("sparse", "gt", "winner", "loser")}
        save_xyz(p.scene.sparse, os.path.join(directory, names["sparse"]))
        save_xyz(p.scene.ground_truth, os.path.join(directory, names["gt"]))
        save_xyz(p.winner, os.path.join(directory, names["winner"]))
        save_xyz(p.loser, os.path.join(directory, names["loser"]))
        rows.append({"pair_id": stem, "scene_id": p.scene.scene_id,
                     "sparse_file": names["sparse"], "gt_file": names["gt"],
                     "winner_file": names["winner"], "loser_file": names["loser"],
                     "winner_score": repr(p.winner_score), "loser_score": repr(p.loser_score),
                     "metric": p.metric, "lambda_alt": repr(p.lambda_alt),
                     "winner_lambda": repr(p.winner_lambda)})
    path = os.path.join(directory, "manifest.csv")
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=MANIFEST_FIELDS)
        writer.writeheader()
        writer.writerows(rows)
    return path


def load_pair_dataset(directory) -> list[StoredPair]:
    path = os.path.join(directory, "manifest.csv")
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = set(MANIFEST_FIELDS) - set(reader.fieldnames or ())
        if missing:
            raise DPOError(f"{path}: manifest lacks columns {sorted(missing)}")
        rows = list(reader)

    def xyz(name):
        return load_xyz(os.path.join(directory, name))

    return [StoredPair(ScenePair(xyz(r["sparse_file"]), xyz(r["gt_file"]), r["scene_id"]),
                       xyz(r["winner_file"]), xyz(r["loser_file"]),
                       float(r["winner_score"]), float(r["loser_score"]), r["metric"],
                       float(r["lambda_alt"]), float(r["winner_lambda"]))
            for r in rows]


@dataclass(frozen=True)
class FinetuneConfig:
    iterations: int = 500
    lr0: float = 1e-5
    gamma: float = 0.999
    seed: int = 0
    dpo: DPOConfig = DPOConfig()


def finetune(ref: NetParams, pairs, sched: NoiseSchedule, cfg: FinetuneConfig = FinetuneConfig()):
    """SGD on the Diffusion-DPO loss over a fixed pair list; ``ref`` stays frozen.

    Returns ``(params, losses)``.
    """
    if not pairs:
        raise DPOError("no preference pairs")
    rng = np.random.default_rng(cfg.seed)
    eta = ref.copy()
    ctxs = {}
    losses = []
    for k in range(cfg.iterations):
        p = pairs[k % len(pairs)]
        key = id(p.scene)
        if key not in ctxs:
            ctxs[key] = encode_context(p.scene.sparse)
        t = int(rng.integers(1, sched.T + 1))
        eps_w = rng.standard_normal(p.winner.shape)
        eps_l = rng.standard_normal(p.loser.shape)
        out = diffusion_dpo_loss(eta, ref, p.winner, p.loser, ctxs[key], t, eps_w, eps_l,
                                 sched, cfg.dpo)
        eta = sgd_step(eta, out.grad, lr_schedule(cfg.lr0, cfg.gamma, k))
        losses.append(out.loss)
    return eta, np.array(losses)
