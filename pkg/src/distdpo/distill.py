"""Preference-aligned score distillation of a few-step completion student.

One training iteration:

1. the student completes the scan twice from the same base noise, once with
   the default initial noise scale and once with ``lambda_alt``;
2. both completions are scored against the ground truth and the lower score
   wins;
3. both are re-noised with a shared ``(t, eps)`` and fed to the frozen
   teacher and to the winner/loser assistants;
4. each assistant takes one diffusion-loss step on its own sample;
5. the student takes one step along

       (1/omega) * [ d_l . dG_l/deta - d_w . dG_w/deta ],
       d_i = eps_teacher(G_t^i) - eps_assistant_i(G_t^i),

   with the four network evaluations treated as constants.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from . import metrics
from .diffusion import (NoiseSchedule, VARIANTS, init_noisy, noise_point_cloud,
                        step_coefficients, strided_steps)
from .net import (ContextEmbedding, NetParams, encode_context, eps_backward,
                  eps_forward, lr_schedule, sgd_step)
from .pointcloud import ScenePair, replicate_scan

METRICS = ("cd", "jsd")
STEP_STRATEGIES = ("single", "random")


class DistillError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    lambda_alt: float = 1.1
    omega: float = 1.0
    K: int = 8
    T: int = 50
    student_steps: tuple | None = None  # None: single step at T
    step_strategy: str = "single"
    max_random_steps: int = 8
    metric: str = "cd"
    lr0: float = 1e-5
    gamma: float = 0.999
    ta_lr_scale: float = 1.0
    iterations: int = 1000
    seed: int = 0
    variant: str = "local-consistent"
    deterministic: bool = True
    jsd_bins: int = 64

    def __post_init__(self):
        if not self.lambda_alt > 1:
            raise DistillError("lambda_alt must be > 1")
        if not self.omega > 0:
            raise DistillError("omega must be > 0")
        if self.metric not in METRICS:
            raise DistillError(f"metric must be one of {METRICS}")
        if self.step_strategy not in STEP_STRATEGIES:
            raise DistillError(f"step_strategy must be one of {STEP_STRATEGIES}")
        if self.variant not in VARIANTS:
            raise DistillError(f"unknown sampler variant {self.variant!r}")
        if self.K < 1 or self.T < 1 or self.iterations < 0:
            raise DistillError("K and T must be positive and iterations >= 0")
        if not 0 < self.gamma <= 1 or not self.lr0 > 0:
            raise DistillError("need lr0 > 0 and 0 < gamma <= 1")
        steps = self.steps
        if not steps or steps[-1] != self.T or steps[0] < 1 or len(set(steps)) != len(steps):
            raise DistillError(f"student_steps must be distinct values in [1, T] ending at T")

    @property
    def steps(self) -> tuple:
        if self.student_steps is None:
            return (self.T,)
        return tuple(sorted(int(s) for s in self.student_steps))


# --- differentiable generation ----------------------------------------------

@dataclass
class GenerationTape:
    params_digest: str
    ctx: ContextEmbedding
    records: list = field(default_factory=list)  # (cache, a, b) per step


def generate(params: NetParams, ctx: ContextEmbedding, sched: NoiseSchedule, steps,
             eps_T: np.ndarray, p_star: np.ndarray, lam: float = 1.0,
             variant: str = "local-consistent", deterministic: bool = True,
             rng: np.random.Generator | None = None, record: bool = True):
    """Run the reverse sampler and keep what backprop through it needs."""
    x = init_noisy(p_star, sched, lam, eps=eps_T).cloud
    schedule = sorted(int(s) for s in steps)[::-1] + [0]
    tape = GenerationTape(params.digest() if record else "", ctx)
    for t, t_prev in zip(schedule[:-1], schedule[1:]):
        out, cache = eps_forward(params, x, t, ctx, sched.T, return_cache=True)
        a, b, c = step_coefficients(sched, t, t_prev, variant, deterministic)
        if record:
            tape.records.append((cache, a, b))
        x = a * x - b * out
        if c > 0:
            x = x + c * rng.standard_normal(x.shape)
    return x, tape


def generate_backward(params: NetParams, tape: GenerationTape, upstream) -> np.ndarray:
    """Parameter gradient of ``<upstream, generated cloud>``."""
    u = np.asarray(upstream, dtype=np.float64)
    grad = np.zeros(params.arch.n_params)
    for cache, a, b in reversed(tape.records):
        gp, gx = eps_backward(params, cache, -b * u)
        grad += gp
        u = a * u + gx
    return grad


# --- preference pairs --------------------------------------------------------

@dataclass
class PreferencePair:
    winner: np.ndarray
    loser: np.ndarray
    winner_score: float
    loser_score: float
    lambda_default: float
    lambda_alt: float
    metric_name: str
    degenerate: bool
    winner_lambda: float = 1.0
    generation: int = -1
    winner_tape: GenerationTape | None = field(default=None, repr=False)
    loser_tape: GenerationTape | None = field(default=None, repr=False)

    def swapped(self) -> "PreferencePair":
        return replace(self, winner=self.loser, loser=self.winner,
                       winner_score=self.loser_score, loser_score=self.winner_score,
                       winner_lambda=self.lambda_alt if self.winner_lambda == self.lambda_default
                       else self.lambda_default,
                       winner_tape=self.loser_tape, loser_tape=self.winner_tape)


def score_completion(cloud, gt, metric: str, jsd_bins: int = 64) -> float:
    if metric == "cd":
        return metrics.chamfer(cloud, gt)
    if metric == "jsd":
        extent = metrics.bounding_radius(gt) * (1 + 1e-9)
        return metrics.jsd(cloud, gt, jsd_bins, extent)
    raise DistillError(f"unknown preference metric {metric!r}")


def rank_pair(g_default, g_alt, s_default, s_alt, lam_alt, metric,
              tapes=(None, None), generation=-1) -> PreferencePair:
    """Lower score wins; ties go to the default-lambda sample and are degenerate."""
    degenerate = abs(s_default - s_alt) <= 1e-12 or np.array_equal(g_default, g_alt)
    if degenerate or s_default <= s_alt:
        return PreferencePair(g_default, g_alt, s_default, s_alt, 1.0, lam_alt, metric,
                              degenerate, 1.0, generation, tapes[0], tapes[1])
    return PreferencePair(g_alt, g_default, s_alt, s_default, 1.0, lam_alt, metric,
                          False, lam_alt, generation, tapes[1], tapes[0])


def student_steps_for(cfg: TrainConfig, rng: np.random.Generator) -> tuple:
    if cfg.step_strategy == "random":
        nfe = int(rng.integers(1, min(cfg.max_random_steps, cfg.T) + 1))
        return tuple(strided_steps(cfg.T, nfe))
    return cfg.steps


@dataclass
class TrainState:
    student: NetParams
    ta_w: NetParams
    ta_l: NetParams
    teacher: NetParams
    k: int = 0
    rng: np.random.Generator = field(default_factory=lambda: np.random.default_rng(0))

    def __post_init__(self):
        archs = {self.student.arch, self.ta_w.arch, self.ta_l.arch, self.teacher.arch}
        if len(archs) != 1:
            raise DistillError("student, assistants and teacher must share one architecture")

    @classmethod
    def from_teacher(cls, teacher: NetParams, seed: int = 0) -> "TrainState":
        return cls(teacher.copy(), teacher.copy(), teacher.copy(), teacher,
                   rng=np.random.default_rng(seed))


def make_preference_pair(state: TrainState, scene: ScenePair, cfg: TrainConfig,
                         sched: NoiseSchedule, seed, steps=None) -> PreferencePair:
    """Complete ``scene`` twice with the current student and rank the results.

    Both halves share one base noise draw; the second is scaled by
    ``cfg.lambda_alt``.
    """
    rng = np.random.default_rng(seed)
    steps = cfg.steps if steps is None else steps
    ctx = encode_context(scene.sparse)
    p_star = replicate_scan(scene.sparse, cfg.K)
    eps_T = rng.standard_normal(p_star.shape)
    z_seed = int(rng.integers(2 ** 63))
    outs = []
    for lam in (1.0, cfg.lambda_alt):
        g0, tape = generate(state.student, ctx, sched, steps, eps_T, p_star, lam,
                            cfg.variant, cfg.deterministic, np.random.default_rng(z_seed))
        outs.append((g0, tape))
    (g_d, tape_d), (g_a, tape_a) = outs
    s_d = score_completion(g_d, scene.ground_truth, cfg.metric, cfg.jsd_bins)
    s_a = score_completion(g_a, scene.ground_truth, cfg.metric, cfg.jsd_bins)
    return rank_pair(g_d, g_a, s_d, s_a, cfg.lambda_alt, cfg.metric,
                     (tape_d, tape_a), state.k)


# --- gradients ---------------------------------------------------------------

def score_difference(teacher: NetParams, assistant: NetParams, g_t, t, ctx, T):
    return eps_forward(teacher, g_t, t, ctx, T) - eps_forward(assistant, g_t, t, ctx, T)


@dataclass
class DPOGradient:
    grad: np.ndarray
    skipped: bool
    d_w: np.ndarray | None = None
    d_l: np.ndarray | None = None
    g_t_w: np.ndarray | None = None
    g_t_l: np.ndarray | None = None


def distillation_dpo_grad(state: TrainState, pair: PreferencePair, scene: ScenePair,
                          t: int, eps, sched: NoiseSchedule, omega: float = 1.0,
                          skip_degenerate: bool = True) -> DPOGradient:
    """Student gradient from one preference pair at noise level ``t``.

    ``eps`` is applied to both halves. With ``skip_degenerate`` a degenerate
    pair yields a zero gradient and ``skipped=True``.
    """
    if not omega > 0:
        raise DistillError("omega must be > 0")
    if pair.winner_tape is None or pair.loser_tape is None:
        raise DistillError("pair carries no generation tapes")
    if pair.degenerate and skip_degenerate:
        return DPOGradient(np.zeros(state.student.arch.n_params), True)
    ctx = pair.winner_tape.ctx
    g_t_w = noise_point_cloud(pair.winner, t, eps, sched).cloud
    g_t_l = noise_point_cloud(pair.loser, t, eps, sched).cloud
    d_w = score_difference(state.teacher, state.ta_w, g_t_w, t, ctx, sched.T)
    d_l = score_difference(state.teacher, state.ta_l, g_t_l, t, ctx, sched.T)
    # dG_t/deta equals dG_0/deta because noising is additive in the signal
    g_l = generate_backward(state.student, pair.loser_tape, d_l)
    g_w = generate_backward(state.student, pair.winner_tape, d_w)
    return DPOGradient((g_l - g_w) / omega, False, d_w, d_l, g_t_w, g_t_l)


def score_distill_grad(student: NetParams, teacher: NetParams, assistant: NetParams,
                       g0, tape: GenerationTape, t: int, eps, sched: NoiseSchedule):
    """Plain score-distillation gradient with a single assistant."""
    g_t = noise_point_cloud(g0, t, eps, sched).cloud
    d = score_difference(teacher, assistant, g_t, t, tape.ctx, sched.T)
    return generate_backward(student, tape, d)


def diffusion_loss(params: NetParams, g0, ctx: ContextEmbedding, t: int, eps,
                   sched: NoiseSchedule):
    """Mean over points of ``||eps - eps_model(g_t)||^2`` and its gradient."""
    g_t = noise_point_cloud(g0, t, eps, sched).cloud
    pred, cache = eps_forward(params, g_t, t, ctx, sched.T, return_cache=True)
    resid = eps - pred
    n = g_t.shape[0]
    loss = float(np.sum(resid * resid)) / n
    grad, _ = eps_backward(params, cache, -2.0 * resid / n)
    return loss, grad


def ta_update(ta: NetParams, sample, scene: ScenePair, sched: NoiseSchedule, lr: float,
              seed, ctx: ContextEmbedding | None = None):
    """One SGD step of the diffusion loss on a student sample.

    Returns ``(new_params, loss, grad_norm)``.
    """
    rng = np.random.default_rng(seed)
    t = int(rng.integers(1, sched.T + 1))
    eps = rng.standard_normal(np.shape(sample))
    ctx = encode_context(scene.sparse) if ctx is None else ctx
    loss, grad = diffusion_loss(ta, sample, ctx, t, eps, sched)
    return sgd_step(ta, grad, lr), loss, float(np.linalg.norm(grad))


# --- training loop -----------------------------------------------------------

LOG_FIELDS = ("iteration", "lr", "winner_score", "loser_score", "grad_norm_student",
              "grad_norm_ta_w", "grad_norm_ta_l", "degenerate")


@dataclass
class IterationLog:
    iteration: int
    lr: float
    winner_score: float
    loser_score: float
    grad_norm_student: float
    grad_norm_ta_w: float
    grad_norm_ta_l: float
    degenerate: bool
    t: int = 0
    nfe: int = 1
    ta_loss_w: float = 0.0
    ta_loss_l: float = 0.0

    def as_row(self) -> dict:
        return {k: getattr(self, k) for k in LOG_FIELDS}


@dataclass
class TrainingLog:
    iterations: list = field(default_factory=list)
    evaluations: list = field(default_factory=list)  # (iteration, MetricReport)

    def winner_scores(self) -> np.ndarray:
        return np.array([r.winner_score for r in self.iterations])

    def loser_scores(self) -> np.ndarray:
        return np.array([r.loser_score for r in self.iterations])

    def degenerate_mask(self) -> np.ndarray:
        return np.array([r.degenerate for r in self.iterations], dtype=bool)


def _draw_seed(rng):
    return int(rng.integers(2 ** 63))


def train_iteration(state: TrainState, scene: ScenePair, cfg: TrainConfig,
                    sched: NoiseSchedule) -> tuple[TrainState, IterationLog]:
    rng = state.rng
    lr = lr_schedule(cfg.lr0, cfg.gamma, state.k)
    steps = student_steps_for(cfg, rng)
    pair = make_preference_pair(state, scene, cfg, sched, _draw_seed(rng), steps)
    if pair.generation != state.k:
        raise DistillError("preference pair was not generated by the current student")

    t = int(rng.integers(1, sched.T + 1))
    eps = rng.standard_normal(pair.winner.shape)
    seed_w, seed_l = _draw_seed(rng), _draw_seed(rng)

    g = distillation_dpo_grad(state, pair, scene, t, eps, sched, cfg.omega)
    ctx = pair.winner_tape.ctx
    ta_lr = lr * cfg.ta_lr_scale
    ta_w, loss_w, gn_w = ta_update(state.ta_w, pair.winner, scene, sched, ta_lr, seed_w, ctx)
    ta_l, loss_l, gn_l = ta_update(state.ta_l, pair.loser, scene, sched, ta_lr, seed_l, ctx)
    student = state.student if g.skipped else sgd_step(state.student, g.grad, lr)

    new_state = TrainState(student, ta_w, ta_l, state.teacher, state.k + 1, rng)
    log = IterationLog(state.k, lr, pair.winner_score, pair.loser_score,
                       float(np.linalg.norm(g.grad)), gn_w, gn_l, pair.degenerate,
                       t, len(steps), loss_w, loss_l)
    return new_state, log


EvalHook = Callable[[int, NetParams], object]


def train(dataset, cfg: TrainConfig, sched: NoiseSchedule, state: TrainState,
          eval_hook: EvalHook | None = None, eval_every: int = 0,
          log_sink: Callable[[IterationLog], None] | None = None):
    """Cycle through ``dataset`` for ``cfg.iterations`` iterations."""
    dataset = list(dataset)
    if not dataset:
        raise DistillError("training dataset is empty")
    log = TrainingLog()
    if eval_hook is not None:
        log.evaluations.append((state.k, eval_hook(state.k, state.student)))
    for i in range(cfg.iterations):
        state, it = train_iteration(state, dataset[i % len(dataset)], cfg, sched)
        log.iterations.append(it)
        if log_sink is not None:
            log_sink(it)
        if eval_hook is not None and eval_every and (i + 1) % eval_every == 0:
            log.evaluations.append((state.k, eval_hook(state.k, state.student)))
    return state, log


# --- plain score distillation baseline ---------------------------------------

@dataclass
class SDState:
    student: NetParams
    ta: NetParams
    teacher: NetParams
    k: int = 0
    rng: np.random.Generator = field(default_factory=lambda: np.random.default_rng(0))

    @classmethod
    def from_teacher(cls, teacher: NetParams, seed: int = 0) -> "SDState":
        return cls(teacher.copy(), teacher.copy(), teacher, rng=np.random.default_rng(seed))


def sd_iteration(state: SDState, scene: ScenePair, cfg: TrainConfig,
                 sched: NoiseSchedule) -> tuple[SDState, IterationLog]:
    rng = state.rng
    lr = lr_schedule(cfg.lr0, cfg.gamma, state.k)
    steps = student_steps_for(cfg, rng)
    gen_rng = np.random.default_rng(_draw_seed(rng))
    ctx = encode_context(scene.sparse)
    p_star = replicate_scan(scene.sparse, cfg.K)
    eps_T = gen_rng.standard_normal(p_star.shape)
    g0, tape = generate(state.student, ctx, sched, steps, eps_T, p_star, 1.0,
                        cfg.variant, cfg.deterministic, gen_rng)
    t = int(rng.integers(1, sched.T + 1))
    eps = rng.standard_normal(g0.shape)
    seed_ta = _draw_seed(rng)
    grad = score_distill_grad(state.student, state.teacher, state.ta, g0, tape, t, eps, sched)
    ta, loss, gn = ta_update(state.ta, g0, scene, sched, lr * cfg.ta_lr_scale, seed_ta, ctx)
    student = sgd_step(state.student, grad, lr)
    score = score_completion(g0, scene.ground_truth, cfg.metric, cfg.jsd_bins)
    log = IterationLog(state.k, lr, score, math.nan, float(np.linalg.norm(grad)),
                       gn, math.nan, False, t, len(steps), loss, math.nan)
    return SDState(student, ta, state.teacher, state.k + 1, rng), log


def train_score_distill(dataset, cfg: TrainConfig, sched: NoiseSchedule, state: SDState,
                        eval_hook: EvalHook | None = None, eval_every: int = 0):
    dataset = list(dataset)
    if not dataset:
        raise DistillError("training dataset is empty")
    log = TrainingLog()
    if eval_hook is not None:
        log.evaluations.append((state.k, eval_hook(state.k, state.student)))
    for i in range(cfg.iterations):
        state, it = sd_iteration(state, dataset[i % len(dataset)], cfg, sched)
        log.iterations.append(it)
        if eval_hook is not None and eval_every and (i + 1) % eval_every == 0:
            log.evaluations.append((state.k, eval_hook(state.k, state.student)))
    return state, log
