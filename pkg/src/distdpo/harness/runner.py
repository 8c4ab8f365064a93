"""Execute an experiment config and write its artifacts.

Layout of a run directory::

    results.csv          one row per evaluated model / setting / NFE
    training_log.csv     per-iteration distillation log
    winner_loser.csv     winner and loser score curves (plot data)
    heldout_curve.csv    periodic held-out CD during training (plot data)
    schema.json          column lists of every CSV above
    manifest.json        config hash, seed, sampler variant, code version
    checkpoints/         network parameters
    figures/             PNG renderings of the plot data
"""
from __future__ import annotations

import csv
import json
import logging
import os
import platform
import time
from dataclasses import dataclass, field

import numpy as np

from .. import __version__
from ..distill import (LOG_FIELDS, SDState, TrainState, train, train_score_distill)
from ..dpo import build_pair_dataset, finetune, save_pair_dataset
from ..net import NetError, NetParams, load_params, save_params
from ..pointcloud import load_scene_dir, synth_dataset
from ..teacher import evaluate_model, pretrain_teacher
from ..theory import theory_sweep
from . import figures
from .config import ConfigError, ExperimentConfig

log = logging.getLogger(__name__)

KEY_COLUMNS = ("config_hash", "mode", "model", "setting", "nfe")
WALL_TIME_COLUMNS = ("wall_time_seconds",)
THEORY_COLUMNS = ("config_hash", "check", "value", "tolerance", "passed")
TRAINING_LOG_COLUMNS = ("setting",) + LOG_FIELDS + ("t", "student_nfe")
WINNER_LOSER_COLUMNS = ("setting", "iteration", "winner_score", "loser_score",
                        "winner_running_mean", "loser_running_mean")
HELDOUT_COLUMNS = ("setting", "iteration", "heldout_cd")


class RunError(RuntimeError):
    pass


def result_columns(iou_resolutions) -> tuple:
    ious = tuple(f"iou_{r:g}" for r in iou_resolutions)
    return KEY_COLUMNS + ("cd", "jsd", "emd") + ious + WALL_TIME_COLUMNS


def fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_csv(path, columns, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([fmt(r[c]) for c in columns])


@dataclass
class RunContext:
    cfg: ExperimentConfig
    out: str
    sched: object = None
    train_set: list = field(default_factory=list)
    heldout: list = field(default_factory=list)
    results: list = field(default_factory=list)
    train_rows: list = field(default_factory=list)
    wl_rows: list = field(default_factory=list)
    heldout_rows: list = field(default_factory=list)
    files: list = field(default_factory=list)

    @property
    def hash(self) -> str:
        return self.cfg.config_hash()

    def path(self, *parts) -> str:
        p = os.path.join(self.out, *parts)
        os.makedirs(os.path.dirname(p), exist_ok=True)
        return p

    def checkpoint(self, name: str, params: NetParams, role: str) -> str:
        s = self.cfg.values["schedule"]
        meta = {"role": role, "config_hash": self.hash, "seed": self.cfg.seed,
                "schedule": {"T": s["T"], "kind": s["kind"], "beta_start": s["beta_start"],
                             "beta_end": s["beta_end"]}}
        path = self.path("checkpoints", f"{name}.bin")
        save_params(path, params, meta)
        self.files.append(os.path.relpath(path, self.out))
        return path


def _datasets(ctx: RunContext):
    s = ctx.cfg.values["scenes"]
    if s["heldout_offset"] < s["train_scenes"]:
        raise ConfigError("[scenes] heldout_offset: must be >= train_scenes so held-out "
                          "scenes stay unseen")
    recipe = ctx.cfg.recipe()
    ctx.train_set = synth_dataset(recipe, range(s["train_scenes"]))
    off = s["heldout_offset"]
    ctx.heldout = synth_dataset(recipe, range(off, off + s["heldout_scenes"]))


def evaluate_rows(ctx: RunContext, params: NetParams, model: str, setting: str = "",
                  nfes=None, scenes=None):
    e = ctx.cfg.values["eval"]
    rows = []
    for nfe in (nfes or e["nfe"]):
        rep = evaluate_model(params, scenes or ctx.heldout, ctx.sched, e["K"], int(nfe),
                             ctx.cfg.metric_config(), seed=ctx.cfg.seed,
                             variant=e["variant"], deterministic=e["deterministic"])
        row = {"config_hash": ctx.hash, "mode": ctx.cfg.mode, "model": model,
               "setting": setting, "nfe": int(nfe)}
        row.update(rep.as_row())
        rows.append(row)
        log.info("eval %s %s nfe=%d cd=%.4f jsd=%.4f", model, setting, nfe, rep.cd, rep.jsd)
    ctx.results.extend(rows)
    return rows


def get_teacher(ctx: RunContext, force_train: bool = False) -> NetParams:
    path = ctx.cfg.values["teacher"]["checkpoint"]
    if path and not force_train:
        try:
            params, _ = load_params(path)
        except FileNotFoundError:
            raise RunError(f"teacher checkpoint not found: {path}") from None
        except NetError as exc:
            raise RunError(str(exc)) from None
        if params.arch != ctx.cfg.architecture():
            raise RunError(f"teacher checkpoint {path} does not match the [net] section")
        return params
    log.info("pretraining teacher for %d iterations",
             ctx.cfg.values["teacher"]["iterations"])
    teacher, _ = pretrain_teacher(ctx.train_set, ctx.sched, ctx.cfg.architecture(),
                                  ctx.cfg.pretrain())
    ctx.checkpoint("teacher", teacher, "teacher")
    return teacher


def _running_mean(x):
    x = np.asarray(x, dtype=np.float64)
    return np.cumsum(x) / np.arange(1, len(x) + 1)


def _record_training(ctx: RunContext, setting: str, tlog) -> None:
    for it in tlog.iterations:
        row = it.as_row()
        row.update(setting=setting, t=it.t, student_nfe=it.nfe)
        ctx.train_rows.append(row)
    keep = [it for it in tlog.iterations if not it.degenerate]
    w = [it.winner_score for it in keep]
    l = [it.loser_score for it in keep]
    wm, lm = _running_mean(w), _running_mean(l)
    for i, it in enumerate(keep):
        ctx.wl_rows.append({"setting": setting, "iteration": it.iteration,
                            "winner_score": it.winner_score, "loser_score": it.loser_score,
                            "winner_running_mean": wm[i], "loser_running_mean": lm[i]})
    for k, cd in tlog.evaluations:
        ctx.heldout_rows.append({"setting": setting, "iteration": k, "heldout_cd": cd})


def _eval_hook(ctx: RunContext):
    e = ctx.cfg.values["eval"]
    nfe = max(e["nfe"])

    def hook(k, params):
        cd = evaluate_model(params, ctx.heldout, ctx.sched, e["K"], nfe, seed=ctx.cfg.seed,
                            variant=e["variant"], deterministic=e["deterministic"],
                            cd_only=True)
        log.info("iteration %d held-out %d-step CD %.4f", k, nfe, cd)
        return cd
    return hook


def distill_dpo(ctx: RunContext, teacher: NetParams, setting: str = "", **overrides):
    tcfg = ctx.cfg.train(**overrides)
    every = ctx.cfg.values["train"]["eval_every"]
    state = TrainState.from_teacher(teacher, ctx.cfg.seed)
    hook = _eval_hook(ctx) if every else None
    log.info("distillation-dpo %s for %d iterations", setting or "run", tcfg.iterations)
    state, tlog = train(ctx.train_set, tcfg, ctx.sched, state, hook, every)
    _record_training(ctx, setting, tlog)
    return state.student, tlog


def score_distill(ctx: RunContext, teacher: NetParams, setting: str = ""):
    tcfg = ctx.cfg.train()
    every = ctx.cfg.values["train"]["eval_every"]
    hook = _eval_hook(ctx) if every else None
    state, tlog = train_score_distill(ctx.train_set, tcfg, ctx.sched,
                                      SDState.from_teacher(teacher, ctx.cfg.seed), hook, every)
    for it in tlog.iterations:
        row = it.as_row()
        row.update(setting=setting, t=it.t, student_nfe=it.nfe)
        ctx.train_rows.append(row)
    for k, cd in tlog.evaluations:
        ctx.heldout_rows.append({"setting": setting, "iteration": k, "heldout_cd": cd})
    return state.student, tlog


# --- modes -------------------------------------------------------------------

def _mode_train_teacher(ctx):
    teacher = get_teacher(ctx, force_train=True)
    evaluate_rows(ctx, teacher, "teacher")


def _mode_distill(ctx):
    teacher = get_teacher(ctx)
    student, _ = distill_dpo(ctx, teacher)
    ctx.checkpoint("student", student, "student")
    evaluate_rows(ctx, teacher, "teacher")
    evaluate_rows(ctx, student, "student")


def _mode_score_distill(ctx):
    teacher = get_teacher(ctx)
    student, _ = score_distill(ctx, teacher)
    ctx.checkpoint("student_sd", student, "student")
    evaluate_rows(ctx, teacher, "teacher")
    evaluate_rows(ctx, student, "student-sd")


def _mode_dpo_finetune(ctx):
    teacher = get_teacher(ctx)
    d = ctx.cfg.values["dpo"]
    t = ctx.cfg.values["train"]
    pairs = build_pair_dataset(teacher, ctx.train_set, ctx.sched, d["n_pairs"], t["K"],
                               d["pair_nfe"], t["lambda_alt"], t["metric"], ctx.cfg.seed)
    manifest = save_pair_dataset(pairs, os.path.join(ctx.out, "pairs"))
    ctx.files.append(os.path.relpath(manifest, ctx.out))
    tuned, losses = finetune(teacher, pairs, ctx.sched, ctx.cfg.finetune())
    log.info("dpo fine-tune loss %.4f -> %.4f", losses[0], losses[-1])
    ctx.checkpoint("teacher_dpo", tuned, "teacher")
    evaluate_rows(ctx, teacher, "teacher")
    evaluate_rows(ctx, tuned, "teacher-dpo")
    if d["redistill"]:
        student, _ = distill_dpo(ctx, tuned, "from-teacher-dpo")
        ctx.checkpoint("student_from_teacher_dpo", student, "student")
        evaluate_rows(ctx, student, "student", "from-teacher-dpo")


def _mode_eval(ctx):
    e = ctx.cfg.values["eval"]
    try:
        params, _ = load_params(e["checkpoint"])
    except FileNotFoundError:
        raise RunError(f"checkpoint not found: {e['checkpoint']}") from None
    except NetError as exc:
        raise RunError(str(exc)) from None
    scenes = ctx.heldout
    if e["dataset_dir"]:
        scenes = load_scene_dir(e["dataset_dir"])
        if not scenes:
            raise RunError(f"no scenes found in {e['dataset_dir']}")
    name = os.path.splitext(os.path.basename(e["checkpoint"]))[0]
    evaluate_rows(ctx, params, name, scenes=scenes)


def _mode_theory(ctx):
    res = theory_sweep(seed=ctx.cfg.seed)
    checks = (("optimality_violation", res.max_optimality_violation, 1e-12),
              ("gibbs_identity_error", res.max_gibbs_error, 1e-10),
              ("worked_example_error", res.worked_example_error, 1e-6))
    for name, value, tol in checks:
        ctx.results.append({"config_hash": ctx.hash, "check": name, "value": value,
                            "tolerance": tol, "passed": bool(value <= tol)})
    ctx.results.append({"config_hash": ctx.hash, "check": "all", "value": float(res.passed),
                        "tolerance": 1.0, "passed": res.passed})


def _ablation(key, convert):
    def run(ctx):
        teacher = get_teacher(ctx)
        for raw in ctx.cfg.values["ablate"]["values"]:
            value = convert(raw)
            setting = f"{key}={raw}"
            student, _ = distill_dpo(ctx, teacher, setting, **{key: value})
            ctx.checkpoint(f"student_{key}_{raw}", student, "student")
            evaluate_rows(ctx, student, "student", setting)
    return run


def _mode_ablate_nfe(ctx):
    teacher = get_teacher(ctx)
    model, name = teacher, "teacher"
    if ctx.cfg.values["train"]["iterations"] > 0:
        model, _ = distill_dpo(ctx, teacher)
        ctx.checkpoint("student", model, "student")
        name = "student"
    nfes = [int(v) for v in ctx.cfg.values["ablate"]["values"]]
    for nfe in nfes:
        evaluate_rows(ctx, model, name, f"nfe={nfe}", nfes=[nfe])


MODE_RUNNERS = {
    "train-teacher": _mode_train_teacher,
    "distill-dpo": _mode_distill,
    "score-distill": _mode_score_distill,
    "dpo-finetune": _mode_dpo_finetune,
    "eval": _mode_eval,
    "theory-check": _mode_theory,
    "ablate-lambda": _ablation("lambda_alt", float),
    "ablate-nfe": _mode_ablate_nfe,
    "ablate-metric": _ablation("metric", str),
    "ablate-strategy": _ablation("step_strategy", str),
}


def schema(cfg: ExperimentConfig) -> dict:
    if cfg.mode == "theory-check":
        results = {"columns": list(THEORY_COLUMNS), "nondeterministic": []}
    else:
        results = {"columns": list(result_columns(cfg.values["eval"]["iou_resolutions"])),
                   "nondeterministic": list(WALL_TIME_COLUMNS)}
    return {"results.csv": results,
            "training_log.csv": {"columns": list(TRAINING_LOG_COLUMNS), "nondeterministic": []},
            "winner_loser.csv": {"columns": list(WINNER_LOSER_COLUMNS), "nondeterministic": []},
            "heldout_curve.csv": {"columns": list(HELDOUT_COLUMNS), "nondeterministic": []}}


@dataclass
class RunResult:
    out: str
    results: list
    config_hash: str
    elapsed: float


def run(cfg: ExperimentConfig, out: str | None = None, render: bool = True) -> RunResult:
    """Run ``cfg`` and write every artifact into ``out`` (default from the config)."""
    start = time.perf_counter()
    out = out or cfg.output_dir()
    os.makedirs(out, exist_ok=True)
    ctx = RunContext(cfg, out, cfg.schedule())
    if cfg.mode != "theory-check":
        _datasets(ctx)
    MODE_RUNNERS[cfg.mode](ctx)

    sch = schema(cfg)
    written = {"results.csv": ctx.results}
    if cfg.mode != "theory-check":
        written.update({"training_log.csv": ctx.train_rows, "winner_loser.csv": ctx.wl_rows,
                        "heldout_curve.csv": ctx.heldout_rows})
    for name, rows in written.items():
        write_csv(os.path.join(out, name), sch[name]["columns"], rows)
        ctx.files.append(name)
    with open(os.path.join(out, "schema.json"), "w") as fh:
        json.dump({k: sch[k] for k in written}, fh, indent=2, sort_keys=True)
        fh.write("\n")
    ctx.files.append("schema.json")
    if render and cfg.mode != "theory-check":
        ctx.files.extend(figures.render_run(out, ctx.results, ctx.wl_rows, ctx.heldout_rows))
    manifest = {"config_hash": ctx.hash, "seed": cfg.seed, "mode": cfg.mode,
                "sampler_variant": {"train": cfg.values["train"]["variant"],
                                    "eval": cfg.values["eval"]["variant"]},
                "version": __version__, "python": platform.python_version(),
                "numpy": np.__version__, "config": cfg.values, "files": sorted(ctx.files)}
    with open(os.path.join(out, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True, default=list)
        fh.write("\n")
    return RunResult(out, ctx.results, ctx.hash, time.perf_counter() - start)


def read_results(path):
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        return list(reader.fieldnames or ()), list(reader)


def strip_columns(path, drop=WALL_TIME_COLUMNS) -> str:
    """Text of a CSV with the given columns removed (for determinism checks)."""
    cols, rows = read_results(path)
    keep = [c for c in cols if c not in drop]
    lines = [",".join(keep)] + [",".join(r[c] for c in keep) for r in rows]
    return "\n".join(lines) + "\n"
