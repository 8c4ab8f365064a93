"""INI experiment configuration: typed fields, defaults and a stable hash.

Every key lives in one of a fixed set of sections; unknown sections or keys,
bad values and a missing seed are rejected with the offending field named.
"""
from __future__ import annotations

import configparser
import hashlib
import json
import os
from dataclasses import dataclass

from ..diffusion import VARIANTS, build_schedule
from ..distill import METRICS, STEP_STRATEGIES, TrainConfig
from ..dpo import WEIGHTINGS, DPOConfig, FinetuneConfig
from ..metrics import MetricConfig
from ..net import ACTIVATIONS, Architecture
from ..pointcloud import SCENE_FAMILIES, SceneRecipe
from ..teacher import PretrainConfig

MODES = ("train-teacher", "distill-dpo", "score-distill", "dpo-finetune", "eval",
         "theory-check", "ablate-lambda", "ablate-nfe", "ablate-metric", "ablate-strategy")

OUTPUT_ROOT_ENV = "DISTDPO_OUTPUT_ROOT"


class ConfigError(ValueError):
    pass


def _bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _list(conv):
    def parse(s: str):
        items = [x.strip() for x in s.replace(";", ",").split(",") if x.strip()]
        return tuple(conv(x) for x in items)
    parse.__name__ = f"list of {conv.__name__}"
    return parse


def _opt_str(s: str):
    return s.strip() or None


_opt_str.__name__ = "path"

# section -> key -> (parser, default); None default means optional/unset
FIELDS = {
    "experiment": {
        "mode": (str, None),
        "seed": (int, None),
        "name": (str, "run"),
        "output_dir": (str, "runs"),
    },
    "scenes": {
        "family": (str, "ground-boxes"),
        "n_gt": (int, 256),
        "n_sparse": (int, 32),
        "radius": (float, 2.0),
        "noise": (float, 0.01),
        "train_scenes": (int, 64),
        "heldout_scenes": (int, 8),
        "heldout_offset": (int, 1000),
    },
    "schedule": {
        "T": (int, 50),
        "kind": (str, "linear"),
        "beta_start": (float, 1e-4),
        "beta_end": (float, 2e-2),
    },
    "net": {
        "hidden": (_list(int), (64, 64)),
        "activation": (str, "silu"),
        "time_width": (int, 16),
        "time_max_freq": (float, 10.0),
    },
    "teacher": {
        "checkpoint": (_opt_str, None),
        "iterations": (int, 2000),
        "lr": (float, 2e-3),
        "lr_final": (float, 1e-4),
        "batch_scenes": (int, 4),
    },
    "train": {
        "lambda_alt": (float, 1.1),
        "omega": (float, 1.0),
        "K": (int, 8),
        "student_steps": (_list(int), ()),
        "step_strategy": (str, "single"),
        "max_random_steps": (int, 8),
        "metric": (str, "cd"),
        "lr0": (float, 1e-5),
        "gamma": (float, 0.999),
        "ta_lr_scale": (float, 1.0),
        "iterations": (int, 1000),
        "variant": (str, "local-consistent"),
        "deterministic": (_bool, True),
        "eval_every": (int, 0),
    },
    "eval": {
        "nfe": (_list(int), (1, 8)),
        "K": (int, 8),
        "variant": (str, "local-consistent"),
        "deterministic": (_bool, True),
        "jsd_bins": (int, 64),
        "jsd_dims": (int, 2),
        "iou_resolutions": (_list(float), (0.5, 0.2, 0.1)),
        "emd_cap": (int, 512),
        "checkpoint": (_opt_str, None),
        "dataset_dir": (_opt_str, None),
    },
    "dpo": {
        "beta": (float, 1.0),
        "weighting": (str, "constant"),
        "n_pairs": (int, 500),
        "pair_nfe": (int, 8),
        "iterations": (int, 500),
        "lr0": (float, 1e-5),
        "gamma": (float, 0.999),
        "redistill": (_bool, False),
    },
    "ablate": {
        "values": (_list(str), ()),
    },
}

# keys that do not affect results and are left out of the config hash
_UNHASHED = {("experiment", "output_dir"), ("experiment", "name")}


@dataclass(frozen=True)
class ExperimentConfig:
    values: dict  # section -> key -> parsed value
    source: str = ""

    def get(self, section: str, key: str):
        return self.values[section][key]

    @property
    def mode(self) -> str:
        return self.values["experiment"]["mode"]

    @property
    def seed(self) -> int:
        return self.values["experiment"]["seed"]

    def config_hash(self) -> str:
        canon = {s: {k: v for k, v in kv.items() if (s, k) not in _UNHASHED}
                 for s, kv in self.values.items()}
        blob = json.dumps(canon, sort_keys=True, default=list).encode("utf-8")
        return hashlib.sha256(blob).hexdigest()[:16]

    def output_dir(self) -> str:
        root = os.environ.get(OUTPUT_ROOT_ENV) or self.values["experiment"]["output_dir"]
        return os.path.join(root, self.values["experiment"]["name"])

    # -- typed sub-configs ------------------------------------------------------

    def recipe(self) -> SceneRecipe:
        s = self.values["scenes"]
        return SceneRecipe(family=s["family"], n_gt=s["n_gt"], n_sparse=s["n_sparse"],
                           radius=s["radius"], noise=s["noise"])

    def schedule(self):
        s = self.values["schedule"]
        return build_schedule(s["T"], s["kind"], s["beta_start"], s["beta_end"])

    def architecture(self) -> Architecture:
        n = self.values["net"]
        return Architecture(hidden=n["hidden"], activation=n["activation"],
                            time_width=n["time_width"], time_max_freq=n["time_max_freq"])

    def pretrain(self) -> PretrainConfig:
        t = self.values["teacher"]
        return PretrainConfig(iterations=t["iterations"], lr=t["lr"], lr_final=t["lr_final"],
                              batch_scenes=t["batch_scenes"], seed=self.seed)

    def train(self, **overrides) -> TrainConfig:
        t = dict(self.values["train"])
        t.pop("eval_every")
        steps = t.pop("student_steps")
        kw = dict(t, student_steps=steps or None, T=self.values["schedule"]["T"],
                  seed=self.seed)
        kw.update(overrides)
        return TrainConfig(**kw)

    def metric_config(self) -> MetricConfig:
        e = self.values["eval"]
        return MetricConfig(jsd_bins=e["jsd_bins"], jsd_dims=e["jsd_dims"],
                            iou_resolutions=e["iou_resolutions"], emd_cap=e["emd_cap"],
                            seed=self.seed)

    def finetune(self) -> FinetuneConfig:
        d = self.values["dpo"]
        return FinetuneConfig(iterations=d["iterations"], lr0=d["lr0"], gamma=d["gamma"],
                              seed=self.seed, dpo=DPOConfig(d["beta"], d["weighting"]))


def _choice(section, key, value, options):
    if value not in options:
        raise ConfigError(f"[{section}] {key}: {value!r} is not one of {', '.join(options)}")


def parse_config(text: str, source: str = "<string>") -> ExperimentConfig:
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str  # keys are case sensitive (K, T)
    try:
        cp.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {exc}") from exc
    values = {}
    for section in cp.sections():
        if section not in FIELDS:
            raise ConfigError(f"{source}: unknown section [{section}]")
        for key in cp[section]:
            if key not in FIELDS[section]:
                raise ConfigError(f"{source}: unknown key [{section}] {key}")
    for section, fields in FIELDS.items():
        values[section] = {}
        for key, (conv, default) in fields.items():
            if cp.has_option(section, key):
                raw = cp.get(section, key)
                try:
                    values[section][key] = conv(raw)
                except ValueError:
                    raise ConfigError(f"{source}: [{section}] {key}: expected "
                                      f"{conv.__name__}, got {raw!r}") from None
            else:
                values[section][key] = default
    cfg = ExperimentConfig(values, source)
    validate(cfg)
    return cfg


def load_config(path) -> ExperimentConfig:
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from exc
    return parse_config(text, str(path))


def validate(cfg: ExperimentConfig) -> None:
    v = cfg.values
    if v["experiment"]["mode"] is None:
        raise ConfigError("[experiment] mode is required")
    _choice("experiment", "mode", v["experiment"]["mode"], MODES)
    if v["experiment"]["seed"] is None:
        raise ConfigError("[experiment] seed is required")
    if v["experiment"]["seed"] < 0:
        raise ConfigError("[experiment] seed: must be >= 0")
    if os.sep in v["experiment"]["name"] or v["experiment"]["name"] in ("", ".", ".."):
        raise ConfigError("[experiment] name: must be a plain directory name")
    _choice("scenes", "family", v["scenes"]["family"], SCENE_FAMILIES)
    _choice("net", "activation", v["net"]["activation"], ACTIVATIONS)
    _choice("train", "metric", v["train"]["metric"], METRICS)
    _choice("train", "step_strategy", v["train"]["step_strategy"], STEP_STRATEGIES)
    _choice("train", "variant", v["train"]["variant"], VARIANTS)
    _choice("eval", "variant", v["eval"]["variant"], VARIANTS)
    _choice("dpo", "weighting", v["dpo"]["weighting"], WEIGHTINGS)
    for section, key in (("scenes", "train_scenes"), ("scenes", "heldout_scenes"),
                         ("train", "K"), ("eval", "K"), ("dpo", "n_pairs"),
                         ("dpo", "pair_nfe")):
        if v[section][key] < 1:
            raise ConfigError(f"[{section}] {key}: must be >= 1")
    for section, key in (("train", "iterations"), ("teacher", "iterations"),
                         ("dpo", "iterations"), ("train", "eval_every")):
        if v[section][key] < 0:
            raise ConfigError(f"[{section}] {key}: must be >= 0")
    T = v["schedule"]["T"]
    for n in v["eval"]["nfe"]:
        if not 1 <= n <= T:
            raise ConfigError(f"[eval] nfe: {n} outside [1, {T}]")
    if not v["eval"]["nfe"]:
        raise ConfigError("[eval] nfe: at least one value is required")
    # build every sub-config once so their own checks name the section
    for section, build in (("scenes", cfg.recipe), ("schedule", cfg.schedule),
                           ("net", cfg.architecture), ("train", cfg.train),
                           ("eval", cfg.metric_config), ("dpo", cfg.finetune)):
        try:
            build()
        except ValueError as exc:
            raise ConfigError(f"[{section}] {exc}") from None
    mode = v["experiment"]["mode"]
    if mode.startswith("ablate-") and not v["ablate"]["values"]:
        raise ConfigError(f"[ablate] values: required for mode {mode}")
    if mode == "eval" and not v["eval"]["checkpoint"]:
        raise ConfigError("[eval] checkpoint: required for mode eval")
    if mode.startswith("ablate-"):
        _check_ablation_values(mode, v["ablate"]["values"], T)


def _check_ablation_values(mode, values, T):
    try:
        if mode == "ablate-lambda":
            bad = [x for x in values if not float(x) > 1]
            if bad:
                raise ConfigError(f"[ablate] values: lambda must be > 1, got {bad}")
        elif mode == "ablate-nfe":
            bad = [x for x in values if not 1 <= int(x) <= T]
            if bad:
                raise ConfigError(f"[ablate] values: NFE outside [1, {T}]: {bad}")
        elif mode == "ablate-metric":
            for x in values:
                _choice("ablate", "values", x, METRICS)
        elif mode == "ablate-strategy":
            for x in values:
                _choice("ablate", "values", x, STEP_STRATEGIES)
    except ValueError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"[ablate] values: {exc}") from None
