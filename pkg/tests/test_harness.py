import csv
import json
import os

import pytest

from distdpo.harness import ConfigError, SchemaError, compare, parse_config, run
from distdpo.harness.cli import main
from distdpo.harness.config import OUTPUT_ROOT_ENV
from distdpo.harness.runner import strip_columns
from distdpo.pointcloud import SceneRecipe, save_scene, synth_scene

# compare delta for CD 0.434 -> 0.354, computed by hand: -0.08 / 0.434
CD_PCT = -18.433179723502302

BASE = """
[experiment]
mode = {mode}
seed = {seed}
name = tiny

[scenes]
n_gt = 48
n_sparse = 6
train_scenes = 4
heldout_scenes = 2

[schedule]
T = 10

[net]
hidden = 8, 8
time_width = 4

[teacher]
iterations = 20

[train]
K = 4
iterations = {iters}
lr0 = 1e-3
eval_every = 2

[eval]
nfe = 2
K = 4
jsd_bins = 8
emd_cap = 32

[dpo]
n_pairs = 3
pair_nfe = 2
iterations = 4
lr0 = 1e-4
"""


def tiny(mode="ablate-nfe", seed=3, iters=4, extra=""):
    return BASE.format(mode=mode, seed=seed, iters=iters) + extra


def rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


@pytest.mark.parametrize("text, field", [
    (tiny().replace("seed = 3", ""), "seed"),
    (tiny().replace("mode = ablate-nfe", "mode = fly"), "mode"),
    (tiny() + "\n[train]\n", "train"),
    (tiny().replace("lr0 = 1e-3", "lr0 = fast"), "lr0"),
    (tiny().replace("lr0 = 1e-3", "lr0 = 1e-3\nlr1 = 2"), "lr1"),
    (tiny() + "[bogus]\nx = 1\n", "bogus"),
    (tiny(), "values"),
    (tiny("eval"), "checkpoint"),
    (tiny(extra="[ablate]\nvalues = 1, 99\n"), "values"),
    (tiny("ablate-lambda", extra="[ablate]\nvalues = 1.0\n"), "values"),
    (tiny(extra="[ablate]\nvalues = 2\n").replace("nfe = 2", "nfe = 0"), "nfe"),
])
def test_config_errors_name_the_field(text, field):
    with pytest.raises(ConfigError) as exc:
        parse_config(text)
    assert field in str(exc.value)


def test_config_hash_ignores_location():
    a = parse_config(tiny(extra="[ablate]\nvalues = 2\n"))
    b = parse_config(tiny(extra="[ablate]\nvalues = 2\n").replace("name = tiny",
                                                                  "name = other"))
    c = parse_config(tiny(seed=4, extra="[ablate]\nvalues = 2\n"))
    assert a.config_hash() == b.config_hash() != c.config_hash()


def test_output_root_env(monkeypatch, tmp_path):
    cfg = parse_config(tiny("theory-check"))
    monkeypatch.setenv(OUTPUT_ROOT_ENV, str(tmp_path))
    assert cfg.output_dir() == os.path.join(str(tmp_path), "tiny")
    res = run(cfg)
    assert os.path.exists(os.path.join(str(tmp_path), "tiny", "results.csv"))
    assert all(r["passed"] for r in res.results)


def test_ablate_nfe_rows_and_artifacts(tmp_path):
    cfg = parse_config(tiny(extra="[ablate]\nvalues = 1, 2, 4, 8\n"))
    res = run(cfg, str(tmp_path / "a"))
    out = tmp_path / "a"
    rs = rows(out / "results.csv")
    assert [r["nfe"] for r in rs] == ["1", "2", "4", "8"]
    assert all(r["config_hash"] == cfg.config_hash() for r in rs)
    schema = json.loads((out / "schema.json").read_text())
    with open(out / "results.csv") as fh:
        assert fh.readline().strip().split(",") == schema["results.csv"]["columns"]
    assert schema["results.csv"]["nondeterministic"] == ["wall_time_seconds"]
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["config_hash"] == res.config_hash and manifest["seed"] == 3
    assert manifest["sampler_variant"]["eval"] == "local-consistent"
    assert manifest["version"]
    for f in manifest["files"]:
        assert (out / f).exists(), f
    for png in ("results_cd.png", "winner_loser.png", "heldout_cd.png"):
        assert (out / "figures" / png).read_bytes()[:4] == b"\x89PNG"
    assert len(rows(out / "training_log.csv")) == 4
    assert [r["iteration"] for r in rows(out / "heldout_curve.csv")] == ["0", "2", "4"]


def test_wall_time_decreases_with_fewer_steps(tmp_path):
    text = tiny(iters=0, extra="[ablate]\nvalues = 1, 2, 4, 8\n")
    text = text.replace("hidden = 8, 8", "hidden = 64, 64").replace("n_gt = 48", "n_gt = 256")
    text = text.replace("n_sparse = 6", "n_sparse = 32").replace("K = 4", "K = 8")
    text = text.replace("heldout_scenes = 2", "heldout_scenes = 9").replace("T = 10", "T = 50")
    res = run(parse_config(text), str(tmp_path), render=False)
    times = [r["wall_time_seconds"] for r in res.results]
    assert all(a < b for a, b in zip(times, times[1:])), times


def test_ablate_lambda_five_rows(tmp_path):
    cfg = parse_config(tiny("ablate-lambda", iters=2,
                            extra="[ablate]\nvalues = 1.05, 1.1, 1.2, 1.5, 2.0\n"))
    res = run(cfg, str(tmp_path), render=False)
    assert [r["setting"] for r in res.results] == [
        "lambda_alt=1.05", "lambda_alt=1.1", "lambda_alt=1.2", "lambda_alt=1.5",
        "lambda_alt=2.0"]


@pytest.mark.parametrize("mode, values, models", [
    ("ablate-metric", "cd, jsd", ["student", "student"]),
    ("ablate-strategy", "single, random", ["student", "student"]),
    ("distill-dpo", "", ["teacher", "student"]),
    ("score-distill", "", ["teacher", "student-sd"]),
    ("train-teacher", "", ["teacher"]),
])
def test_modes(tmp_path, mode, values, models):
    extra = f"[ablate]\nvalues = {values}\n" if values else ""
    res = run(parse_config(tiny(mode, iters=2, extra=extra)), str(tmp_path), render=False)
    assert [r["model"] for r in res.results] == models


def test_dpo_finetune_with_redistill(tmp_path):
    text = tiny("dpo-finetune", iters=2) + "redistill = true\n"
    res = run(parse_config(text), str(tmp_path), render=False)
    assert [r["model"] for r in res.results] == ["teacher", "teacher-dpo", "student"]
    assert len(rows(tmp_path / "pairs" / "manifest.csv")) == 3


def test_eval_mode_and_missing_checkpoint(tmp_path):
    res = run(parse_config(tiny("train-teacher")), str(tmp_path / "t"), render=False)
    ckpt = tmp_path / "t" / "checkpoints" / "teacher.bin"
    extra = f"checkpoint = {ckpt}\n"
    cfg = parse_config(tiny("eval").replace("emd_cap = 32", "emd_cap = 32\n" + extra))
    ev = run(cfg, str(tmp_path / "e"), render=False)
    assert ev.results[0]["cd"] == res.results[0]["cd"]
    cfg = parse_config(tiny("eval").replace("emd_cap = 32",
                                            f"emd_cap = 32\ncheckpoint = {tmp_path}/nope.bin\n"))
    with pytest.raises(Exception) as exc:
        run(cfg, str(tmp_path / "x"))
    assert "not found" in str(exc.value)


def test_teacher_checkpoint_reuse(tmp_path):
    run(parse_config(tiny("train-teacher")), str(tmp_path / "t"), render=False)
    ckpt = tmp_path / "t" / "checkpoints" / "teacher.bin"
    text = tiny("distill-dpo", iters=2).replace("iterations = 20", f"checkpoint = {ckpt}")
    res = run(parse_config(text), str(tmp_path / "d"), render=False)
    assert not (tmp_path / "d" / "checkpoints" / "teacher.bin").exists()
    assert res.results[0]["model"] == "teacher"


def test_determinism_modulo_wall_time(tmp_path):
    cfg = parse_config(tiny("ablate-lambda", iters=3, extra="[ablate]\nvalues = 1.1, 1.5\n"))
    run(cfg, str(tmp_path / "a"), render=False)
    run(cfg, str(tmp_path / "b"), render=False)
    a, b = tmp_path / "a" / "results.csv", tmp_path / "b" / "results.csv"
    assert strip_columns(a) == strip_columns(b)
    for name in ("training_log.csv", "winner_loser.csv", "heldout_curve.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def _write(path, header, data):
    with open(path, "w") as fh:
        fh.write(",".join(header) + "\n")
        for r in data:
            fh.write(",".join(map(str, r)) + "\n")


HEAD = ["config_hash", "mode", "model", "setting", "nfe", "cd", "jsd", "wall_time_seconds"]


def test_compare_deltas(tmp_path):
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    _write(a, HEAD, [["h1", "eval", "m", "", 8, 0.434, 0.5, 1.0]])
    _write(b, HEAD, [["h2", "eval", "m", "", 8, 0.354, 0.5, 0.5]])
    d = {x["metric"]: x for x in compare(a, b)}
    assert d["cd"]["percent"] == pytest.approx(CD_PCT, abs=1e-9)
    assert round(d["cd"]["percent"], 1) == -18.4
    assert d["jsd"]["delta"] == 0.0 and d["jsd"]["percent"] == 0.0
    same = compare(a, a)
    assert all(x["delta"] == 0.0 and x["percent"] == 0.0 for x in same)


def test_compare_schema_mismatch(tmp_path):
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    _write(a, HEAD, [["h", "eval", "m", "", 8, 0.4, 0.5, 1.0]])
    _write(b, HEAD[:-2] + ["wall_time_seconds"], [["h", "eval", "m", "", 8, 0.4, 1.0]])
    with pytest.raises(SchemaError) as exc:
        compare(a, b)
    assert "jsd" in str(exc.value)


def test_cli_run_compare_eval(tmp_path, capsys):
    cfg_path = tmp_path / "t.ini"
    cfg_path.write_text(tiny("train-teacher"))
    out = tmp_path / "run"
    assert main(["run", str(cfg_path), "--out", str(out)]) == 0
    printed = capsys.readouterr().out
    assert printed.splitlines()[0].startswith("config_hash,")

    assert main(["compare", str(out / "results.csv"), str(out / "results.csv"),
                 "--figure", str(tmp_path / "cmp.png")]) == 0
    assert (tmp_path / "cmp.png").exists()
    capsys.readouterr()

    data = tmp_path / "scenes"
    for i in range(2):
        save_scene(synth_scene(SceneRecipe(n_gt=48, n_sparse=6), 1000 + i), data)
    ckpt = out / "checkpoints" / "teacher.bin"
    assert main(["eval", str(ckpt), str(data), "--nfe", "1,2", "--K", "4",
                 "--out", str(tmp_path / "ev"), "--no-figures"]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert len(lines) == 3


def test_cli_failures(tmp_path, capsys):
    bad = tmp_path / "bad.ini"
    bad.write_text(tiny().replace("seed = 3", ""))
    assert main(["run", str(bad)]) != 0
    assert "seed" in capsys.readouterr().err
    assert main(["run", str(tmp_path / "missing.ini")]) != 0
    assert main(["eval", str(tmp_path / "none.bin"), str(tmp_path)]) != 0
    assert "not found" in capsys.readouterr().err
    a = tmp_path / "a.csv"
    _write(a, ["x"], [[1]])
    assert main(["compare", str(a), str(a)]) != 0
