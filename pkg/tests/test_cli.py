import csv
import json
import os

import numpy as np
import pytest

from music import cli
from music import training as TR

GEN = "[solver]\nnx = 40\nnt = 50\ndt = 0.001\n"
TRAIN = """[system]
name = swe
[sampling]
n_s = 10
n_t = 10
[model]
layers = 2
width = 6
[train]
epochs = 20
val_stride = 5
lr_grid = 1e-2
lam0_grid = 1e-4, 1e-6
"""


def _write(path, text):
    path.write_text(text)
    return str(path)


def _outputs(d):
    with open(os.path.join(d, cli.MANIFEST)) as fh:
        return json.load(fh)["outputs"]


def _report(d):
    with open(os.path.join(d, "report.csv")) as fh:
        rows = list(csv.reader(fh))[2:]
    return {(r[1], r[2]): float(r[3]) for r in rows}


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    gen = _write(root / "gen.ini", GEN)
    cfg = _write(root / "train.ini", TRAIN)
    data = str(root / "data")
    assert cli.main(["generate", "swe", "--config", gen, "--out", data]) == 0
    run = str(root / "run")
    assert cli.main(["train", data, "--config", cfg, "--out", run, "--quiet"]) == 0
    return root, gen, cfg, data, run


def test_generate_is_deterministic(work, tmp_path):
    root, gen, _, data, _ = work
    other = str(tmp_path / "again")
    assert cli.main(["generate", "swe", "--config", gen, "--out", other]) == 0
    assert _outputs(other) == _outputs(data)
    assert set(_outputs(data)) == {"h.bin", "hu.bin", "manifest.txt", "config.ini"}


def test_train_is_deterministic(work, tmp_path):
    root, _, cfg, data, run = work
    other = str(tmp_path / "run2")
    assert cli.main(["train", data, "--config", cfg, "--out", other, "--quiet"]) == 0
    a, b = _outputs(run), _outputs(other)
    assert a == b
    assert {"model.ckpt", "model_pruned.ckpt", "report.csv"} <= set(a)
    assert "history_lr0.01_lam0.0001.csv" in a and "history_lr0.01_lam1e-06.csv" in a
    # timing lives outside the hashed outputs
    assert not any(k.startswith("timing") for k in a)


def test_evaluate_matches_training_report(work, tmp_path):
    _, _, _, data, run = work
    e1, e2 = str(tmp_path / "e1"), str(tmp_path / "e2")
    assert cli.main(["evaluate", run, data, "--out", e1]) == 0
    assert cli.main(["evaluate", run, data, "--out", e2]) == 0
    assert _outputs(e1) == _outputs(e2)
    a, b = _report(run), _report(e1)
    assert a.keys() == b.keys()
    for k in a:
        assert abs(a[k] - b[k]) <= 1e-12
    assert "diff/h.bin" in _outputs(e1)


def test_evaluate_with_noise_is_seeded(work, tmp_path):
    _, _, _, data, run = work
    outs = []
    for name, seed in (("a", 4), ("b", 4), ("c", 5)):
        d = str(tmp_path / name)
        assert cli.main(["evaluate", run, data, "--out", d, "--noise", "0.05", "--seed", str(seed)]) == 0
        outs.append(_outputs(d)["report.csv"])
    assert outs[0] == outs[1] != outs[2]


def test_forecast_window_report(work, tmp_path):
    _, _, cfg, data, _ = work
    out = str(tmp_path / "fc")
    assert cli.main(["train", data, "--config", cfg, "--out", out, "--t1", "0.5", "--quiet"]) == 0
    rep = _report(out)
    assert ("forecast", "fullfield") in rep and ("train", "fullfield") in rep


def test_decoupled_writes_two_checkpoints(work, tmp_path):
    _, _, cfg, data, _ = work
    out = str(tmp_path / "dec")
    assert cli.main(["train", data, "--config", cfg, "--out", out, "--mode", "decoupled", "--quiet"]) == 0
    outs = _outputs(out)
    assert {"data_net.ckpt", "eq_net.ckpt", "history.csv", "report.csv"} <= set(outs)
    assert "model.ckpt" not in outs
    ev = str(tmp_path / "dec_eval")
    assert cli.main(["evaluate", out, data, "--out", ev]) == 0
    assert abs(_report(out)[("full", "fullfield")] - _report(ev)[("full", "fullfield")]) <= 1e-12


def test_resume_matches_uninterrupted(work, tmp_path):
    root, _, _, data, _ = work
    one = TRAIN.replace("lam0_grid = 1e-4, 1e-6", "lam0_grid = 1e-4")
    full_cfg = _write(tmp_path / "full.ini", one)
    half_cfg = _write(tmp_path / "half.ini", one.replace("epochs = 20", "epochs = 8"))
    full, half, rest = (str(tmp_path / n) for n in ("full", "half", "rest"))
    assert cli.main(["train", data, "--config", full_cfg, "--out", full, "--quiet"]) == 0
    assert cli.main(["train", data, "--config", half_cfg, "--out", half, "--quiet"]) == 0
    assert cli.main(["train", data, "--config", full_cfg, "--out", rest, "--quiet",
                     "--resume", os.path.join(half, "model.ckpt")]) == 0
    from music.network import load_checkpoint
    a, _, _ = load_checkpoint(os.path.join(full, "model.ckpt"))
    b, meta, _ = load_checkpoint(os.path.join(rest, "model.ckpt"))
    assert a.theta.tobytes() == b.theta.tobytes() and int(meta["epoch"]) == 20


def test_sweep_is_resumable(work, tmp_path):
    _, _, _, data, _ = work
    grid = _write(tmp_path / "grid.ini", TRAIN.replace("lam0_grid = 1e-4, 1e-6", "lam0_grid = 1e-4")
                  + "[sweep]\nwidth = 4, 6\nseeds = 0, 1\n")
    out = str(tmp_path / "sw")
    assert cli.sweep_run(grid, out, jobs=1, dataset_dir=data) == (4, 0)
    first = (tmp_path / "sw" / "sweep.csv").read_text()
    assert cli.sweep_run(grid, out, jobs=1, dataset_dir=data) == (0, 0)
    assert (tmp_path / "sw" / "sweep.csv").read_text() == first
    rows = list(csv.reader(first.splitlines()[1:]))
    assert tuple(rows[0]) == cli.SWEEP_COLUMNS
    kinds = [r[0] for r in rows[1:]]
    assert kinds.count("run") == 4 and kinds.count("summary") == 2
    # damaging one cell re-trains exactly that cell
    cell = next(p for p in (tmp_path / "sw" / "cells").iterdir())
    (cell / "train" / "report.csv").write_text("tampered\n")
    (cell / cli.MANIFEST).write_text("{}")
    assert cli.sweep_run(grid, out, jobs=1, dataset_dir=data) == (1, 0)


def test_sweep_failed_cell_is_partial(work, tmp_path):
    _, _, _, data, _ = work
    grid = _write(tmp_path / "bad.ini", TRAIN + "[sweep]\nmode = gated, topk\n")
    out = str(tmp_path / "bad")
    assert cli.main(["sweep", grid, data, "--out", out, "--jobs", "1"]) == cli.EXIT_PARTIAL
    text = (tmp_path / "bad" / "sweep.csv").read_text()
    assert ",failed," in text and ",ok," in text


def test_exit_codes(work, tmp_path, capsys):
    _, gen, cfg, data, run = work
    assert cli.main(["generate", "heat", "--out", str(tmp_path / "x")]) == cli.EXIT_USAGE
    assert "unknown system" in capsys.readouterr().err
    cfl = _write(tmp_path / "cfl.ini", "[solver]\nnx = 40\nnt = 5\ndt = 0.5\n")
    assert cli.main(["generate", "swe", "--config", cfl, "--out", str(tmp_path / "c")]) == cli.EXIT_SOLVER
    assert not os.path.exists(tmp_path / "c")
    assert cli.main(["train", str(tmp_path / "nowhere"), "--config", cfg,
                     "--out", str(tmp_path / "t")]) == cli.EXIT_INPUT
    fn_cfg = _write(tmp_path / "fn.ini", TRAIN.replace("name = swe", "name = fn"))
    assert cli.main(["train", data, "--config", fn_cfg, "--out", str(tmp_path / "f")]) == cli.EXIT_INPUT
    assert cli.main(["train", data, "--config", str(tmp_path / "missing.ini"),
                     "--out", str(tmp_path / "m")]) == cli.EXIT_USAGE
    bad = _write(tmp_path / "bad.ini", TRAIN.replace("epochs = 20", "epochs = many"))
    assert cli.main(["train", data, "--config", bad, "--out", str(tmp_path / "b")]) == cli.EXIT_USAGE
    with pytest.raises(SystemExit) as exc:
        cli.main(["frobnicate"])
    assert exc.value.code == 2


def test_diverged_exit_code(work, tmp_path, monkeypatch, capsys):
    _, _, cfg, data, _ = work

    def diverge(*a, **k):
        raise TR.TrainingDiverged("all grid points diverged", {(0.01, 1e-4): float("nan")})

    monkeypatch.setattr(TR, "train", diverge)
    assert cli.main(["train", data, "--config", cfg, "--out", str(tmp_path / "d"), "--quiet"]) == cli.EXIT_DIVERGED
    assert "lr=0.01" in capsys.readouterr().err


def test_dataset_from_environment(work, tmp_path, monkeypatch):
    root, _, cfg, data, run = work
    monkeypatch.setenv(cli.DATA_ENV, str(tmp_path))
    os.symlink(data, tmp_path / "swe")
    out = str(tmp_path / "env_run")
    assert cli.main(["train", "--config", cfg, "--out", out, "--quiet"]) == 0
    assert _outputs(out)["model.ckpt"] == _outputs(run)["model.ckpt"]
    monkeypatch.delenv(cli.DATA_ENV)
    assert cli.main(["train", "--config", cfg, "--out", out, "--quiet"]) == cli.EXIT_USAGE


CONFIG_DIR = os.path.join(os.path.dirname(__file__), os.pardir, "configs")


@pytest.mark.parametrize("name", sorted(os.listdir(CONFIG_DIR)))
def test_shipped_configs_parse(name):
    cp, _ = cli.load_config(os.path.join(CONFIG_DIR, name))
    system = cli.system_name(cp)
    cli.train_config(cp)
    cli.split_spec(cp)
    if cp.has_section("sweep"):
        assert len(cli.sweep_cells(cp)) > 1
    if cp.has_section("solver"):
        assert system in ("fn", "wildfire")
