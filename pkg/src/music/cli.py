"""Command-line experiment harness.

    music generate SYSTEM --config cfg.ini --out DIR
    music train [DATASET] --config cfg.ini --out DIR [--seed --noise --t1 --mode --resume CKPT]
    music evaluate RUN [DATASET] --out DIR [--noise --seed --t1 --mode]
    music sweep GRID.ini --out DIR [--jobs N]

Every command writes ``run.json``, a manifest listing each output file with
its sha256 digest. Wall-clock data goes to ``timing.json`` (and per-epoch
``timing_*.csv``), which the manifest names as volatile, so everything else
is byte-identical when a command is rerun with the same config and seed.
"""

import argparse
import concurrent.futures
import configparser
import hashlib
import io
import itertools
import json
import os
import shutil
import sys
import time

import numpy as np

from . import __version__
from . import metrics as M
from . import network as N
from . import sampling as P
from . import solvers as S
from . import training as TR
from .systems import SYSTEMS, LossWeights

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_SOLVER = 3
EXIT_DIVERGED = 4
EXIT_INPUT = 5
EXIT_PARTIAL = 6

MANIFEST = "run.json"
TIMING = "timing.json"
DATA_ENV = "MUSIC_DATA_DIR"
SWEEP_AXES = ("layers", "width", "n_s", "n_t", "noise", "mode")
SWEEP_COLUMNS = ("kind", "layers", "width", "n_s", "n_t", "noise", "mode", "seed", "cell", "status",
                 "fullfield", "fullfield_std", "mean_of_vars", "sparsity_percent", "n_seeds")


class UsageError(Exception):
    pass


class InputError(Exception):
    pass


# config ----------------------------------------------------------------------------------------


def new_config():
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    return cp


def load_config(path):
    """Parse an INI config; returns ``(parser, sha256 of the bytes read)``."""
    cp = new_config()
    if path is None:
        return cp, None
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from None
    try:
        cp.read_string(raw.decode())
    except configparser.Error as exc:
        raise UsageError(f"bad config {path}: {exc}") from None
    return cp, hashlib.sha256(raw).hexdigest()


def config_text(cp):
    """Canonical text of a config: sections and keys sorted."""
    buf = io.StringIO()
    for sec in sorted(cp.sections()):
        buf.write(f"[{sec}]\n")
        for k in sorted(cp[sec]):
            buf.write(f"{k} = {cp[sec][k]}\n")
        buf.write("\n")
    return buf.getvalue()


def _set(cp, sec, key, value):
    if value is None:
        return
    if not cp.has_section(sec):
        cp.add_section(sec)
    cp[sec][key] = str(value)


def _get(cp, sec, key, conv=str, default=None):
    if not cp.has_option(sec, key) or cp[sec][key].strip() == "":
        return default
    raw = cp[sec][key].strip()
    try:
        return conv(raw)
    except ValueError:
        raise UsageError(f"[{sec}] {key} = {raw!r} is not a valid {getattr(conv, '__name__', 'value')}") from None


def _floats(raw):
    return tuple(float(v) for v in raw.replace(";", ",").split(",") if v.strip())


def _bool(raw):
    low = raw.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(raw)


def apply_overrides(cp, args):
    _set(cp, "run", "seed", getattr(args, "seed", None))
    _set(cp, "sampling", "noise", getattr(args, "noise", None))
    _set(cp, "sampling", "t1", getattr(args, "t1", None))
    _set(cp, "train", "mode", getattr(args, "mode", None))
    return cp


def system_name(cp, given=None):
    name = given or _get(cp, "system", "name")
    if name is None:
        raise UsageError("no system given (positional argument or [system] name)")
    if name not in SYSTEMS:
        raise UsageError(f"unknown system {name!r}; choose from {', '.join(SYSTEMS)}")
    return name


def train_config(cp):
    mode = _get(cp, "train", "mode", str, "gated")
    baseline = "music"
    if mode == "none":
        baseline = "piml_inc"
    elif mode == "decoupled":
        mode, baseline = "none", "decoupled"
    weights = LossWeights(_get(cp, "weights", "data", float, 1.0), _get(cp, "weights", "phys", float, 1.0),
                          _get(cp, "weights", "ic", float, 1.0))
    epochs = _get(cp, "train", "epochs", int, 10000)
    try:
        return TR.TrainConfig(
            layers=_get(cp, "model", "layers", int, 4),
            width=_get(cp, "model", "width", int, 20),
            activation=_get(cp, "model", "activation", str, "tanh"),
            mode=mode,
            baseline=baseline,
            k=_get(cp, "train", "k", int),
            lam0_grid=_get(cp, "train", "lam0_grid", _floats, (1e-6,)),
            lr_grid=_get(cp, "train", "lr_grid", _floats, (1e-3,)),
            epochs=epochs,
            warmup=_get(cp, "train", "warmup", int, 10000),
            val_stride=_get(cp, "train", "val_stride", int, 100),
            prune_stride=_get(cp, "train", "prune_stride", int, 100),
            seed=_get(cp, "run", "seed", int, 0),
            weights=weights,
            batch_size=_get(cp, "train", "batch_size", int),
            residual_scaling=_get(cp, "train", "residual_scaling", _bool, True),
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def split_spec(cp):
    try:
        return P.SplitSpec(_get(cp, "sampling", "n_s", int, 100), _get(cp, "sampling", "n_t", int, 800),
                           _get(cp, "sampling", "train_frac", float, 0.8), _get(cp, "sampling", "t1", float))
    except ValueError as exc:
        raise UsageError(str(exc)) from None


# hashing and manifests ------------------------------------------------------------------------------


def file_digest(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def dir_digest(path):
    """Hash of a dataset directory: every regular file's name and bytes, sorted."""
    h = hashlib.sha256()
    for name in sorted(os.listdir(path)):
        p = os.path.join(path, name)
        if name in (MANIFEST, TIMING) or not os.path.isfile(p):
            continue
        h.update(name.encode() + b"\0" + file_digest(p).encode())
    return h.hexdigest()


def write_manifest(out_dir, command, outputs, volatile=(), **info):
    """Write ``run.json`` listing ``outputs`` (paths relative to ``out_dir``) with digests."""
    files = {}
    for rel in sorted(set(outputs)):
        files[rel] = file_digest(os.path.join(out_dir, rel))
    doc = {"command": command, "tool_version": __version__, "outputs": files,
           "volatile": sorted(volatile)}
    doc.update(info)
    text = json.dumps(doc, indent=1, sort_keys=True) + "\n"
    with open(os.path.join(out_dir, MANIFEST), "w") as fh:
        fh.write(text)
    return doc


def read_manifest(run_dir):
    p = os.path.join(run_dir, MANIFEST)
    try:
        with open(p) as fh:
            return json.load(fh)
    except (OSError, ValueError) as exc:
        raise InputError(f"cannot read manifest {p}: {exc}") from None


def write_timing(out_dir, seconds, **more):
    doc = {"wall_seconds": seconds, **more}
    with open(os.path.join(out_dir, TIMING), "w") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True)


def _write_text(out_dir, rel, text):
    p = os.path.join(out_dir, rel)
    os.makedirs(os.path.dirname(p) or ".", exist_ok=True)
    with open(p, "w") as fh:
        fh.write(text)
    return rel


# generate ------------------------------------------------------------------------------------------


def run_solver(system, cp):
    """Run the reference solver of ``system`` with the ``[solver]`` settings."""
    sec = "solver"
    seed = _get(cp, "run", "seed", int, 0)
    g = lambda key, conv=float, default=None: _get(cp, sec, key, conv, default)  # noqa: E731
    if system in ("swe", "swe_swapped"):
        grid = S.swe_grid(g("nx", int, 200), g("nt", int, 1000), g("dt", float, 0.001), g("length", float, 10.0))
        return S.solve_swe_rusanov(grid, g=g("g", float, S.GRAVITY), boundary=g("boundary", str, "reflective"))
    if system == "fn":
        grid = S.fn_grid(g("n", int, 200), g("length", float, 100.0), g("dt", float, 0.0005),
                         g("t_end", float, 60.0), g("save_dt", float, 1.0))
        consts = {k: g(k) for k in S.FN_DEFAULTS if g(k) is not None}
        return S.solve_fn_fd(grid, consts, seed=seed)
    if system == "rd":
        grid = S.rd_grid(g("n", int, 128), g("half", float, 10.0), g("dt", float, 0.005),
                         g("t_end", float, 10.0), g("nt", int, 101))
        return S.solve_rd_fd(grid, diffusion=g("diffusion", float, 0.1))
    if system == "wildfire":
        grid = S.wildfire_grid(g("n", int, 51), g("length", float, 10.0), g("save_dt", float, 0.1),
                               g("t_end", float, 10.0))
        wind = S.make_wind(g("wind", str, "fixed"), grid, seed,
                           (g("wind_vx", float, 0.3), g("wind_vy", float, 0.3)), g("wind_std", float, 0.5))
        ic = S.gaussian_fire_ic(grid, g("amp", float, 10.0), (g("cx", float, 2.0), g("cy", float, 2.0)),
                                g("width", float, 1.0), g("fuel", float, 1.0))
        consts = {k: g(k) for k in S.WILDFIRE_DEFAULTS if g(k) is not None}
        return S.solve_wildfire_fd(grid, consts, wind, ic, g("discard_until", float, 2.0))
    raise UsageError(f"unknown system {system!r}")


def cmd_generate(args):
    cp, cdig = load_config(args.config)
    apply_overrides(cp, args)
    system = system_name(cp, args.system)
    out = args.out or os.path.join(os.environ.get(DATA_ENV, "."), system)
    t0 = time.perf_counter()
    try:
        series = run_solver(system, cp)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    created = not os.path.isdir(out)
    try:
        paths = S.write_series(out, list(series), {"system": system, "seed": _get(cp, "run", "seed", int, 0)})
    except BaseException:
        if created:
            shutil.rmtree(out, ignore_errors=True)
        raise
    rels = [os.path.relpath(p, out) for p in paths]
    cfg_rel = _write_text(out, "config.ini", config_text(cp))
    write_manifest(out, "generate", rels + [cfg_rel], [TIMING], system=system,
                   seed=_get(cp, "run", "seed", int, 0), config_digest=cdig,
                   effective_config_digest=hashlib.sha256(config_text(cp).encode()).hexdigest())
    write_timing(out, time.perf_counter() - t0)
    print(f"wrote {system} dataset to {out}")
    return EXIT_OK


# dataset loading ----------------------------------------------------------------------------------


def resolve_dataset(path, system):
    if path:
        return path
    root = os.environ.get(DATA_ENV)
    if not root:
        raise UsageError(f"no dataset directory given and {DATA_ENV} is unset")
    return os.path.join(root, "swe" if system == "swe_swapped" else system)


def load_dataset(path, system):
    """Read a generated dataset and check it belongs to ``system``."""
    try:
        series, meta = S.read_series(path)
    except (OSError, ValueError) as exc:
        raise InputError(f"cannot read dataset {path}: {exc}") from None
    have = meta.get("system")
    ok = {system, "swe"} if system == "swe_swapped" else {system}
    if have not in ok:
        raise InputError(f"dataset {path} holds system {have!r}, config wants {system!r}")
    try:
        ds = P.build_dataset(series, system)
    except ValueError as exc:
        raise InputError(str(exc)) from None
    return ds, dir_digest(path)


# train -------------------------------------------------------------------------------------------


def _ckpt_meta(system, cfg, ds, selected, ds_digest, extra=None):
    meta = {"system": system, "mode": cfg.mode, "baseline": cfg.baseline, "seed": cfg.seed,
            "lr": repr(float(selected.get("lr", float("nan")))),
            "lam0": repr(float(selected.get("lam0", 0.0))),
            "normalizer": json.dumps(ds.normalizer.to_dict(), sort_keys=True),
            "dataset_digest": ds_digest}
    meta.update(extra or {})
    return meta


def _grid_tag(lr, lam):
    return f"lr{lr:g}_lam{lam:g}"


def train_run(cp, dataset_dir, out, resume=None, log=None):
    """Train per config into ``out``; returns the run manifest dict."""
    system = system_name(cp)
    cfg = train_config(cp)
    ds, ds_digest = load_dataset(resolve_dataset(dataset_dir, system), system)
    split = P.fit_split(ds, split_spec(cp))
    noise = _get(cp, "sampling", "noise", float, 0.0)
    seed = cfg.seed
    tr, va = P.sample_meshfree(ds, split, seed)
    tr = P.add_noise(tr, noise, (seed, 1))
    va = P.add_noise(va, noise, (seed, 2))
    os.makedirs(out, exist_ok=True)
    t0 = time.perf_counter()
    outputs, volatile = [], [TIMING]
    resume_digest = file_digest(resume) if resume is not None else ""
    run_id = inputs_hash(config_text(cp), ds_digest, resume_digest)
    info = {"system": system, "seed": seed, "dataset_digest": ds_digest, "split": split.__dict__,
            "inputs_hash": run_id,
            "noise": noise, "baseline": cfg.baseline, "mode": cfg.mode, "config": config_text(cp)}
    if cfg.baseline == "decoupled":
        res = TR.train_decoupled(ds, tr, va, cfg, log=log)
        for name, net in (("data_net.ckpt", res.data_net), ("eq_net.ckpt", res.eq_net)):
            role = "data" if name.startswith("data") else "eq"
            N.save_checkpoint(os.path.join(out, name), net,
                              _ckpt_meta(system, cfg, ds, res.selected, ds_digest, {"role": role}))
            outputs.append(name)
        outputs.append(_write_text(out, "history.csv", res.history.to_csv()))
        volatile.append(_write_text(out, "timing_history.csv", res.history.timing_csv()))
        info["selected"] = {"lr": res.selected["lr"]}
        model, mode = res, "none"
    else:
        if resume is not None:
            params, meta, extra = N.load_checkpoint(resume)
            if meta.get("system") != system:
                raise InputError(f"checkpoint {resume} was trained on {meta.get('system')!r}")
            lr, lam = float(meta["lr"]), float(meta["lam0"])
            opt = {"theta": {"m": extra["adam_m_theta"], "v": extra["adam_v_theta"], "t": int(meta["adam_t"])},
                   "gates": {"m": extra["adam_m_gates"], "v": extra["adam_v_gates"], "t": int(meta["adam_t"])}}
            state = {"params": params, "opt_state": opt, "epoch": int(meta["epoch"])}
            res = TR.train_single(ds, tr, va, cfg, lr, lam, resume=state, log=log)
            info["resumed_from"] = {"path": os.path.abspath(resume), "digest": resume_digest,
                                    "epoch": int(meta["epoch"])}
        else:
            res = TR.train(ds, tr, va, cfg, log=log)
        for (lr, lam), hist in sorted(res.histories.items()):
            tag = _grid_tag(lr, lam)
            outputs.append(_write_text(out, f"history_{tag}.csv", hist.to_csv()))
            volatile.append(_write_text(out, f"timing_{tag}.csv", hist.timing_csv()))
        opt = res.opt_state
        extra = {"adam_m_theta": opt["theta"]["m"], "adam_v_theta": opt["theta"]["v"],
                 "adam_m_gates": opt["gates"]["m"], "adam_v_gates": opt["gates"]["v"]}
        meta = _ckpt_meta(system, cfg, ds, res.selected, ds_digest,
                          {"epoch": res.epoch, "adam_t": opt["theta"]["t"]})
        N.save_checkpoint(os.path.join(out, "model.ckpt"), res.params, meta, extra)
        outputs.append("model.ckpt")
        if cfg.mode == "gated":
            N.save_checkpoint(os.path.join(out, "model_pruned.ckpt"), N.export_pruned(res.params),
                              _ckpt_meta(system, cfg, ds, res.selected, ds_digest, {"pruned": 1}))
            outputs.append("model_pruned.ckpt")
        info["selected"] = {"lr": res.selected["lr"], "lam0": res.selected["lam0"]}
        info["final_validation"] = {_grid_tag(*k): v for k, v in sorted(res.finals.items())}
        model, mode = res.params, cfg.mode
    rep = report_for(model, ds, mode, split.t1, run=run_id[:16])
    outputs.append(_write_text(out, "report.csv", rep.to_csv()))
    doc = write_manifest(out, "train", outputs, volatile, **info)
    write_timing(out, time.perf_counter() - t0)
    return doc


def inputs_hash(*parts):
    """Content hash keying a run: sha256 over its input texts and digests."""
    h = hashlib.sha256()
    for part in parts:
        h.update(str(part).encode() + b"\0")
    return h.hexdigest()


def report_for(model, ds, mode, t1=None, run="run"):
    if t1 is not None:
        return TR.forecast_eval(model, ds, t1, mode, run)
    rep, _ = TR.evaluate_fields(model, ds, None, mode, run)
    return rep


def cmd_train(args):
    cp, cdig = load_config(args.config)
    apply_overrides(cp, args)
    if not args.out:
        raise UsageError("train needs --out")

    def log(epoch, loss, val):
        if not args.quiet:
            print(f"epoch {epoch} loss {loss:.6e} val {val:.6e}", flush=True)

    try:
        train_run(cp, args.dataset, args.out, args.resume, log)
    except TR.TrainingDiverged as exc:
        print(f"error: {exc}", file=sys.stderr)
        for (lr, lam), v in sorted(exc.finals.items()):
            print(f"  lr={lr:g} lam0={lam:g} final validation {v}", file=sys.stderr)
        return EXIT_DIVERGED
    print(f"wrote run to {args.out}")
    return EXIT_OK


# evaluate -----------------------------------------------------------------------------------------


def load_model(path):
    """A train run directory or a single checkpoint; returns ``(model, mode, meta)``."""
    if os.path.isdir(path):
        man = read_manifest(path)
        outs = man.get("outputs", {})
        if "data_net.ckpt" in outs:
            d, meta, _ = N.load_checkpoint(os.path.join(path, "data_net.ckpt"))
            e, _, _ = N.load_checkpoint(os.path.join(path, "eq_net.ckpt"))
            return TR.DecoupledResult(d, e, TR.History([]), {}), "none", meta
        path = os.path.join(path, "model.ckpt")
    try:
        params, meta, _ = N.load_checkpoint(path)
    except (OSError, ValueError) as exc:
        raise InputError(f"cannot load checkpoint {path}: {exc}") from None
    return params, meta.get("mode", "gated"), meta


def noisy_truth(ds, level, seed):
    """Dataset copy whose fields carry seeded Gaussian noise scaled by each field's std."""
    if not level:
        return ds
    rng = np.random.default_rng((int(seed), 3))
    fields = {}
    for v in ds.spec.variables:
        a = ds.fields[v]
        fields[v] = a + level * float(np.std(a)) * rng.standard_normal(a.shape)
    return P.Dataset(ds.system, fields, ds.axes, ds.normalizer)


def evaluate_run(run, dataset_dir, out, noise=0.0, seed=0, t1=None, mode=None):
    model, ck_mode, meta = load_model(run)
    system = meta.get("system")
    if system not in SYSTEMS:
        raise InputError(f"checkpoint names unknown system {system!r}")
    mode = mode or ck_mode
    if mode == "decoupled":
        mode = "none"
    ds, ds_digest = load_dataset(resolve_dataset(dataset_dir, system), system)
    nets = [model.data_net, model.eq_net] if isinstance(model, TR.DecoupledResult) else [model]
    for net in nets:
        if net.sizes[0] != len(ds.spec.coords):
            raise InputError(f"network takes {net.sizes[0]} inputs, dataset has {len(ds.spec.coords)} coordinates")
    if not isinstance(model, TR.DecoupledResult) and model.sizes[-1] != len(ds.spec.variables):
        raise InputError(f"network has {model.sizes[-1]} outputs, system needs {len(ds.spec.variables)}")
    # the network was fitted under the checkpoint's normalization
    if "normalizer" in meta:
        ds = P.Dataset(ds.system, ds.fields, ds.axes, N.Normalizer.from_dict(json.loads(meta["normalizer"])))
    target = noisy_truth(ds, noise, seed)
    os.makedirs(out, exist_ok=True)
    t0 = time.perf_counter()
    src = run if os.path.isfile(run) else os.path.join(run, MANIFEST)
    model_digest = file_digest(src)
    run_id = inputs_hash(model_digest, ds_digest, noise, seed, t1, mode)
    rep = report_for(model, target, mode, t1, run=run_id[:16])
    if t1 is None:
        times = target.times
    else:
        tr, fo = P.time_window_split(target, t1)
        times = {"train": target.times[tr], "forecast": target.times[fo]}
    outputs = [_write_text(out, "report.csv", rep.to_csv()),
               _write_text(out, "traces.csv", rep.traces_csv(times))]
    preds = TR.predict_fields(model, ds, None, mode)
    grid = _dataset_grid(ds)
    diffs = [S.FieldSeries(v, grid, preds[v] - target.fields[v]) for v in ds.spec.variables]
    paths = S.write_series(os.path.join(out, "diff"), diffs, {"system": system, "kind": "prediction minus truth"})
    outputs += [os.path.relpath(p, out) for p in paths]
    doc = write_manifest(out, "evaluate", outputs, [TIMING], system=system, mode=mode, noise=noise, seed=seed,
                         t1=t1, dataset_digest=ds_digest, model_digest=model_digest, inputs_hash=run_id)
    write_timing(out, time.perf_counter() - t0)
    return doc, rep


def _dataset_grid(ds):
    """A GridSpec whose coordinates reproduce the dataset axes (for the diff container)."""
    t = ds.times
    dt = float(t[1] - t[0]) if len(t) > 1 else 1.0
    ext, cells = [], []
    for a in ds.axes[:-1]:
        h = float(a[1] - a[0])
        ext.append((float(a[0]), float(a[0]) + h * (len(a) - 1)))
        cells.append(len(a))
    return S.GridSpec(ext, cells, dt, 1, len(t), "node", float(t[0]))


def cmd_evaluate(args):
    if not args.out:
        raise UsageError("evaluate needs --out")
    _, rep = evaluate_run(args.run, args.dataset, args.out, args.noise or 0.0, args.seed or 0, args.t1, args.mode)
    for w, v, e in rep.rows:
        print(f"{w:9s} {v:13s} {e:.6f}")
    return EXIT_OK


# sweep --------------------------------------------------------------------------------------------


def _axis_values(cp, key, conv):
    raw = _get(cp, "sweep", key)
    if raw is None:
        return None
    return [conv(v.strip()) for v in raw.split(",") if v.strip()]


def sweep_cells(cp):
    """All (axes dict, seed) combinations of a grid file."""
    convs = {"layers": int, "width": int, "n_s": int, "n_t": int, "noise": float, "mode": str}
    base = {"layers": _get(cp, "model", "layers", int, 4), "width": _get(cp, "model", "width", int, 20),
            "n_s": _get(cp, "sampling", "n_s", int, 100), "n_t": _get(cp, "sampling", "n_t", int, 800),
            "noise": _get(cp, "sampling", "noise", float, 0.0), "mode": _get(cp, "train", "mode", str, "gated")}
    axes = []
    for key in SWEEP_AXES:
        vals = _axis_values(cp, key, convs[key])
        axes.append(vals if vals else [base[key]])
    seeds = _axis_values(cp, "seeds", int) or [_get(cp, "run", "seed", int, 0)]
    return [(dict(zip(SWEEP_AXES, combo)), s) for combo in itertools.product(*axes) for s in seeds]


def cell_config(cp, axes, seed):
    cell = new_config()
    cell.read_string(config_text(cp))
    if cell.has_section("sweep"):
        cell.remove_section("sweep")
    _set(cell, "model", "layers", axes["layers"])
    _set(cell, "model", "width", axes["width"])
    _set(cell, "sampling", "n_s", axes["n_s"])
    _set(cell, "sampling", "n_t", axes["n_t"])
    _set(cell, "sampling", "noise", axes["noise"])
    _set(cell, "train", "mode", axes["mode"])
    _set(cell, "run", "seed", seed)
    return cell


def cell_hash(cell_cp, ds_digest):
    return hashlib.sha256((config_text(cell_cp) + ds_digest).encode()).hexdigest()


def _cell_done(cell_dir, h):
    p = os.path.join(cell_dir, MANIFEST)
    if not os.path.isfile(p):
        return False
    man = read_manifest(cell_dir)
    if man.get("cell_hash") != h:
        return False
    return all(os.path.isfile(os.path.join(cell_dir, r)) and file_digest(os.path.join(cell_dir, r)) == d
               for r, d in man.get("outputs", {}).items())


def _run_cell(cell_text, dataset_dir, cell_dir, h):
    """Train and evaluate one cell; runs in a worker process."""
    cp = new_config()
    cp.read_string(cell_text)
    if os.path.isdir(cell_dir):
        shutil.rmtree(cell_dir)
    train_dir = os.path.join(cell_dir, "train")
    try:
        train_run(cp, dataset_dir, train_dir)
        mode = train_config(cp).mode
        _, rep = evaluate_run(train_dir, dataset_dir, os.path.join(cell_dir, "eval"), mode=mode)
        status = "ok"
    except (TR.TrainingDiverged, FloatingPointError, InputError, UsageError, ValueError) as exc:
        os.makedirs(cell_dir, exist_ok=True)
        _write_text(cell_dir, "error.txt", f"{type(exc).__name__}: {exc}\n")
        status = "failed"
    outputs = []
    for base in ("train", "eval"):
        d = os.path.join(cell_dir, base)
        if os.path.isfile(os.path.join(d, MANIFEST)):
            outputs.append(f"{base}/{MANIFEST}")
    if status == "failed":
        outputs.append("error.txt")
    _write_text(cell_dir, "config.ini", cell_text)
    outputs.append("config.ini")
    write_manifest(cell_dir, "sweep-cell", outputs, (), cell_hash=h, status=status)
    return status


def _cell_result(cell_dir):
    man = read_manifest(cell_dir)
    if man.get("status") != "ok":
        return man.get("status", "failed"), None
    rows = {}
    with open(os.path.join(cell_dir, "eval", "report.csv")) as fh:
        for line in fh.read().splitlines()[2:]:
            run, window, var, err, sp = line.split(",")
            rows[var] = (float(err), float(sp))
    return "ok", rows


def default_jobs():
    try:
        return max(1, len(os.sched_getaffinity(0)))
    except AttributeError:
        return max(1, os.cpu_count() or 1)


def sweep_run(grid_path, out, jobs=None, dataset_dir=None):
    """Run every cell of a grid file; returns ``(n_trained, n_failed)``."""
    cp, gdig = load_config(grid_path)
    system = system_name(cp)
    ds_dir = resolve_dataset(dataset_dir or _get(cp, "sweep", "dataset"), system)
    ds_digest = dir_digest(ds_dir)
    cells = sweep_cells(cp)
    os.makedirs(out, exist_ok=True)
    todo, plan = [], []
    for axes, seed in cells:
        cc = cell_config(cp, axes, seed)
        h = cell_hash(cc, ds_digest)
        cdir = os.path.join(out, "cells", h[:16])
        plan.append((axes, seed, h, cdir))
        if not _cell_done(cdir, h):
            todo.append((config_text(cc), ds_dir, cdir, h))
    jobs = jobs or default_jobs()
    t0 = time.perf_counter()
    if jobs > 1 and len(todo) > 1:
        with concurrent.futures.ProcessPoolExecutor(max_workers=jobs) as pool:
            list(pool.map(_run_cell, *zip(*todo)))
    else:
        for item in todo:
            _run_cell(*item)
    rows, n_failed = [], 0
    groups = {}
    for axes, seed, h, cdir in plan:
        status, res = _cell_result(cdir)
        ff = res["fullfield"][0] if res else float("nan")
        mv = res["mean_of_vars"][0] if res else float("nan")
        sp = res["fullfield"][1] if res else float("nan")
        n_failed += status != "ok"
        rows.append(["run"] + [axes[k] for k in SWEEP_AXES] + [seed, h[:16], status, ff, "", mv, sp, 1])
        key = tuple(axes[k] for k in SWEEP_AXES)
        if res:
            groups.setdefault(key, []).append((ff, mv, sp))
        else:
            groups.setdefault(key, [])
    for key, vals in groups.items():
        if vals:
            m, sd = M.aggregate(v[0] for v in vals)
            mv = float(np.mean([v[1] for v in vals]))
            sp = float(np.mean([v[2] for v in vals]))
            rows.append(["summary", *key, "all", "", "ok", m, sd, mv, sp, len(vals)])
        else:
            rows.append(["summary", *key, "all", "", "failed", float("nan"), float("nan"), float("nan"),
                         float("nan"), 0])
    lines = ["# schema,sweep,1", ",".join(SWEEP_COLUMNS)]
    for r in rows:
        lines.append(",".join(repr(v) if isinstance(v, float) else str(v) for v in r))
    outputs = [_write_text(out, "sweep.csv", "\n".join(lines) + "\n")]
    outputs += [os.path.relpath(os.path.join(c, MANIFEST), out) for _, _, _, c in plan]
    write_manifest(out, "sweep", outputs, [TIMING], system=system, grid_digest=gdig, dataset_digest=ds_digest,
                   cells=len(plan))
    write_timing(out, time.perf_counter() - t0, trained=len(todo))
    return len(todo), n_failed


def cmd_sweep(args):
    if not args.out:
        raise UsageError("sweep needs --out")
    trained, failed = sweep_run(args.grid, args.out, args.jobs, args.dataset)
    print(f"sweep: {trained} cell(s) trained, {failed} failed")
    return EXIT_PARTIAL if failed else EXIT_OK


# entry point --------------------------------------------------------------------------------------


def build_parser():
    ap = argparse.ArgumentParser(prog="music", description="Sparse multitask PDE solution learning.")
    ap.add_argument("--version", action="version", version=f"music {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="run a reference solver and write a dataset")
    g.add_argument("system", nargs="?", help="swe, swe_swapped, fn, rd or wildfire")
    g.add_argument("--config")
    g.add_argument("--out")
    g.add_argument("--seed", type=int)

    t = sub.add_parser("train", help="train a model on a dataset")
    t.add_argument("dataset", nargs="?", help=f"dataset directory (default ${DATA_ENV}/<system>)")
    t.add_argument("--config", required=True)
    t.add_argument("--out")
    t.add_argument("--seed", type=int)
    t.add_argument("--noise", type=float)
    t.add_argument("--t1", type=float)
    t.add_argument("--mode", choices=("gated", "topk", "none", "decoupled"))
    t.add_argument("--resume", metavar="CKPT")
    t.add_argument("--quiet", action="store_true")

    e = sub.add_parser("evaluate", help="errors of a trained model against a dataset")
    e.add_argument("run", help="train output directory or checkpoint file")
    e.add_argument("dataset", nargs="?")
    e.add_argument("--out")
    e.add_argument("--seed", type=int)
    e.add_argument("--noise", type=float)
    e.add_argument("--t1", type=float)
    e.add_argument("--mode", choices=("gated", "topk", "none", "decoupled"))

    s = sub.add_parser("sweep", help="train and evaluate every cell of a grid file")
    s.add_argument("grid")
    s.add_argument("dataset", nargs="?")
    s.add_argument("--out")
    s.add_argument("--jobs", type=int)
    return ap


COMMANDS = {"generate": cmd_generate, "train": cmd_train, "evaluate": cmd_evaluate, "sweep": cmd_sweep}


def main(argv=None):
    ap = build_parser()
    args = ap.parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"music {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except S.SolverError as exc:
        print(f"music {args.command}: solver aborted: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except InputError as exc:
        print(f"music {args.command}: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
