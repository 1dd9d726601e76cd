"""Adam training under gated-L0, top-k and dense regimes, plus baselines.

One optimizer step ("epoch") evaluates jets of the network on the training
rows (optionally a seeded minibatch of them) stacked with the initial-condition
rows, records the loss on a tape, pulls gradients back through the jets and
applies Adam to the weights and, in gated mode, the gate parameters.
"""

import math
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .autodiff.composite import ChannelTape, residual_param_grad
from .network import (
    GateConfig,
    NetParams,
    PhysicalChannels,
    active_count,
    batch_jets,
    eval_gates,
    flatten_grads,
    forward,
    gate_derivative,
    init_params,
    l0_penalty,
    l0_penalty_grad,
    sample_gates,
    topk_mask,
)
from .metrics import ErrorReport, fullfield_rel_l2, sparsity_percent
from .sampling import time_window_split
from .systems import ArrayVar, JetSet, LossRows, LossWeights, assemble_loss

__all__ = [
    "TrainConfig",
    "History",
    "TrainResult",
    "DecoupledResult",
    "TrainingDiverged",
    "adam_init",
    "adam_step",
    "train",
    "train_single",
    "train_decoupled",
    "predict",
    "predict_fields",
    "evaluate_fields",
    "forecast_eval",
    "fullfield_error",
]

SWE_LAM0_GRID = tuple(10.0 ** -k for k in range(4, 11))
FN_LAM0_GRID = tuple(10.0 ** -k for k in range(2, 9))
RD_LAM0_GRID = tuple(10.0 ** -k for k in range(2, 13))
LR_GRID = (1e-2, 1e-3, 1e-4)


class TrainingDiverged(RuntimeError):
    def __init__(self, msg, finals=None):
        super().__init__(msg)
        self.finals = finals or {}


@dataclass
class TrainConfig:
    """Everything that determines a training run (together with the batch)."""

    layers: int = 4
    width: int = 20
    activation: str = "tanh"
    mode: str = "gated"
    baseline: str = "music"
    k: int = None
    lam0_grid: tuple = (1e-6,)
    lr_grid: tuple = (1e-3,)
    epochs: int = 10000
    warmup: int = 10000
    val_stride: int = 100
    prune_stride: int = 100
    seed: int = 0
    weights: LossWeights = field(default_factory=LossWeights)
    batch_size: int = None  # None: full batch; else each epoch is one shuffled pass in chunks
    gate_cfg: GateConfig = field(default_factory=GateConfig)
    residual_scaling: bool = True

    def __post_init__(self):
        if self.baseline == "piml_inc":
            self.mode = "none"
        if self.mode not in ("gated", "topk", "none"):
            raise ValueError(f"unknown sparsity mode {self.mode!r}")
        if self.baseline not in ("music", "piml_inc", "decoupled"):
            raise ValueError(f"unknown baseline {self.baseline!r}")
        if self.mode == "topk":
            if self.k is None:
                raise ValueError("topk mode needs k")
            if not self.warmup < self.epochs:
                raise ValueError("topk mode needs warmup < epochs")
        if self.mode == "gated" and not self.lam0_grid:
            raise ValueError("gated mode needs a nonempty lambda_0 grid")
        if not self.lr_grid:
            raise ValueError("empty learning-rate grid")
        if self.epochs < 1 or self.val_stride < 1 or self.prune_stride < 1:
            raise ValueError("epochs and strides must be positive")

    def grid_points(self):
        lams = self.lam0_grid if self.mode == "gated" else (0.0,)
        return [(lr, lam) for lr in self.lr_grid for lam in lams]


# optimizer --------------------------------------------------------------------------

ADAM_B1, ADAM_B2, ADAM_EPS = 0.9, 0.999, 1e-8


def adam_init(n):
    return {"m": np.zeros(n), "v": np.zeros(n), "t": 0}


def adam_step(x, g, state, lr, mask=None, epoch=None):
    """One bias-corrected Adam update of ``x`` in place.

    Entries where ``mask`` is False are neither moved nor accumulate moments.
    """
    g = np.asarray(g, dtype=float)
    if g.shape != x.shape or state["m"].shape != x.shape:
        raise ValueError("optimizer state does not match the parameters")
    if not np.all(np.isfinite(g)):
        where = "" if epoch is None else f" at epoch {epoch}"
        raise FloatingPointError(f"non-finite gradient{where}")
    if mask is not None:
        g = np.where(mask, g, 0.0)
    t = state["t"] + 1
    m = ADAM_B1 * state["m"] + (1.0 - ADAM_B1) * g
    v = ADAM_B2 * state["v"] + (1.0 - ADAM_B2) * g * g
    mhat = m / (1.0 - ADAM_B1 ** t)
    vhat = v / (1.0 - ADAM_B2 ** t)
    step = lr * mhat / (np.sqrt(vhat) + ADAM_EPS)
    if mask is not None:
        step = np.where(mask, step, 0.0)
    x -= step
    state["m"], state["v"], state["t"] = m, v, t
    return x, state


# history --------------------------------------------------------------------------------


class History:
    """One row per epoch: train terms, validation terms (NaN off-stride), L0, active count."""

    def __init__(self, term_names):
        self.term_names = list(term_names)
        self.columns = (["epoch", "train_total"] + [f"train:{t}" for t in self.term_names]
                        + ["val_total"] + [f"val:{t}" for t in self.term_names if not t.startswith(("ic:", "l0"))]
                        + ["l0", "active"])
        self.rows = []
        self.seconds = []

    def add(self, epoch, train_total, train_terms, val_total, val_terms, l0, active, seconds):
        row = [float(epoch), float(train_total)] + [float(train_terms.get(t, np.nan)) for t in self.term_names]
        row.append(float(val_total))
        row += [float(val_terms.get(t, np.nan)) for t in self.term_names if not t.startswith(("ic:", "l0"))]
        row += [float(l0), float(active)]
        self.rows.append(row)
        self.seconds.append(float(seconds))

    def array(self):
        return np.array(self.rows, dtype=float).reshape(len(self.rows), len(self.columns))

    def column(self, name):
        return self.array()[:, self.columns.index(name)]

    def __len__(self):
        return len(self.rows)

    def to_csv(self):
        lines = ["# schema,history,1", ",".join(self.columns)]
        for r in self.rows:
            lines.append(",".join(str(int(r[0])) if i == 0 else repr(v) for i, v in enumerate(r)))
        return "\n".join(lines) + "\n"

    def timing_csv(self):
        lines = ["# schema,timing,1", "epoch,seconds"]
        lines += [f"{int(r[0])},{s!r}" for r, s in zip(self.rows, self.seconds)]
        return "\n".join(lines) + "\n"

    def extend(self, other):
        self.rows.extend(other.rows)
        self.seconds.extend(other.seconds)


@dataclass
class TrainResult:
    params: NetParams
    history: History
    selected: dict
    finals: dict
    histories: dict
    opt_state: dict
    epoch: int


@dataclass
class DecoupledResult:
    data_net: NetParams
    eq_net: NetParams
    history: History
    selected: dict


# batch plumbing -----------------------------------------------------------------------------


class _Problem:
    """Normalized inputs, row selectors and targets for one batch."""

    def __init__(self, dataset, batch, cfg, with_ic=True):
        spec = dataset.spec
        nrm = dataset.normalizer
        self.spec, self.nrm = spec, nrm
        n = len(batch.coords)
        ic = batch.ic_coords if with_ic else batch.ic_coords[:0]
        n_ic = len(ic)
        self.n_main, self.n_ic = n, n_ic
        self.x = np.ascontiguousarray(nrm.normalize_inputs(np.concatenate([batch.coords, ic], axis=0)))
        self.main = np.r_[np.ones(n, bool), np.zeros(n_ic, bool)]
        self.ic = ~self.main
        self.data_targets = {}
        for v in spec.data_vars:
            j = spec.var_index(v)
            t = np.zeros(n + n_ic)
            t[:n] = nrm.normalize_outputs(batch.targets[v], j)
            self.data_targets[v] = t
        self.data_phys = {v: np.r_[batch.targets[v], np.zeros(n_ic)] for v in spec.data_vars}
        self.ic_targets = {}
        for v in spec.eq_vars:
            j = spec.var_index(v)
            t = np.zeros(n + n_ic)
            if n_ic:
                t[n:] = nrm.normalize_outputs(batch.ic_targets[v], j)
            self.ic_targets[v] = t
        t_range = nrm.in_range[-1]
        self.scale = {}
        for v in spec.eq_vars:
            self.scale[v] = float(t_range / nrm.out_range[spec.var_index(v)]) if cfg.residual_scaling else 1.0
        self.dirs, self.second = spec.dirs

    def rows_for(self, sel):
        """LossRows restricted to the stacked row indices ``sel``."""
        return LossRows(self.main[sel], self.ic[sel], {k: v[sel] for k, v in self.data_targets.items()},
                        {k: v[sel] for k, v in self.ic_targets.items()}, self.scale)

    def batches(self, rng, batch_size):
        """Row selections of one epoch: a shuffled pass over the data rows in
        chunks of ``batch_size``, each carrying every IC row."""
        if batch_size is None or batch_size >= self.n_main:
            return [np.arange(self.n_main + self.n_ic)]
        ic = np.arange(self.n_main, self.n_main + self.n_ic)
        perm = rng.permutation(self.n_main)
        return [np.r_[np.sort(perm[i:i + batch_size]), ic] for i in range(0, self.n_main, batch_size)]


def _loss_and_grads(params, prob, sel, gates_list, w, mode, log_alpha_for_pen, overrides=None):
    jets = batch_jets(params, gates_list, prob.x[sel], prob.dirs, prob.second)
    rows = prob.rows_for(sel)
    box = {}

    def loss_fn(ch):
        js = JetSet.from_channels(prob.spec, PhysicalChannels(ch, prob.nrm),
                                  overrides(ch, sel) if overrides else None)
        total, terms = assemble_loss(js, rows, prob.spec, w, mode, log_alpha_for_pen, params.gate_cfg)
        box["terms"] = terms
        return total

    loss, grads = residual_param_grad(loss_fn, params, jets, gates_list)
    terms = {k: float(getattr(v, "value", v)) for k, v in box["terms"].items()}
    return loss, terms, grads


def _plain_loss(params, prob, gates_list, w, with_ic=False):
    """Validation loss: data-fit and residual MSE, no IC and no L0 term."""
    sel = np.arange(prob.n_main)
    jets = batch_jets(params, gates_list, prob.x[sel], prob.dirs, prob.second)
    ch = ChannelTape(jets)
    js = JetSet.from_channels(prob.spec, PhysicalChannels(ch, prob.nrm))
    w0 = replace(w, ic=0.0, l0=0.0)
    total, terms = assemble_loss(js, prob.rows_for(sel), prob.spec, w0, "none")
    terms = {k: float(getattr(v, "value", v)) for k, v in terms.items()}
    return float(getattr(total, "value", total)), terms


def _epoch_rng(seed, epoch):
    return np.random.default_rng([int(seed), int(epoch), 7])


def _eval_gate_list(params, mode):
    return params.split_gates(eval_gates(params.log_alpha, params.gate_cfg)) if mode == "gated" else None


def train_single(dataset, train_batch, val_batch, cfg, lr, lam0, resume=None, log=None):
    """Train one grid point; returns a :class:`TrainResult`.

    ``resume`` is a previous TrainResult (or dict with ``params``,
    ``opt_state`` and ``epoch``) to continue from; the epoch counter and the
    Adam moments carry over.
    """
    spec = dataset.spec
    w = replace(cfg.weights, l0=lam0 if cfg.mode == "gated" else 0.0)
    prob = _Problem(dataset, train_batch, cfg, with_ic=True)
    vprob = _Problem(dataset, val_batch, cfg, with_ic=False) if val_batch is not None and len(val_batch) else None
    if resume is not None:
        get = resume.get if isinstance(resume, dict) else lambda k: getattr(resume, k)
        params = get("params").copy()
        st = get("opt_state")
        opt = {k: {"m": s["m"].copy(), "v": s["v"].copy(), "t": s["t"]} for k, s in st.items()}
        start = int(get("epoch"))
    else:
        params = init_params(len(spec.coords), len(spec.variables), cfg.layers, cfg.width,
                             cfg.activation, cfg.seed, cfg.gate_cfg)
        opt = {"theta": adam_init(params.n_params), "gates": adam_init(params.n_gates)}
        start = 0
    if cfg.mode != "gated":
        params.log_alpha[:] = np.inf
    names = None
    hist = None
    t_start = time.perf_counter()
    for epoch in range(start, cfg.epochs):
        rng = _epoch_rng(cfg.seed, epoch)
        # validation sees the parameters at the start of the epoch
        vt, vterms = np.nan, {}
        last = epoch == cfg.epochs - 1
        if vprob is not None and (epoch % cfg.val_stride == 0 or last):
            vt, vterms = _plain_loss(params, vprob, _eval_gate_list(params, cfg.mode), w)
        l0v = l0_penalty(params.log_alpha, params.gate_cfg) if cfg.mode == "gated" else 0.0
        active = active_count(params, "gated" if cfg.mode == "gated" else "topk")
        losses, term_sums = [], None
        for sel in prob.batches(rng, cfg.batch_size):
            if cfg.mode == "gated":
                u = rng.uniform(size=params.n_gates)
                u = np.clip(u, 1e-12, 1.0 - 1e-12)
                z = sample_gates(params.log_alpha, params.gate_cfg, u, training=True)
                glist = params.split_gates(z)
                pen_la = params.log_alpha
            else:
                glist, pen_la = None, None
            loss, terms, grads = _loss_and_grads(params, prob, sel, glist, w, cfg.mode, pen_la)
            if not math.isfinite(loss):
                raise FloatingPointError(f"non-finite loss at epoch {epoch}")
            losses.append(loss)
            term_sums = dict(terms) if term_sums is None else {k: term_sums[k] + terms[k] for k in terms}
            g_theta, g_z = flatten_grads(params, grads)
            mask = params.mask if cfg.mode == "topk" else None
            adam_step(params.theta, g_theta, opt["theta"], lr, mask, epoch)
            if cfg.mode == "gated":
                g_la = g_z * gate_derivative(params.log_alpha, params.gate_cfg, u, training=True)
                g_la = g_la + lam0 * l0_penalty_grad(params.log_alpha, params.gate_cfg)
                adam_step(params.log_alpha, g_la, opt["gates"], lr, None, epoch)
        # training columns: mean over the epoch's minibatches
        nb = len(losses)
        loss = math.fsum(losses) / nb
        terms = {k: v / nb for k, v in term_sums.items()}
        if names is None:
            names = list(terms)
            hist = History(names)
        hist.add(epoch, loss, terms, vt, vterms, l0v, active, time.perf_counter() - t_start)
        if log is not None and (epoch % cfg.val_stride == 0 or last):
            log(epoch, loss, vt)
        if cfg.mode == "topk":
            done = epoch + 1
            if done >= cfg.warmup and (done - cfg.warmup) % cfg.prune_stride == 0:
                k = int(cfg.k)
                m = topk_mask(params.theta, k)
                params.mask[:] = m
                params.theta[~m] = 0.0
    if hist is None:
        hist = History([])
    final_val = np.nan
    if vprob is not None:
        final_val, _ = _plain_loss(params, vprob, _eval_gate_list(params, cfg.mode), w)
    return TrainResult(params, hist, {"lr": lr, "lam0": lam0}, {(lr, lam0): final_val},
                       {(lr, lam0): hist}, opt, cfg.epochs)


def train(dataset, train_batch, val_batch, cfg, log=None):
    """Grid search over (lr, lambda_0); keep the lowest final validation loss."""
    if cfg.baseline == "decoupled":
        raise ValueError("use train_decoupled for the decoupled baseline")
    best, finals, hists, errors = None, {}, {}, {}
    for lr, lam in cfg.grid_points():
        try:
            res = train_single(dataset, train_batch, val_batch, cfg, lr, lam, log=log)
        except FloatingPointError as exc:
            finals[(lr, lam)] = float("nan")
            errors[(lr, lam)] = str(exc)
            continue
        fv = res.finals[(lr, lam)]
        finals[(lr, lam)] = fv
        hists[(lr, lam)] = res.history
        if not math.isfinite(fv):
            errors[(lr, lam)] = "non-finite validation loss"
            continue
        if best is None or fv < best.finals[(best.selected["lr"], best.selected["lam0"])]:
            best = res
    if best is None:
        detail = ", ".join(f"lr={k[0]:g} lam0={k[1]:g}: {v}" for k, v in errors.items())
        raise TrainingDiverged(f"all grid points diverged ({detail})", finals)
    best.finals = finals
    best.histories = hists
    return best


# decoupled baseline ------------------------------------------------------------------------------


def train_decoupled(dataset, train_batch, val_batch, cfg, log=None):
    """Two networks: one fits the data variables, one the equation variables.

    The equation network's residual sees the data variables only through
    their measured values at the training points, never through network 1.
    """
    spec = dataset.spec
    nrm = dataset.normalizer
    dcols = [spec.var_index(v) for v in spec.data_vars]
    ecols = [spec.var_index(v) for v in spec.eq_vars]
    d_in = len(spec.coords)
    plain = replace(cfg, mode="none", baseline="music")
    prob = _Problem(dataset, train_batch, plain, with_ic=True)
    vprob = _Problem(dataset, val_batch, plain, with_ic=False) if val_batch is not None and len(val_batch) else None
    nrm_e = nrm.subset(ecols)
    best = None
    for lr in cfg.lr_grid:
        # network 1: supervised fit of the data variables
        net1 = init_params(d_in, len(dcols), cfg.layers, cfg.width, cfg.activation, cfg.seed)
        net1.log_alpha[:] = np.inf
        opt1 = adam_init(net1.n_params)
        hist = History(["data"] + [f"phys:{v}" for v in spec.eq_vars] + [f"ic:{v}" for v in spec.eq_vars])
        t0 = time.perf_counter()
        for epoch in range(cfg.epochs):
            rng = _epoch_rng(cfg.seed, epoch)
            losses = []
            for sel in prob.batches(rng, cfg.batch_size):
                sel = sel[prob.main[sel]]
                y = forward(net1, None, prob.x[sel])
                tgt = np.stack([prob.data_targets[v][sel] for v in spec.data_vars], axis=1)
                diff = y - tgt
                n = len(sel)
                losses.append(float(np.sum(diff * diff) / n))
                jets = batch_jets(net1, None, prob.x[sel], (), ())
                gr = jets.backward(2.0 * diff / n * cfg.weights.for_var("data", spec.data_vars[0]))
                g, _ = flatten_grads(net1, gr)
                adam_step(net1.theta, g, opt1, lr, None, epoch)
            loss = math.fsum(losses) / len(losses)
            hist.add(epoch, loss, {"data": loss}, np.nan, {}, 0.0, net1.n_params, time.perf_counter() - t0)
        # network 2: residual + IC with measured data values inside the residual
        net2 = init_params(d_in, len(ecols), cfg.layers, cfg.width, cfg.activation, cfg.seed + 1)
        net2.log_alpha[:] = np.inf
        opt2 = adam_init(net2.n_params)
        fixed = _data_overrides(spec, prob)
        espec = _EqOnlySpec(spec)
        w2 = replace(cfg.weights, data=0.0, l0=0.0)
        for epoch in range(cfg.epochs):
            rng = _epoch_rng(cfg.seed, epoch)
            losses, term_sums = [], None
            for sel in prob.batches(rng, cfg.batch_size):
                jets = batch_jets(net2, None, prob.x[sel], prob.dirs, prob.second)
                rows = prob.rows_for(sel)
                box = {}

                def loss_fn(ch, sel=sel, rows=rows, box=box):
                    pc = PhysicalChannels(ch, nrm_e)
                    vs = {v: _ChanVar(pc, i, spec.coords) for i, v in enumerate(spec.eq_vars)}
                    vs.update({v: fixed[v].take(sel) for v in spec.data_vars})
                    total, terms = assemble_loss(JetSet(vs), rows, espec, w2, "none")
                    box["terms"] = terms
                    return total

                loss, gr = residual_param_grad(loss_fn, net2, jets)
                terms = {k: float(getattr(v, "value", v)) for k, v in box["terms"].items()}
                losses.append(loss)
                term_sums = terms if term_sums is None else {k: term_sums[k] + terms[k] for k in terms}
                g, _ = flatten_grads(net2, gr)
                adam_step(net2.theta, g, opt2, lr, None, epoch)
            nb = len(losses)
            hist.add(cfg.epochs + epoch, math.fsum(losses) / nb, {k: v / nb for k, v in term_sums.items()},
                     np.nan, {}, 0.0, net2.n_params, time.perf_counter() - t0)
        val = np.nan
        if vprob is not None:
            val = _decoupled_val(net1, net2, dataset, vprob, cfg)
        if best is None or (math.isfinite(val) and val < best[0]) or not math.isfinite(best[0]):
            best = (val, net1, net2, hist, lr)
    val, net1, net2, hist, lr = best
    return DecoupledResult(net1, net2, hist, {"lr": lr, "val": val})


class _EqOnlySpec:
    """View of a SystemSpec with the data-fit term removed."""

    def __init__(self, spec):
        self._spec = spec
        self.data_vars = ()
        self.eq_vars = spec.eq_vars

    def residuals(self, js):
        return self._spec.residuals(js)

    def var_index(self, v):
        return self._spec.var_index(v)


class _ChanVar:
    def __init__(self, pc, j, coords):
        self.pc, self.j, self.coords = pc, j, coords

    def value(self):
        return self.pc.value(self.j)

    def nvalue(self):
        return self.pc.ch.value(self.j)

    def d1(self, c):
        return self.pc.d1(self.j, self.coords.index(c))

    def d2(self, c):
        return self.pc.d2(self.j, self.coords.index(c))


class _FixedVar:
    """Data variable given only by its measured values.

    Measurements carry no derivative information, so every derivative channel
    of the data variable is identically zero inside the equation residual.
    """

    def __init__(self, value, coords):
        self.v, self.coords = value, coords

    def take(self, sel):
        v = self.v[sel]
        zero = np.zeros_like(v)
        return ArrayVar(v, {c: zero for c in self.coords}, {c: zero for c in self.coords})


def _data_overrides(spec, prob):
    # IC rows hold no measurement; they only feed the IC term, so zeros are inert there
    return {v: _FixedVar(prob.data_phys[v], spec.coords) for v in spec.data_vars}


def _decoupled_val(net1, net2, dataset, vprob, cfg):
    spec = dataset.spec
    preds = _decoupled_predict(net1, net2, spec, vprob.x[:vprob.n_main])
    tot = 0.0
    for v in spec.data_vars:
        j = spec.var_index(v)
        d = preds[:, j] - vprob.data_targets[v][:vprob.n_main]
        tot += float(np.mean(d * d))
    return tot


def _decoupled_predict(net1, net2, spec, x):
    y1 = forward(net1, None, x)
    y2 = forward(net2, None, x)
    out = np.empty((len(x), len(spec.variables)))
    for i, v in enumerate(spec.data_vars):
        out[:, spec.var_index(v)] = y1[:, i]
    for i, v in enumerate(spec.eq_vars):
        out[:, spec.var_index(v)] = y2[:, i]
    return out


# prediction and evaluation --------------------------------------------------------------------------


def predict(params, x_norm, mode="gated", chunk=65536):
    """Normalized outputs at normalized inputs with eval-mode gates."""
    gates = _eval_gate_list(params, mode) if np.all(np.isfinite(params.log_alpha)) else None
    out = [forward(params, gates, x_norm[i:i + chunk]) for i in range(0, len(x_norm), chunk)]
    return np.concatenate(out, axis=0) if out else np.zeros((0, params.sizes[-1]))


def predict_fields(model, dataset, time_idx=None, mode="gated"):
    """Physical predictions of every variable on the full grid (or time subset)."""
    spec = dataset.spec
    coords, ti, _ = dataset.full_grid(time_idx)
    xn = dataset.normalizer.normalize_inputs(coords)
    if isinstance(model, DecoupledResult):
        y = _decoupled_predict(model.data_net, model.eq_net, spec, xn)
    else:
        y = predict(model, xn, mode)
    nt = len(np.unique(ti)) if time_idx is None else len(time_idx)
    shape = (nt,) + dataset.spatial_shape
    out = {}
    for j, v in enumerate(spec.variables):
        out[v] = dataset.normalizer.denormalize_outputs(y[:, j], j).reshape(shape)
    return out


def evaluate_fields(model, dataset, time_idx=None, mode="gated", run="run", window="full"):
    """ErrorReport of the model against the dataset fields."""
    spec = dataset.spec
    preds = predict_fields(model, dataset, time_idx, mode)
    sl = slice(None) if time_idx is None else np.asarray(time_idx)
    truths = [dataset.fields[v][sl] for v in spec.variables]
    rep = ErrorReport(run)
    rep.add(window, truths, [preds[v] for v in spec.variables], spec.variables)
    if isinstance(model, NetParams):
        rep.sparsity = sparsity_percent(model, "gated" if mode == "gated" else "topk")
    return rep, preds


def forecast_eval(model, dataset, t1, mode="gated", run="run"):
    """Errors on the training window ``[t0, t1]`` and the forecast window ``(t1, t2]``."""
    tr, fo = time_window_split(dataset, t1)
    spec = dataset.spec
    rep = ErrorReport(run)
    for name, idx in (("train", tr), ("forecast", fo)):
        preds = predict_fields(model, dataset, idx, mode)
        truths = [dataset.fields[v][idx] for v in spec.variables]
        rep.add(name, truths, [preds[v] for v in spec.variables], spec.variables)
    if isinstance(model, NetParams):
        rep.sparsity = sparsity_percent(model, "gated" if mode == "gated" else "topk")
    return rep


def fullfield_error(model, dataset, mode="gated"):
    spec = dataset.spec
    preds = predict_fields(model, dataset, None, mode)
    return fullfield_rel_l2([dataset.fields[v] for v in spec.variables], [preds[v] for v in spec.variables])

