"""Gated multitask MLP: parameters, gates, pruning, normalization, checkpoints.

All weights and biases live in one flat float64 buffer ``theta`` laid out
layer by layer as ``[W row-major, b]``; ``weights`` and ``biases`` are views
into it. Each hidden neuron carries one hard-concrete gate parameter
(``log_alpha``) whose sample multiplies the neuron's activation.
"""

import math
import warnings
from dataclasses import dataclass

import numpy as np

from .autodiff.composite import ChannelTape, network_jets
from .autodiff.jets import ACTIVATIONS, Jet2, NetJets

__all__ = [
    "GateConfig",
    "NetParams",
    "Normalizer",
    "PhysicalChannels",
    "init_params",
    "forward",
    "sample_gates",
    "gate_derivative",
    "eval_gates",
    "l0_penalty",
    "l0_penalty_grad",
    "prune_topk",
    "topk_mask",
    "active_count",
    "physical_jets",
    "flatten_grads",
    "save_checkpoint",
    "load_checkpoint",
    "export_pruned",
]

LOG_ALPHA_INIT = 2.0


def _sigmoid(a):
    a = np.asarray(a, dtype=float)
    e = np.exp(-np.abs(a))
    return np.where(a >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


@dataclass(frozen=True)
class GateConfig:
    """Hard-concrete gate constants: temperature and stretch interval."""

    beta: float = 2.0 / 3.0
    l: float = -0.1
    r: float = 1.1
    stretched_penalty: bool = False

    def __post_init__(self):
        if not self.beta > 0:
            raise ValueError(f"gate temperature must be positive, got {self.beta}")
        if not (self.l < 0.0 and self.r > 1.0):
            raise ValueError(f"need l < 0 < 1 < r, got l={self.l}, r={self.r}")


class NetParams:
    """Weights, biases, per-neuron gate parameters and a pruning mask.

    ``sizes`` is the full layer-width chain ``(d_in, H, ..., H, n_out)``.
    """

    def __init__(self, sizes, activation="tanh", theta=None, log_alpha=None, mask=None,
                 gate_cfg=None):
        if activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        sizes = tuple(int(s) for s in sizes)
        if len(sizes) < 2 or any(s < 0 for s in sizes) or sizes[0] < 1 or sizes[-1] < 1:
            raise ValueError(f"bad layer sizes {sizes}")
        self.sizes = sizes
        self.activation = activation
        self.gate_cfg = gate_cfg or GateConfig()
        self.n_params = sum((i + 1) * o for i, o in zip(sizes[:-1], sizes[1:]))
        self.n_gates = sum(sizes[1:-1])
        self.theta = np.zeros(self.n_params) if theta is None else np.array(theta, dtype=float)
        if self.theta.shape != (self.n_params,):
            raise ValueError(f"theta must have {self.n_params} entries, got {self.theta.shape}")
        self.log_alpha = (np.full(self.n_gates, LOG_ALPHA_INIT) if log_alpha is None
                          else np.array(log_alpha, dtype=float))
        if self.log_alpha.shape != (self.n_gates,):
            raise ValueError(f"log_alpha must have {self.n_gates} entries")
        self.mask = np.ones(self.n_params, dtype=bool) if mask is None else np.array(mask, dtype=bool)
        if self.mask.shape != (self.n_params,):
            raise ValueError(f"mask must have {self.n_params} entries")
        self._bind()

    def _bind(self):
        self.weights, self.biases, self.slices = [], [], []
        off = 0
        for i, o in zip(self.sizes[:-1], self.sizes[1:]):
            w = self.theta[off:off + i * o].reshape(o, i)
            b = self.theta[off + i * o:off + (i + 1) * o]
            self.slices.append((off, off + i * o, off + (i + 1) * o))
            self.weights.append(w)
            self.biases.append(b)
            off += (i + 1) * o

    @property
    def n_layers(self):
        """Number of hidden layers."""
        return len(self.sizes) - 2

    @property
    def hidden_sizes(self):
        return self.sizes[1:-1]

    def split_gates(self, flat):
        """Flat per-neuron vector -> list of per-hidden-layer arrays."""
        flat = np.asarray(flat, dtype=float)
        if flat.shape != (self.n_gates,):
            raise ValueError(f"expected {self.n_gates} gate values, got {flat.shape}")
        cuts = np.cumsum(self.hidden_sizes)[:-1]
        return np.split(flat, cuts) if self.n_gates else [np.zeros(0)] * self.n_layers

    def copy(self):
        return NetParams(self.sizes, self.activation, self.theta.copy(), self.log_alpha.copy(),
                         self.mask.copy(), self.gate_cfg)

    def layer_of(self, flat_index):
        for li, (s, _, e) in enumerate(self.slices):
            if s <= flat_index < e:
                return li
        raise IndexError(flat_index)


def init_params(d_in, n_out, layers, width, activation="tanh", seed=0, gate_cfg=None):
    """Xavier-uniform weights, zero biases, open gates (log alpha = 2)."""
    sizes = (d_in,) + (width,) * layers + (n_out,)
    p = NetParams(sizes, activation, gate_cfg=gate_cfg)
    rng = np.random.default_rng(seed)
    for w in p.weights:
        bound = math.sqrt(6.0 / (w.shape[0] + w.shape[1]))
        w[...] = rng.uniform(-bound, bound, size=w.shape)
    return p


def _as_gate_list(params, gates):
    if gates is None:
        return None
    if isinstance(gates, (list, tuple)):
        return [np.asarray(g, dtype=float) for g in gates]
    return params.split_gates(gates)


def forward(params, gates, x):
    """Network outputs ``(N, n_out)`` for normalized inputs ``x`` ``(N, d_in)``."""
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if x.shape[1] != params.sizes[0]:
        raise ValueError(f"layer 0: expected {params.sizes[0]} inputs, got {x.shape[1]}")
    if x.size and (x.min() < -0.5 or x.max() > 1.5):
        warnings.warn("inputs outside [-0.5, 1.5]; normalization may be missing", stacklevel=2)
    glist = _as_gate_list(params, gates)
    if glist is not None:
        for li, g in enumerate(glist):
            if g.shape != (params.sizes[li + 1],):
                raise ValueError(f"layer {li}: gate vector has shape {g.shape}, "
                                 f"expected ({params.sizes[li + 1]},)")
    a = x
    for li in range(params.n_layers):
        z = a @ params.weights[li].T + params.biases[li]
        if params.activation == "tanh":
            a = np.tanh(z)
        elif params.activation == "sin":
            a = np.sin(z)
        else:
            a = z * (z > 0.0)
        if glist is not None:
            a = a * glist[li]
    y = a @ params.weights[-1].T + params.biases[-1]
    return y[0] if single else y


# hard-concrete gates -----------------------------------------------------------


def _stretch_logits(log_alpha, cfg, u, training):
    log_alpha = np.asarray(log_alpha, dtype=float)
    if not training:
        return log_alpha
    u = np.asarray(u, dtype=float)
    if np.any(u <= 0.0) or np.any(u >= 1.0):
        raise ValueError("gate noise u must lie strictly inside (0, 1)")
    return (np.log(u) - np.log1p(-u) + log_alpha) / cfg.beta


def sample_gates(log_alpha, cfg=None, u=None, training=True, rng=None):
    """Hard-concrete gate values in [0, 1].

    In training mode ``u`` (or fresh draws from ``rng``) drives the stochastic
    relaxation; evaluation mode ignores ``u`` and is deterministic.
    """
    cfg = cfg or GateConfig()
    log_alpha = np.asarray(log_alpha, dtype=float)
    if training and u is None:
        rng = rng if rng is not None else np.random.default_rng()
        u = rng.uniform(np.finfo(float).tiny, 1.0, size=log_alpha.shape)
        u = np.where(u >= 1.0, np.nextafter(1.0, 0.0), u)
    q = _stretch_logits(log_alpha, cfg, u, training)
    s = _sigmoid(q) * (cfg.r - cfg.l) + cfg.l
    return np.clip(s, 0.0, 1.0)


def eval_gates(log_alpha, cfg=None):
    return sample_gates(log_alpha, cfg, training=False)


def gate_derivative(log_alpha, cfg=None, u=None, training=True):
    """d z / d log_alpha for the same draws (zero where the clamp is active)."""
    cfg = cfg or GateConfig()
    q = _stretch_logits(log_alpha, cfg, u, training)
    sg = _sigmoid(q)
    s = sg * (cfg.r - cfg.l) + cfg.l
    inside = (s > 0.0) & (s < 1.0)
    scale = (cfg.r - cfg.l) / (cfg.beta if training else 1.0)
    return inside * sg * (1.0 - sg) * scale


def _penalty_shift(cfg, stretched):
    cfg = cfg or GateConfig()
    if stretched if stretched is not None else cfg.stretched_penalty:
        return cfg.beta * math.log(-cfg.l / cfg.r)
    return 0.0


def l0_penalty(log_alpha, cfg=None, stretched=None):
    """Sum of gate-open probabilities; ``stretched`` selects the shifted form."""
    a = np.asarray(log_alpha, dtype=float) - _penalty_shift(cfg, stretched)
    return float(np.sum(_sigmoid(a)))


def l0_penalty_grad(log_alpha, cfg=None, stretched=None):
    a = np.asarray(log_alpha, dtype=float) - _penalty_shift(cfg, stretched)
    s = _sigmoid(a)
    return s * (1.0 - s)


# top-k pruning -------------------------------------------------------------------


def topk_mask(values, k):
    """Boolean mask keeping the ``k`` largest magnitudes (earlier index wins ties)."""
    values = np.asarray(values, dtype=float).ravel()
    n = values.size
    if not 0 < k <= n:
        raise ValueError(f"k must satisfy 0 < k <= {n}, got {k}")
    order = np.argsort(-np.abs(values), kind="stable")
    mask = np.zeros(n, dtype=bool)
    mask[order[:k]] = True
    return mask


def prune_topk(params, k):
    """Copy of ``params`` with only the ``k`` largest-magnitude entries kept."""
    k = int(k)
    mask = topk_mask(params.theta, k)
    out = params.copy()
    out.mask[:] = mask
    out.theta[~mask] = 0.0
    return out


def active_count(params, mode="gated"):
    """Number of active weights and biases.

    ``topk``/``none``: unmasked entries. ``gated``: unmasked entries whose
    source and destination neurons both have a nonzero eval-mode gate.
    """
    if mode in ("topk", "none", "dense"):
        return int(params.mask.sum())
    if mode != "gated":
        raise ValueError(f"unknown sparsity mode {mode!r}")
    open_ = [g > 0.0 for g in params.split_gates(eval_gates(params.log_alpha, params.gate_cfg))]
    total = 0
    n = len(params.sizes) - 1
    for li in range(n):
        o, i = params.weights[li].shape
        dst = open_[li] if li < n - 1 else np.ones(o, dtype=bool)
        src = open_[li - 1] if li > 0 else np.ones(i, dtype=bool)
        s, m, e = params.slices[li]
        wm = params.mask[s:m].reshape(o, i) & dst[:, None] & src[None, :]
        bm = params.mask[m:e] & dst
        total += int(wm.sum() + bm.sum())
    return total


def flatten_grads(params, grads):
    """Per-layer JetGrads -> flat theta gradient (gate grads concatenated too)."""
    g = np.empty(params.n_params)
    for (s, m, e), gw, gb in zip(params.slices, grads.weights, grads.biases):
        g[s:m] = gw.ravel()
        g[m:e] = gb
    gg = np.concatenate(grads.gates) if grads.gates else np.zeros(0)
    return g, gg


# normalization --------------------------------------------------------------------


class Normalizer:
    """Per-coordinate min-max maps for inputs and outputs."""

    def __init__(self, in_min, in_max, out_min, out_max, in_names=None, out_names=None):
        self.in_min = np.array(in_min, dtype=float)
        self.in_max = np.array(in_max, dtype=float)
        self.out_min = np.array(out_min, dtype=float)
        self.out_max = np.array(out_max, dtype=float)
        self.in_names = list(in_names) if in_names else [f"x{i}" for i in range(self.in_min.size)]
        self.out_names = list(out_names) if out_names else [f"y{i}" for i in range(self.out_min.size)]
        for lo, hi, names in ((self.in_min, self.in_max, self.in_names),
                              (self.out_min, self.out_max, self.out_names)):
            bad = ~(hi > lo)
            if np.any(bad):
                which = [names[i] for i in np.flatnonzero(bad)]
                raise ValueError(f"degenerate normalization range for {', '.join(which)}")

    @classmethod
    def identity(cls, d_in, n_out):
        return cls(np.zeros(d_in), np.ones(d_in), np.zeros(n_out), np.ones(n_out))

    @classmethod
    def fit(cls, inputs, outputs, in_names=None, out_names=None):
        inputs = np.asarray(inputs, dtype=float)
        outputs = np.asarray(outputs, dtype=float)
        return cls(inputs.min(axis=0), inputs.max(axis=0), outputs.min(axis=0),
                   outputs.max(axis=0), in_names, out_names)

    def subset(self, out_cols):
        """Same inputs, only the listed output columns."""
        cols = list(out_cols)
        return Normalizer(self.in_min, self.in_max, self.out_min[cols], self.out_max[cols],
                          self.in_names, [self.out_names[c] for c in cols])

    @property
    def in_range(self):
        return self.in_max - self.in_min

    @property
    def out_range(self):
        return self.out_max - self.out_min

    def normalize_inputs(self, x):
        return (np.asarray(x, dtype=float) - self.in_min) / self.in_range

    def denormalize_inputs(self, x):
        return np.asarray(x, dtype=float) * self.in_range + self.in_min

    def normalize_outputs(self, y, cols=None):
        lo, rg = (self.out_min, self.out_range) if cols is None else (self.out_min[cols], self.out_range[cols])
        return (np.asarray(y, dtype=float) - lo) / rg

    def denormalize_outputs(self, y, cols=None):
        lo, rg = (self.out_min, self.out_range) if cols is None else (self.out_min[cols], self.out_range[cols])
        return np.asarray(y, dtype=float) * rg + lo

    def d1_scale(self, out, coord):
        return self.out_range[out] / self.in_range[coord]

    def d2_scale(self, out, coord):
        return self.out_range[out] / self.in_range[coord] ** 2

    def to_dict(self):
        return {
            "in_min": self.in_min.tolist(), "in_max": self.in_max.tolist(),
            "out_min": self.out_min.tolist(), "out_max": self.out_max.tolist(),
            "in_names": self.in_names, "out_names": self.out_names,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(d["in_min"], d["in_max"], d["out_min"], d["out_max"],
                   d.get("in_names"), d.get("out_names"))


class PhysicalChannels:
    """Jet channels in physical units, recorded on a tape.

    Wraps a :class:`ChannelTape` built on normalized-coordinate jets and
    applies the affine chain rule of ``normalizer``.
    """

    def __init__(self, channels: ChannelTape, normalizer: Normalizer):
        self.ch = channels
        self.nrm = normalizer
        self.tape = channels.tape

    def value(self, j):
        return self.ch.value(j) * float(self.nrm.out_range[j]) + float(self.nrm.out_min[j])

    def d1(self, j, k):
        return self.ch.d1(j, k) * float(self.nrm.d1_scale(j, k))

    def d2(self, j, k):
        return self.ch.d2(j, k) * float(self.nrm.d2_scale(j, k))


def physical_jets(params, gates, normalizer, point, dir):
    """Jets of each output along physical coordinate ``dir``, in physical units."""
    point = np.asarray(point, dtype=float)
    single = point.ndim == 1
    xb = point[None, :] if single else point
    if not 0 <= dir < xb.shape[1]:
        raise IndexError(f"direction {dir} out of range for {xb.shape[1]} inputs")
    xn = normalizer.normalize_inputs(xb)
    jets = NetJets(params.weights, params.biases, _as_gate_list(params, gates),
                   params.activation, xn, (dir,), (dir,))
    out = []
    for j in range(jets.value.shape[1]):
        v = normalizer.denormalize_outputs(jets.value[:, j], j)
        d1 = jets.d1[0, :, j] * normalizer.d1_scale(j, dir)
        d2 = jets.d2[0, :, j] * normalizer.d2_scale(j, dir)
        if single:
            v, d1, d2 = float(v[0]), float(d1[0]), float(d2[0])
        out.append(Jet2(v, d1, d2))
    return out


def batch_jets(params, gates, x_norm, dirs, second):
    """Stamped :class:`NetJets` for normalized inputs (gates flat or per layer)."""
    return network_jets(params, x_norm, dirs, second, _as_gate_list(params, gates))


# checkpoints ---------------------------------------------------------------------

_MAGIC = "MUSIC-CHECKPOINT 1"


def save_checkpoint(path, params, meta=None, extra=None):
    """Write a text header then little-endian float64 payload and mask bytes.

    Payload order: theta (row-major per layer, weights then bias), gate
    log-alphas, optional ``extra`` float arrays (named in the header), mask bytes.
    """
    extra = extra or {}
    cfg = params.gate_cfg
    lines = [
        _MAGIC,
        "sizes " + " ".join(str(s) for s in params.sizes),
        f"activation {params.activation}",
        f"gate beta={cfg.beta!r} l={cfg.l!r} r={cfg.r!r} stretched={int(cfg.stretched_penalty)}",
        f"mask active={int(params.mask.sum())} total={params.n_params}",
    ]
    for name, arr in extra.items():
        lines.append(f"extra {name} {np.asarray(arr).size}")
    for key, val in (meta or {}).items():
        sval = str(val)
        if "\n" in sval:
            raise ValueError("metadata values must be single-line")
        lines.append(f"meta {key} {sval}")
    lines.append("end")
    blob = ("\n".join(lines) + "\n").encode()
    blob += params.theta.astype("<f8").tobytes()
    blob += params.log_alpha.astype("<f8").tobytes()
    for arr in extra.values():
        blob += np.asarray(arr, dtype="<f8").ravel().tobytes()
    blob += params.mask.astype(np.uint8).tobytes()
    with open(path, "wb") as fh:
        fh.write(blob)


def load_checkpoint(path):
    """Inverse of :func:`save_checkpoint`; returns ``(params, meta, extra)``."""
    with open(path, "rb") as fh:
        data = fh.read()
    end = data.find(b"\nend\n")
    if not data.startswith(_MAGIC.encode()) or end < 0:
        raise ValueError(f"{path}: not a checkpoint file")
    header = data[:end].decode().splitlines()
    off = end + len(b"\nend\n")
    sizes, act, cfg, meta, extras = None, None, None, {}, []
    for line in header[1:]:
        key, _, rest = line.partition(" ")
        if key == "sizes":
            sizes = tuple(int(s) for s in rest.split())
        elif key == "activation":
            act = rest.strip()
        elif key == "gate":
            kv = dict(item.split("=") for item in rest.split())
            cfg = GateConfig(float(kv["beta"]), float(kv["l"]), float(kv["r"]), bool(int(kv["stretched"])))
        elif key == "extra":
            name, n = rest.split()
            extras.append((name, int(n)))
        elif key == "meta":
            k, _, v = rest.partition(" ")
            meta[k] = v
    p = NetParams(sizes, act, gate_cfg=cfg)

    def take(n):
        nonlocal off
        arr = np.frombuffer(data, dtype="<f8", count=n, offset=off).astype(float)
        off += 8 * n
        return arr

    p.theta[:] = take(p.n_params)
    p.log_alpha[:] = take(p.n_gates)
    extra = {name: take(n) for name, n in extras}
    mask = np.frombuffer(data, dtype=np.uint8, count=p.n_params, offset=off)
    if off + p.n_params != len(data):
        raise ValueError(f"{path}: payload size mismatch")
    p.mask[:] = mask.astype(bool)
    return p, meta, extra


def export_pruned(params):
    """Structurally compressed copy: closed neurons removed, gates folded in.

    Eval-mode gates are computed once; a neuron with gate 0 loses its row and
    outgoing column, and the remaining gate values are multiplied into the
    outgoing weights. The returned network's gates are all open
    (``log_alpha = +inf``) and it computes the same function as the gated one.
    """
    gates = params.split_gates(eval_gates(params.log_alpha, params.gate_cfg))
    keep = [np.flatnonzero(g > 0.0) for g in gates]
    sizes = (params.sizes[0],) + tuple(len(k) for k in keep) + (params.sizes[-1],)
    out = NetParams(sizes, params.activation, gate_cfg=params.gate_cfg,
                    log_alpha=np.full(sum(len(k) for k in keep), np.inf))
    n = len(params.sizes) - 1
    for li in range(n):
        W = params.weights[li]
        M = params.mask[params.slices[li][0]:params.slices[li][1]].reshape(W.shape)
        Mb = params.mask[params.slices[li][1]:params.slices[li][2]]
        rows = keep[li] if li < n - 1 else np.arange(W.shape[0])
        cols = keep[li - 1] if li > 0 else np.arange(W.shape[1])
        w = W[np.ix_(rows, cols)].copy()
        if li > 0:
            w = w * gates[li - 1][cols][None, :]
        out.weights[li][...] = w
        out.biases[li][...] = params.biases[li][rows]
        s, m, e = out.slices[li]
        out.mask[s:m] = M[np.ix_(rows, cols)].ravel()
        out.mask[m:e] = Mb[rows]
    return out
