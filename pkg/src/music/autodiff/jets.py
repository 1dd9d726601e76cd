"""Second-order forward jets through a gated MLP, with their reverse sweep.

For a direction ``e_k`` in input space each layer carries three channels per
neuron: value, first and second directional derivative. An activation maps

    (v, d1, d2) -> (phi(v), phi'(v) d1, phi''(v) d1**2 + phi'(v) d2)

and a hidden neuron's gate multiplies all three. :class:`NetJets` evaluates
the channels for a whole batch and several directions at once and keeps what
the reverse sweep needs, so a loss built from any of the channels can be
differentiated with respect to weights, biases and gate values exactly.

Channels are stacked on a leading axis of length ``K = 1 + D + S``: the value,
then one first-derivative channel per direction, then one second-derivative
channel per ``second`` direction. The input layer is seeded with
``(x, e_k, 0)``, so every layer is one affine map over all channels (bias on
channel 0 only) followed by the elementwise jet rule.
"""

from dataclasses import dataclass

import numpy as np

from .. import _accel

__all__ = ["Jet2", "NetJets", "JetGrads", "activation_derivs", "jet_eval", "ACTIVATIONS"]

ACTIVATIONS = ("relu", "tanh", "sin")


@dataclass(frozen=True)
class Jet2:
    """Value and first/second derivative of one output along one coordinate."""

    value: object
    d1: object
    d2: object


@dataclass
class JetGrads:
    weights: list
    biases: list
    gates: list


def activation_derivs(kind, z, order=2):
    """``phi`` and its derivatives up to ``order`` (at most 3) at ``z``."""
    if kind == "tanh":
        phi = np.tanh(z)
        p1 = 1.0 - phi * phi
        p2 = -2.0 * phi * p1
    elif kind == "sin":
        phi, p1 = np.sin(z), np.cos(z)
        p2 = -phi
    elif kind == "relu":
        p1 = (z > 0.0).astype(float)
        phi, p2 = z * p1, np.zeros_like(z)
    else:
        raise ValueError(f"unknown activation {kind!r}")
    out = (phi, p1, p2, _third(kind, phi, p1))
    return out[:order + 1]


def _third(kind, phi, p1):
    if kind == "tanh":
        return 2.0 * p1 * (2.0 * phi * phi - p1)
    if kind == "sin":
        return -p1
    return np.zeros_like(p1)


# elementwise layer kernels --------------------------------------------------------
#
# Z are pre-activation channels (K, N, H). sd[s] is the first-derivative channel
# index of second direction s. The activation itself is evaluated by numpy,
# which vectorizes transcendentals far better than a scalar loop.


@_accel.njit
def _layer_fwd_nb(Z, phi, p1, p2, g, D, sd, C):
    K, N, H = Z.shape
    S = sd.shape[0]
    for n in range(N):
        for h in range(H):
            gh = g[h]
            q1 = p1[n, h]
            C[0, n, h] = phi[n, h] * gh
            for d in range(D):
                C[1 + d, n, h] = q1 * Z[1 + d, n, h] * gh
            for s in range(S):
                z1 = Z[sd[s], n, h]
                C[1 + D + s, n, h] = (p2[n, h] * z1 * z1 + q1 * Z[1 + D + s, n, h]) * gh


def _layer_fwd_np(Z, phi, p1, p2, g, D, sd, C):
    C[0] = phi * g
    if D:
        np.multiply(Z[1:1 + D], p1 * g, out=C[1:1 + D])
    for s in range(len(sd)):
        z1 = Z[sd[s]]
        C[1 + D + s] = (p2 * z1 * z1 + p1 * Z[1 + D + s]) * g


@_accel.njit
def _layer_bwd_nb(Cb, Z, phi, p1, p2, p3, g, D, sd, Zb, gsum):
    K, N, H = Z.shape
    S = sd.shape[0]
    for h in range(H):
        gsum[h] = 0.0
    for n in range(N):
        for h in range(H):
            gh = g[h]
            q1 = p1[n, h]
            q2 = p2[n, h]
            ab = Cb[0, n, h]
            zb = ab * q1
            gs = ab * phi[n, h]
            for d in range(D):
                b1 = Cb[1 + d, n, h]
                z1 = Z[1 + d, n, h]
                zb += b1 * q2 * z1
                gs += b1 * q1 * z1
                Zb[1 + d, n, h] = b1 * q1 * gh
            for s in range(S):
                b2 = Cb[1 + D + s, n, h]
                c = sd[s]
                z1 = Z[c, n, h]
                z2 = Z[1 + D + s, n, h]
                zb += b2 * (p3[n, h] * z1 * z1 + q2 * z2)
                gs += b2 * (q2 * z1 * z1 + q1 * z2)
                Zb[c, n, h] += 2.0 * b2 * q2 * z1 * gh
                Zb[1 + D + s, n, h] = b2 * q1 * gh
            Zb[0, n, h] = zb * gh
            gsum[h] += gs


def _layer_bwd_np(Cb, Z, phi, p1, p2, p3, g, D, sd, Zb, gsum):
    ab = Cb[0]
    zb = ab * p1
    gs = ab * phi
    if D:
        B1, Z1 = Cb[1:1 + D], Z[1:1 + D]
        zb = zb + (B1 * (p2 * Z1)).sum(axis=0)
        gs = gs + (B1 * (p1 * Z1)).sum(axis=0)
        np.multiply(B1, p1 * g, out=Zb[1:1 + D])
    for s in range(len(sd)):
        b2, c = Cb[1 + D + s], sd[s]
        z1, z2 = Z[c], Z[1 + D + s]
        zb = zb + b2 * (p3 * z1 * z1 + p2 * z2)
        gs = gs + b2 * (p2 * z1 * z1 + p1 * z2)
        Zb[c] += 2.0 * b2 * p2 * z1 * g
        Zb[1 + D + s] = b2 * p1 * g
    Zb[0] = zb * g
    gsum[:] = gs.sum(axis=0)


_layer_fwd = _accel.pick(_layer_fwd_nb, _layer_fwd_np)
_layer_bwd = _accel.pick(_layer_bwd_nb, _layer_bwd_np)


# network jets ---------------------------------------------------------------------


class NetJets:
    """Jets of all network outputs along ``dirs`` for a batch of inputs.

    Parameters
    ----------
    weights, biases : lists of arrays, layer ``l`` weight shaped ``(out, in)``.
    gates : list of per-hidden-layer multipliers, or None for all ones.
    activation : one of ``relu``, ``tanh``, ``sin``.
    x : ``(N, d_in)`` inputs.
    dirs : input coordinates that get a first-derivative channel.
    second : subset of ``dirs`` that also get a second-derivative channel.

    Attributes ``value`` ``(N, n)``, ``d1`` ``(len(dirs), N, n)`` and ``d2``
    ``(len(second), N, n)`` hold the output channels.
    """

    def __init__(self, weights, biases, gates, activation, x, dirs=(), second=()):
        x = np.asarray(x, dtype=float)
        if x.ndim != 2:
            raise ValueError("inputs must be shaped (N, d_in)")
        N, d_in = x.shape
        dirs = tuple(int(k) for k in dirs)
        second = tuple(int(k) for k in second)
        if len(set(dirs)) != len(dirs):
            raise ValueError("repeated direction")
        for k in dirs:
            if not 0 <= k < d_in:
                raise IndexError(f"direction {k} out of range for {d_in} inputs")
        for k in second:
            if k not in dirs:
                raise ValueError(f"second-derivative direction {k} not among dirs")
        if activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        n_hidden = len(weights) - 1
        if gates is None:
            gates = [np.ones(w.shape[0]) for w in weights[:-1]]
        if len(gates) != n_hidden:
            raise ValueError(f"expected {n_hidden} gate vectors, got {len(gates)}")
        self.weights = weights
        self.activation = activation
        self.dirs = dirs
        self.second = second
        self.n = N
        D, S = len(dirs), len(second)
        self._sd = np.array([1 + dirs.index(k) for k in second], dtype=np.int64)
        K = self._K = 1 + D + S

        C = np.zeros((K, N, d_in))
        C[0] = x
        for i, k in enumerate(dirs):
            C[1 + i, :, k] = 1.0
        self._inputs, self._cache = [], []
        for li in range(n_hidden):
            W, b = weights[li], biases[li]
            g = np.ascontiguousarray(gates[li], dtype=float)
            if g.shape != (W.shape[0],):
                raise ValueError(f"layer {li}: gate shape {g.shape}, expected ({W.shape[0]},)")
            self._inputs.append(C)
            Z = self._affine(C, W, b)
            phi, p1, p2 = activation_derivs(activation, Z[0], 2)
            C = np.empty_like(Z)
            _layer_fwd(Z, phi, p1, p2, g, D, self._sd, C)
            self._cache.append((Z, phi, p1, p2, g))
        self._inputs.append(C)
        Y = self._affine(C, weights[-1], biases[-1])
        self.value = Y[0]
        self.d1 = Y[1:1 + D]
        self.d2 = Y[1 + D:]

    @staticmethod
    def _affine(C, W, b):
        K, N, fan_in = C.shape
        if W.shape[1] != fan_in:
            raise ValueError(f"weight expects {W.shape[1]} inputs, layer provides {fan_in}")
        Z = (C.reshape(K * N, fan_in) @ W.T).reshape(K, N, W.shape[0])
        Z[0] += b
        return Z

    def channel(self, out, dir=None, order=0):
        """Output channel ``out`` (column), optionally a derivative along ``dir``."""
        if order == 0:
            return self.value[:, out]
        if order == 1:
            return self.d1[self.dirs.index(dir), :, out]
        if order == 2:
            return self.d2[self.second.index(dir), :, out]
        raise ValueError("order must be 0, 1 or 2")

    def backward(self, g_value, g_d1=None, g_d2=None):
        """Pull output-channel adjoints back to weight, bias and gate gradients."""
        K, N = self._K, self.n
        D, S = len(self.dirs), len(self.second)
        n_out = self.weights[-1].shape[0]
        Zb = np.zeros((K, N, n_out))
        Zb[0] = np.asarray(g_value, dtype=float).reshape(N, n_out)
        if g_d1 is not None and D:
            Zb[1:1 + D] = np.asarray(g_d1, dtype=float).reshape(D, N, n_out)
        if g_d2 is not None and S:
            Zb[1 + D:] = np.asarray(g_d2, dtype=float).reshape(S, N, n_out)
        n_hidden = len(self._cache)
        gW = [None] * (n_hidden + 1)
        gb = [None] * (n_hidden + 1)
        gg = [None] * n_hidden
        for li in range(n_hidden, -1, -1):
            W = self.weights[li]
            H, fan_in = W.shape
            Zf = Zb.reshape(K * N, H)
            gW[li] = Zf.T @ self._inputs[li].reshape(K * N, fan_in)
            gb[li] = Zb[0].sum(axis=0)
            if li == 0:
                break
            Cb = (Zf @ W).reshape(K, N, fan_in)
            Z, phi, p1, p2, g = self._cache[li - 1]
            p3 = _third(self.activation, phi, p1) if S else p1
            Zb = np.zeros_like(Z) if S else np.empty_like(Z)
            gsum = np.empty(fan_in)
            _layer_bwd(Cb, Z, phi, p1, p2, p3, g, D, self._sd, Zb, gsum)
            gg[li - 1] = gsum
        return JetGrads(gW, gb, gg)


def jet_eval(params, x, dir, gates=None):
    """Jets of every network output along input coordinate ``dir``.

    ``x`` is one input vector or an ``(N, d_in)`` batch. Returns one
    :class:`Jet2` per output; channels are scalars for a single point.
    """
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    xb = x[None, :] if single else x
    if not 0 <= dir < xb.shape[1]:
        raise IndexError(f"direction {dir} out of range for {xb.shape[1]} inputs")
    jets = NetJets(params.weights, params.biases, gates, params.activation, xb, (dir,), (dir,))
    out = []
    for j in range(jets.value.shape[1]):
        v, d1, d2 = jets.value[:, j], jets.d1[0, :, j], jets.d2[0, :, j]
        if single:
            v, d1, d2 = float(v[0]), float(d1[0]), float(d2[0])
        out.append(Jet2(v, d1, d2))
    return out
