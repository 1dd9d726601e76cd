"""Parameter gradients of losses built from network jets.

The loss is recorded on a :class:`~music.autodiff.tape.Tape` whose leaves are
the jet channels (one lane per sample). A reverse sweep over that tape gives
channel adjoints; :meth:`NetJets.backward` carries them through the jet
propagation to weights, biases and gate values.
"""

import hashlib

import numpy as np

from .jets import NetJets
from .tape import ContractError, StaleTapeError, Tape, Var

__all__ = ["params_token", "ChannelTape", "network_jets", "residual_param_grad"]


def params_token(params, gates=None):
    """Content hash of the parameters (and gates) a set of jets depends on."""
    h = hashlib.blake2b(digest_size=16)
    for w, b in zip(params.weights, params.biases):
        h.update(np.ascontiguousarray(w).tobytes())
        h.update(np.ascontiguousarray(b).tobytes())
    if gates is not None:
        for g in gates:
            h.update(np.ascontiguousarray(g, dtype=float).tobytes())
    return h.hexdigest()


def network_jets(params, x, dirs=(), second=(), gates=None):
    """Run :class:`NetJets` and stamp it with the parameter token."""
    jets = NetJets(params.weights, params.biases, gates, params.activation, x, dirs, second)
    jets.token = params_token(params, gates)
    return jets


class ChannelTape:
    """Lazily exposes jet channels as tape leaves.

    ``value(j)``, ``d1(j, k)`` and ``d2(j, k)`` return :class:`Var` nodes for
    output ``j`` (optionally along input coordinate ``k``); repeated requests
    return the same leaf.
    """

    def __init__(self, jets, tape=None):
        self.jets = jets
        self.tape = Tape() if tape is None else tape
        self._leaves = {}

    def _get(self, key, arr):
        var = self._leaves.get(key)
        if var is None:
            var = self.tape.leaf(np.array(arr, dtype=float), name="%s:%d:%s" % key)
            self._leaves[key] = var
        return var

    def value(self, j):
        return self._get(("v", j, "-"), self.jets.value[:, j])

    def d1(self, j, k):
        if k not in self.jets.dirs:
            raise KeyError(f"no first-derivative channel along input {k}")
        return self._get(("d1", j, str(k)), self.jets.d1[self.jets.dirs.index(k), :, j])

    def d2(self, j, k):
        if k not in self.jets.second:
            raise KeyError(f"no second-derivative channel along input {k}")
        return self._get(("d2", j, str(k)), self.jets.d2[self.jets.second.index(k), :, j])

    def channel_adjoints(self, root):
        """Reverse sweep from ``root``; returns arrays shaped like the jet channels."""
        adj = self.tape.adjoints(root)
        jets = self.jets
        n = jets.n
        gv = np.zeros_like(jets.value)
        g1 = np.zeros_like(jets.d1)
        g2 = np.zeros_like(jets.d2)
        for (kind, j, k), var in self._leaves.items():
            a = adj[var.index] if var.index < len(adj) else 0.0
            a = np.broadcast_to(np.asarray(a, dtype=float), (n,))
            if kind == "v":
                gv[:, j] += a
            elif kind == "d1":
                g1[jets.dirs.index(int(k)), :, j] += a
            else:
                g2[jets.second.index(int(k)), :, j] += a
        return gv, g1, g2


def residual_param_grad(loss_fn, params, jets, gates=None):
    """Value and parameter gradient of ``loss_fn`` applied to ``jets``.

    ``loss_fn(channels)`` receives a :class:`ChannelTape` and returns a scalar
    :class:`Var` (or a plain number for a constant loss). Returns
    ``(loss, JetGrads)``. Raises :class:`StaleTapeError` if ``params`` (or the
    gates) changed since the jets were computed.
    """
    token = getattr(jets, "token", None)
    if token is None or token != params_token(params, gates):
        raise StaleTapeError("parameters changed after the jets were evaluated")
    ch = ChannelTape(jets)
    root = loss_fn(ch)
    if not isinstance(root, Var):
        if np.ndim(root) != 0:
            raise ContractError("loss must be a scalar")
        root = ch.tape.const(float(root))
    ch.tape.root = root.index
    gv, g1, g2 = ch.channel_adjoints(root)
    grads = jets.backward(gv, g1, g2)
    return float(root.value), grads
