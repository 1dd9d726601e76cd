import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from music.autodiff import (
    ContractError,
    NetJets,
    StaleTapeError,
    Tape,
    UnsupportedPrimitiveError,
    backward,
    jet_eval,
    network_jets,
    record,
    residual_param_grad,
)
from music.autodiff import tape as T
from music.network import init_params


# tape ------------------------------------------------------------------------------


def test_product_rule_scalar():
    tape = record(lambda x, w: (w * x - 1.0) ** 2, x=3.0, w=0.5)
    g = backward(tape)
    # d/dx (wx-1)^2 = 2(wx-1)w, d/dw = 2(wx-1)x
    assert g["x"] == pytest.approx(2 * 0.5 * 0.5)
    assert g["w"] == pytest.approx(2 * 0.5 * 3.0)
    assert tape.value == pytest.approx(0.25)


@pytest.mark.parametrize("name, f, df", [
    ("exp", T.exp, math.exp),
    ("log", T.log, lambda x: 1.0 / x),
    ("tanh", T.tanh, lambda x: 1.0 - math.tanh(x) ** 2),
    ("sin", T.sin, math.cos),
    ("cos", T.cos, lambda x: -math.sin(x)),
    ("relu", T.relu, lambda x: float(x > 0)),
    ("logistic", T.logistic, lambda x: math.exp(-x) / (1 + math.exp(-x)) ** 2),
])
@pytest.mark.parametrize("x", [0.3, 1.7])
def test_unary_primitives(name, f, df, x):
    g = backward(record(lambda a: f(a), a=x))["a"]
    assert g == pytest.approx(df(x), rel=1e-14)


def test_min_max_clamp_step_subgradients():
    g = backward(record(lambda a, b: T.minimum(a, b) + 2.0 * T.maximum(a, b), a=1.0, b=2.0))
    assert (g["a"], g["b"]) == (1.0, 2.0)
    assert backward(record(lambda a: T.clamp(a, 0.0, 1.0), a=0.5))["a"] == 1.0
    assert backward(record(lambda a: T.clamp(a, 0.0, 1.0), a=1.5))["a"] == 0.0
    assert backward(record(lambda a: T.step(a, 0.2) * a, a=0.5))["a"] == 1.0


def test_pow_both_operands():
    g = backward(record(lambda a, b: T.power(a, b), a=2.0, b=3.0))
    assert g["a"] == pytest.approx(3 * 4.0)
    assert g["b"] == pytest.approx(8.0 * math.log(2.0))


def test_lanes_reduce_with_sum_and_mean():
    x = np.array([1.0, 2.0, 3.0])
    g = backward(record(lambda a: T.amean(a * a), a=x))["a"]
    np.testing.assert_allclose(g, 2 * x / 3, rtol=0, atol=1e-15)


def test_unknown_primitive_rejected():
    t = Tape()
    a = t.leaf(1.0, "a")
    with pytest.raises(UnsupportedPrimitiveError):
        t.apply("erf", a)


def test_non_scalar_root_rejected():
    tape = record(lambda a: a * 2.0, a=np.ones(3))
    with pytest.raises(ContractError):
        backward(tape)


def test_cross_tape_operands_rejected():
    t1, t2 = Tape(), Tape()
    with pytest.raises(ContractError):
        t1.leaf(1.0) + t2.leaf(2.0)


def test_guard_detects_stale_tape():
    tape = record(lambda a: a * a, a=2.0)
    tape.guard("v1")
    with pytest.raises(StaleTapeError):
        backward(tape, guard="v2")
    assert backward(tape, guard="v1")["a"] == 4.0


@given(st.lists(st.floats(-1e3, 1e3), min_size=2, max_size=40), st.randoms())
def test_batch_sum_is_permutation_invariant(vals, rnd):
    x = np.array(vals)
    perm = list(range(len(vals)))
    rnd.shuffle(perm)
    a = record(lambda v: T.asum(v * v), v=x).value
    b = record(lambda v: T.asum(v * v), v=x[perm]).value
    assert a == b


@given(st.floats(-2, 2), st.floats(-2, 2), st.floats(0.1, 3))
def test_tape_matches_closed_form(x, y, z):
    # f = sin(x y) + exp(-z) x^2 / z
    g = backward(record(lambda x, y, z: T.sin(x * y) + T.exp(-z) * x * x / z, x=x, y=y, z=z))
    assert g["x"] == pytest.approx(y * math.cos(x * y) + 2 * x * math.exp(-z) / z, abs=1e-12)
    assert g["y"] == pytest.approx(x * math.cos(x * y), abs=1e-12)
    dz = x * x * (-math.exp(-z) / z - math.exp(-z) / z ** 2)
    assert g["z"] == pytest.approx(dz, abs=1e-12)


# jets -------------------------------------------------------------------------------


def _one_neuron(act):
    W = [np.array([[0.7, -0.4]]), np.array([[1.3]])]
    b = [np.array([0.2]), np.array([-0.1])]
    return W, b


@pytest.mark.parametrize("act", ["tanh", "sin"])
def test_single_neuron_jets_closed_form(act):
    # y = c * phi(w . x + b) + d, so y_x = c phi' w0 and y_xx = c phi'' w0^2
    W, b = _one_neuron(act)
    x = np.array([[0.3, 0.6]])
    z = 0.7 * 0.3 - 0.4 * 0.6 + 0.2
    if act == "tanh":
        p0, p1, p2 = math.tanh(z), 1 - math.tanh(z) ** 2, -2 * math.tanh(z) * (1 - math.tanh(z) ** 2)
    else:
        p0, p1, p2 = math.sin(z), math.cos(z), -math.sin(z)
    j = NetJets(W, b, [np.array([0.8])], act, x, (0, 1), (0,))
    assert j.value[0, 0] == pytest.approx(1.3 * 0.8 * p0 - 0.1, abs=1e-15)
    assert j.d1[0, 0, 0] == pytest.approx(1.3 * 0.8 * p1 * 0.7, abs=1e-15)
    assert j.d1[1, 0, 0] == pytest.approx(1.3 * 0.8 * p1 * -0.4, abs=1e-15)
    assert j.d2[0, 0, 0] == pytest.approx(1.3 * 0.8 * p2 * 0.49, abs=1e-15)


def test_relu_second_derivative_is_zero():
    p = init_params(2, 2, 3, 8, "relu", seed=3)
    j = NetJets(p.weights, p.biases, None, "relu", np.random.default_rng(0).uniform(size=(10, 2)), (0, 1), (0, 1))
    assert np.all(j.d2 == 0.0)


def test_jet_eval_scalar_and_range():
    p = init_params(2, 2, 2, 5, "tanh", seed=0)
    out = jet_eval(p, [0.2, 0.4], 1)
    assert len(out) == 2 and isinstance(out[0].d2, float)
    with pytest.raises(IndexError):
        jet_eval(p, [0.2, 0.4], 2)


def test_second_direction_must_be_first_direction():
    p = init_params(2, 1, 1, 3, "tanh")
    with pytest.raises(ValueError):
        NetJets(p.weights, p.biases, None, "tanh", np.zeros((1, 2)), (0,), (1,))


def _ld_forward(W, b, g, act, x):
    """Independent long-double forward pass used as a finite-difference oracle."""
    f = {"tanh": np.tanh, "sin": np.sin, "relu": lambda z: z * (z > 0)}[act]
    a = np.asarray(x, dtype=np.longdouble)
    for li in range(len(W) - 1):
        a = f(a @ W[li].astype(np.longdouble).T + b[li].astype(np.longdouble)) * g[li].astype(np.longdouble)
    return a @ W[-1].astype(np.longdouble).T + b[-1].astype(np.longdouble)


@pytest.mark.parametrize("act", ["tanh", "sin"])
@pytest.mark.parametrize("seed", range(4))
def test_jets_match_long_double_differences(act, seed):
    rng = np.random.default_rng(seed)
    p = init_params(3, 2, 3, 7, act, seed=seed)
    g = [rng.uniform(0.2, 1.0, 7) for _ in range(3)]
    x = rng.uniform(size=(5, 3))
    j = NetJets(p.weights, p.biases, g, act, x, (0, 1, 2), (0, 2))
    for a, k in enumerate((0, 1, 2)):
        e = np.zeros(3)
        e[k] = 1
        h = np.longdouble("1e-5")
        fd1 = (_ld_forward(p.weights, p.biases, g, act, x + h * e) - _ld_forward(p.weights, p.biases, g, act, x - h * e)) / (2 * h)
        np.testing.assert_allclose(j.d1[a], fd1.astype(float), rtol=1e-7, atol=1e-9)
    for a, k in enumerate((0, 2)):
        e = np.zeros(3)
        e[k] = 1
        h = np.longdouble("1e-4")
        f0 = _ld_forward(p.weights, p.biases, g, act, x)
        fd2 = (_ld_forward(p.weights, p.biases, g, act, x + h * e) - 2 * f0
               + _ld_forward(p.weights, p.biases, g, act, x - h * e)) / (h * h)
        np.testing.assert_allclose(j.d2[a], fd2.astype(float), rtol=1e-6, atol=1e-8)


# reverse sweep through jets ------------------------------------------------------------------


def _loss_grads(p, g, x, act, cv, c1, c2):
    j = network_jets(p, x, (0, 1), (1,), g)

    def loss_fn(ch):
        tot = 0.0
        for o in range(p.sizes[-1]):
            tot = tot + T.asum(cv[o] * ch.value(o) ** 2) + T.asum(c1[o] * ch.d1(o, 0) * ch.d2(o, 1))
            tot = tot + T.asum(c2[o] * T.tanh(ch.d1(o, 1)))
        return tot
    return residual_param_grad(loss_fn, p, j, g)


@pytest.mark.parametrize("act", ["tanh", "sin", "relu"])
def test_parameter_gradient_directional_difference(act):
    rng = np.random.default_rng(7)
    p = init_params(2, 2, 3, 6, act, seed=2)
    p.theta[:] += rng.normal(0, 0.1, p.n_params)
    g = [rng.uniform(0.3, 1.0, 6) for _ in range(3)]
    x = rng.uniform(size=(9, 2))
    cv, c1, c2 = rng.normal(size=(3, 2))
    loss, grads = _loss_grads(p, g, x, act, cv, c1, c2)
    flat = np.concatenate([np.concatenate([w.ravel(), b]) for w, b in zip(grads.weights, grads.biases)])
    for _ in range(3):
        v = rng.normal(size=p.n_params)
        h = 1e-6

        def at(s):
            q = p.copy()
            q.theta[:] += s * v
            return _loss_grads(q, g, x, act, cv, c1, c2)[0]
        fd = (at(h) - at(-h)) / (2 * h)
        assert flat @ v == pytest.approx(fd, rel=1e-6, abs=1e-9)


def test_stale_parameters_detected():
    p = init_params(2, 1, 1, 3, "tanh")
    j = network_jets(p, np.zeros((2, 2)), (0,), ())
    p.theta[0] += 1.0
    with pytest.raises(StaleTapeError):
        residual_param_grad(lambda ch: T.asum(ch.value(0)), p, j)


def test_non_scalar_loss_rejected():
    p = init_params(2, 1, 1, 3, "tanh")
    j = network_jets(p, np.zeros((2, 2)), (0,), ())
    with pytest.raises(ContractError):
        residual_param_grad(lambda ch: ch.value(0) * 2.0, p, j)


@given(st.floats(0.1, 3.0), st.integers(0, 2 ** 31 - 1))
def test_backward_is_linear_in_adjoints(c, seed):
    rng = np.random.default_rng(seed)
    p = init_params(2, 2, 2, 4, "tanh", seed=seed % 100)
    x = rng.uniform(size=(4, 2))
    j = NetJets(p.weights, p.biases, None, "tanh", x, (0, 1), (0,))
    gv, g1, g2 = rng.normal(size=j.value.shape), rng.normal(size=j.d1.shape), rng.normal(size=j.d2.shape)
    a = j.backward(gv, g1, g2)
    b = j.backward(c * gv, c * g1, c * g2)
    for wa, wb in zip(a.weights, b.weights):
        np.testing.assert_allclose(wb, c * wa, rtol=1e-12, atol=1e-12)
