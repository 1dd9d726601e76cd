import math
import warnings

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from music.network import (
    GateConfig,
    Normalizer,
    NetParams,
    active_count,
    eval_gates,
    export_pruned,
    forward,
    gate_derivative,
    init_params,
    l0_penalty,
    l0_penalty_grad,
    load_checkpoint,
    prune_topk,
    sample_gates,
    save_checkpoint,
    topk_mask,
)

log_alphas = st.lists(st.floats(-8, 8), min_size=1, max_size=50).map(np.array)


def test_parameter_count_four_by_twenty():
    # 2 inputs, 4 hidden layers of 20, 2 outputs
    p = init_params(2, 2, 4, 20)
    assert p.n_params == (2 * 20 + 20) + 3 * (20 * 20 + 20) + (20 * 2 + 2) == 1362
    assert p.n_gates == 80
    assert p.hidden_sizes == (20, 20, 20, 20)


def test_weights_are_views_of_theta():
    p = init_params(2, 1, 2, 3, seed=1)
    p.theta[:] = 0.0
    assert all(np.all(w == 0) for w in p.weights)


def test_init_is_seeded():
    a, b = init_params(2, 2, 3, 5, seed=4), init_params(2, 2, 3, 5, seed=4)
    assert np.array_equal(a.theta, b.theta)
    assert all(np.all(bb == 0) for bb in a.biases)


def test_forward_errors_name_the_layer():
    p = init_params(2, 1, 2, 3)
    with pytest.raises(ValueError, match="layer 0"):
        forward(p, None, np.zeros((1, 3)))
    with pytest.raises(ValueError, match="layer 1"):
        forward(p, [np.ones(3), np.ones(4)], np.zeros((1, 2)))


def test_forward_warns_on_unnormalized_inputs():
    p = init_params(2, 1, 1, 3)
    with pytest.warns(UserWarning):
        forward(p, None, np.array([[10.0, 0.0]]))
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        forward(p, None, np.array([[0.5, 0.5]]))


# gates ------------------------------------------------------------------------------


def test_gate_config_validation():
    with pytest.raises(ValueError):
        GateConfig(l=0.1)
    with pytest.raises(ValueError):
        GateConfig(r=0.9)


@given(log_alphas)
def test_eval_gates_deterministic_bounded(la):
    a, b = eval_gates(la), eval_gates(la)
    assert np.array_equal(a, b)
    assert np.all((a >= 0) & (a <= 1))


@given(st.floats(-8, 8), st.floats(0, 4))
def test_eval_gates_monotone(a, d):
    assert eval_gates(np.array([a + d]))[0] >= eval_gates(np.array([a]))[0]


def test_eval_gate_values():
    # s = sigmoid(log_alpha) (r - l) + l, clipped
    la = np.array([0.0, 2.0, -10.0, 10.0])
    s = 1 / (1 + np.exp(-la)) * 1.2 - 0.1
    np.testing.assert_allclose(eval_gates(la), np.clip(s, 0, 1), rtol=0, atol=1e-15)


def test_training_gates_need_open_noise():
    with pytest.raises(ValueError):
        sample_gates(np.zeros(3), u=np.array([0.5, 0.0, 0.2]))


@given(log_alphas)
def test_l0_penalty_is_sum_of_sigmoids(la):
    assert l0_penalty(la) == pytest.approx(float(np.sum(1 / (1 + np.exp(-la)))), abs=1e-12)


def test_stretched_penalty_shift():
    cfg = GateConfig()
    la = np.array([0.5, -1.0])
    shift = cfg.beta * math.log(0.1 / 1.1)
    want = np.sum(1 / (1 + np.exp(-(la - shift))))
    assert l0_penalty(la, cfg, stretched=True) == pytest.approx(want, abs=1e-15)


def test_l0_penalty_grad_matches_difference():
    la = np.array([-1.0, 0.3, 2.0])
    h = 1e-6
    for i in range(3):
        e = np.zeros(3)
        e[i] = h
        fd = (l0_penalty(la + e) - l0_penalty(la - e)) / (2 * h)
        assert l0_penalty_grad(la)[i] == pytest.approx(fd, rel=1e-8)


def test_gate_derivative_matches_difference():
    la = np.array([-0.4, 0.7, 1.5])
    u = np.array([0.3, 0.6, 0.45])
    h = 1e-7
    fd = (sample_gates(la + h, u=u) - sample_gates(la - h, u=u)) / (2 * h)
    np.testing.assert_allclose(gate_derivative(la, u=u), fd, rtol=1e-6, atol=1e-9)


# top-k ------------------------------------------------------------------------------


@given(st.lists(st.floats(-5, 5), min_size=1, max_size=80), st.data())
def test_prune_topk_exact_and_idempotent(vals, data):
    p = NetParams((1, len(vals), 1))
    n = p.n_params
    rng = np.random.default_rng(len(vals))
    p.theta[:] = rng.normal(size=n)
    p.theta[: len(vals)] = vals
    k = data.draw(st.integers(1, n))
    q = prune_topk(p, k)
    assert int(np.count_nonzero(q.mask)) == k
    assert active_count(q, "topk") == k
    r = prune_topk(q, k)
    assert np.array_equal(r.theta, q.theta) and np.array_equal(r.mask, q.mask)


def test_topk_tie_break_and_range():
    assert topk_mask([1.0, -1.0, 1.0, 0.5], 2).tolist() == [True, True, False, False]
    with pytest.raises(ValueError):
        topk_mask([1.0], 0)


def test_active_count_modes():
    p = init_params(2, 1, 2, 3)
    assert active_count(p, "dense") == p.n_params
    assert active_count(p, "gated") == p.n_params
    # close the first gate of layer 0: its 2 in-weights, bias and 3 out-weights go
    p.log_alpha[0] = -20.0
    assert active_count(p, "gated") == p.n_params - 6


# export and checkpoints -------------------------------------------------------------------


def test_export_pruned_same_function():
    rng = np.random.default_rng(0)
    p = init_params(2, 2, 3, 6, seed=1)
    p.log_alpha[:] = rng.uniform(-3, 3, p.n_gates)
    p.log_alpha[[0, 7, 13]] = -20.0
    q = export_pruned(p)
    assert q.sizes[1:-1] == tuple(int(np.sum(g > 0)) for g in p.split_gates(eval_gates(p.log_alpha)))
    x = rng.uniform(size=(20, 2))
    np.testing.assert_allclose(forward(q, None, x), forward(p, eval_gates(p.log_alpha), x), rtol=1e-13, atol=1e-14)


def test_checkpoint_round_trip_bit_exact(tmp_path):
    p = init_params(3, 2, 2, 5, "sin", seed=9)
    p.log_alpha[:] = np.linspace(-2, 2, p.n_gates)
    p.mask[::3] = False
    extra = {"adam_m": np.arange(4.0)}
    save_checkpoint(tmp_path / "a.ckpt", p, {"system": "fn", "lr": "0.001"}, extra)
    q, meta, ex = load_checkpoint(tmp_path / "a.ckpt")
    assert q.sizes == p.sizes and q.activation == "sin"
    assert np.array_equal(q.theta, p.theta) and np.array_equal(q.log_alpha, p.log_alpha)
    assert np.array_equal(q.mask, p.mask)
    assert meta == {"system": "fn", "lr": "0.001"}
    assert np.array_equal(ex["adam_m"], extra["adam_m"])
    save_checkpoint(tmp_path / "b.ckpt", q, meta, ex)
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()


def test_checkpoint_rejects_garbage(tmp_path):
    f = tmp_path / "x.ckpt"
    f.write_bytes(b"not a checkpoint")
    with pytest.raises(ValueError):
        load_checkpoint(f)


# normalization -----------------------------------------------------------------------------


@given(st.floats(-100, 100), st.floats(0.01, 100), st.floats(-1e3, 1e3))
def test_normalizer_round_trip(lo, width, y):
    n = Normalizer([lo], [lo + width], [lo], [lo + width])
    assert n.denormalize_outputs(n.normalize_outputs(np.array([y])))[0] == pytest.approx(y, rel=1e-12, abs=1e-9)


def test_normalizer_degenerate_names_variable():
    with pytest.raises(ValueError, match="hu"):
        Normalizer([0], [1], [0, 2], [1, 2], ["x"], ["h", "hu"])


def test_normalizer_chain_scales():
    n = Normalizer([0, 0], [10, 2], [1], [5])
    assert n.d1_scale(0, 0) == pytest.approx(0.4)
    assert n.d2_scale(0, 1) == pytest.approx(1.0)
    assert Normalizer.from_dict(n.to_dict()).to_dict() == n.to_dict()
