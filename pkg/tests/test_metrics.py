import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from music import metrics as M
from music.network import init_params, prune_topk

finite = st.floats(-1e3, 1e3, allow_nan=False)
vec = arrays(np.float64, st.integers(2, 30), elements=finite).filter(lambda a: np.linalg.norm(a) > 1e-3)


def test_rel_l2_examples():
    u = np.array([3.0, -4.0])
    assert M.rel_l2(u, u) == 0.0
    assert M.rel_l2(u, np.zeros(2)) == 1.0
    assert M.rel_l2(u, 2 * u) == 1.0
    with pytest.raises(ValueError):
        M.rel_l2(np.zeros(2), u)
    with pytest.raises(ValueError):
        M.rel_l2(u, np.zeros(3))


def test_fullfield_examples():
    u1, u2 = np.array([1.0, 2.0, 2.0]), np.array([0.0, 3.0, 0.0])
    assert M.fullfield_rel_l2([u1, u2], [u1, u2]) == 0.0
    assert M.fullfield_rel_l2([u1, u2], [u1, np.zeros(3)]) == pytest.approx(1 / math.sqrt(2), abs=1e-15)


def test_fullfield_differs_from_mean():
    u1, u2 = np.ones(4), 10 * np.ones(4)
    p1, p2 = np.zeros(4), u2
    # mean of (1, 0) is 0.5 while the stacked error is 2 / sqrt(404)
    assert M.per_variable_mean([u1, u2], [p1, p2]) == 0.5
    assert M.fullfield_rel_l2([u1, u2], [p1, p2]) == pytest.approx(2 / math.sqrt(404), rel=1e-15)


@given(vec, st.floats(-5, 5))
def test_scale_reporting(u, c):
    assert M.rel_l2(u, c * u) == pytest.approx(abs(1 - c), rel=1e-12, abs=1e-12)


@given(st.integers(0, 2 ** 32 - 1), st.integers(2, 20))
def test_fullfield_identity(seed, n):
    rng = np.random.default_rng(seed)
    u1, u2 = rng.normal(size=n), 5 * rng.normal(size=n)
    p1, p2 = u1 + rng.normal(size=n), u2 + 0.1 * rng.normal(size=n)
    e1, e2 = M.rel_l2(u1, p1), M.rel_l2(u2, p2)
    n1, n2 = np.sum(u1 ** 2), np.sum(u2 ** 2)
    ff = M.fullfield_rel_l2([u1, u2], [p1, p2])
    assert ff ** 2 == pytest.approx((e1 ** 2 * n1 + e2 ** 2 * n2) / (n1 + n2), rel=1e-12)
    assert min(e1, e2) - 1e-12 <= ff <= max(e1, e2) + 1e-12


@given(st.integers(0, 2 ** 32 - 1))
def test_evolution_consistency(seed):
    rng = np.random.default_rng(seed)
    u = rng.normal(size=(6, 5))
    p = u + rng.normal(size=(6, 5))
    ev = M.error_evolution(u, p)
    num = ev * np.linalg.norm(u, axis=1)
    assert math.sqrt(np.sum(num ** 2)) / np.linalg.norm(u) == pytest.approx(M.rel_l2(u, p), rel=1e-12)


def test_evolution_zero_level_undefined():
    u = np.array([[0.0, 0.0], [1.0, 1.0]])
    ev = M.error_evolution(u, u)
    assert math.isnan(ev[0]) and ev[1] == 0.0


def test_metrics_do_not_mutate():
    u, p = np.arange(4.0), np.ones(4)
    uc, pc = u.copy(), p.copy()
    M.rel_l2(u, p), M.fullfield_rel_l2([u], [p]), M.error_evolution(u[:, None], p[:, None])
    assert np.array_equal(u, uc) and np.array_equal(p, pc)


def test_sparsity_percent():
    params = init_params(2, 2, 4, 20)
    assert M.sparsity_percent(params, "gated") == 100.0
    assert M.sparsity_percent(params, "none") == 100.0
    half = prune_topk(params, params.n_params // 2)
    assert M.sparsity_percent(half, "topk") == 50.0


def test_aggregate_and_report():
    assert M.aggregate([0.1]) == (0.1, 0.0)
    m, s = M.aggregate([1.0, 2.0, 3.0])
    assert m == 2.0 and s == 1.0
    with pytest.raises(ValueError):
        M.aggregate([])
    u = [np.ones((2, 3)), 2 * np.ones((2, 3))]
    rep = M.ErrorReport("r").add("full", u, [u[0], np.zeros((2, 3))], ["a", "b"])
    assert rep.value("full", "a") == 0.0 and rep.value("full", "mean_of_vars") == 0.5
    text = rep.to_csv().splitlines()
    assert text[0] == "# schema,error_report,1" and len(text) == 2 + 4
