import numpy as np
import pytest
import sympy as sp

from music import systems as Y
from music.autodiff import tape as T
from music.network import GateConfig, l0_penalty

x, y, t = sp.symbols("x y t")
COORDS = {1: (x, t), 2: (x, y, t)}


def _jets(exprs, dim, pts):
    """Values and all first/second derivatives of sympy fields at ``pts``."""
    syms = COORDS[dim]
    names = ("x", "t") if dim == 1 else ("x", "y", "t")
    out = {}
    for var, e in exprs.items():
        f = lambda ex: np.broadcast_to(np.asarray(sp.lambdify(syms, ex, "numpy")(*pts.T), float),
                                       (len(pts),))
        d1 = {c: f(sp.diff(e, s)) for c, s in zip(names, syms)}
        d2 = {c: f(sp.diff(e, s, 2)) for c, s in zip(names, syms)}
        out[var] = (f(e), d1, d2)
    return Y.JetSet.from_arrays(**out)


def _oracle(expr, dim, pts):
    return np.asarray(sp.lambdify(COORDS[dim], expr, "numpy")(*pts.T), float)


@pytest.fixture
def pts1():
    rng = np.random.default_rng(1)
    return np.column_stack([rng.uniform(0, 10, 40), rng.uniform(0, 1, 40)])


@pytest.fixture
def pts2():
    rng = np.random.default_rng(2)
    return np.column_stack([rng.uniform(0, 3, 40), rng.uniform(0, 3, 40), rng.uniform(0, 1, 40)])


def test_swe_manufactured_zero_residual(pts1):
    h = 1.5 + sp.sin(x) * sp.cos(t)
    q = -sp.cos(x) * sp.sin(t)
    r = Y.swe().residuals(_jets({"h": h, "hu": q}, 1, pts1))["h"]
    assert np.max(np.abs(r)) < 1e-14


def test_swe_manufactured_nonzero_residual(pts1):
    h = 1.0 + 0.3 * sp.exp(-x) * t
    q = x * sp.cos(t)
    r = Y.swe().residuals(_jets({"h": h, "hu": q}, 1, pts1))["h"]
    ref = _oracle(sp.diff(h, t) + sp.diff(q, x), 1, pts1)
    np.testing.assert_allclose(r, ref, rtol=1e-13, atol=1e-13)


def test_swe_swapped_matches_conservative_form_when_wet(pts1):
    g = 9.81
    h = 0.8 + 0.2 * sp.sin(x + t)
    q = sp.cos(2 * x) * (1 + t)
    ref = _oracle(sp.diff(q, t) + sp.diff(q ** 2 / h, x) + g * h * sp.diff(h, x), 1, pts1)
    js = _jets({"h": h, "hu": q}, 1, pts1)
    r = Y.swe_swapped().residuals(js)["hu"]
    np.testing.assert_allclose(r, ref, rtol=1e-12, atol=1e-12)
    assert js.diagnostics["desingularized"] == 0


def test_swe_swapped_dry_cells_are_finite():
    n = 5
    h = np.array([0.0, 1e-12, 1e-6, 1e-3, 1.0])
    js = Y.JetSet.from_arrays(h=(h, {"x": np.ones(n)}, {}),
                              hu=(np.ones(n), {"x": np.ones(n), "t": np.zeros(n)}, {}))
    r = Y.swe_swapped().residuals(js)["hu"]
    assert np.all(np.isfinite(r))
    assert js.diagnostics["desingularized"] == 2  # strictly below eps_h = 1e-6


def test_swe_swapped_on_tape_matches_arrays():
    h = np.array([1e-6, 0.5, 2.0])
    vals = dict(hx=np.array([0.1, -0.2, 0.3]), q=np.array([0.3, 0.1, -0.4]),
                qx=np.array([1.0, 2.0, -1.0]), qt=np.array([0.5, 0.0, 0.2]))
    arr = Y.JetSet.from_arrays(h=(h, {"x": vals["hx"]}, {}),
                               hu=(vals["q"], {"x": vals["qx"], "t": vals["qt"]}, {}))
    ref = Y.swe_swapped().residuals(arr)["hu"]

    def fn(h, hx, q, qx, qt):
        js = Y.JetSet.from_arrays(h=(h, {"x": hx}, {}), hu=(q, {"x": qx, "t": qt}, {}))
        return T.asum(Y.swe_swapped().residuals(js)["hu"])

    tape = T.record(fn, h=h, **vals)
    out = tape.values[tape.root]
    ref = ref.sum()
    np.testing.assert_allclose(out, ref, rtol=1e-14)


def test_fn_manufactured(pts2):
    u = sp.sin(x) * sp.cos(y) * sp.exp(-t)
    v = x * y * t + sp.cos(x - y)
    c = Y.fn().constants
    ref = _oracle(sp.diff(v, t) - c["gamma_v"] * (sp.diff(v, x, 2) + sp.diff(v, y, 2))
                  - c["beta"] * (u - v), 2, pts2)
    r = Y.fn().residuals(_jets({"u": u, "v": v}, 2, pts2))["v"]
    np.testing.assert_allclose(r, ref, rtol=1e-12, atol=1e-10)


def test_rd_manufactured(pts2):
    u = sp.tanh(x - y) * sp.cos(t)
    v = sp.sin(x * y) + t
    ref = _oracle(sp.diff(u, t) - 0.1 * (sp.diff(u, x, 2) + sp.diff(u, y, 2))
                  + u * v ** 2 + u ** 3 - v ** 3 - u ** 2 * v - u, 2, pts2)
    r = Y.rd().residuals(_jets({"u": u, "v": v}, 2, pts2))["u"]
    np.testing.assert_allclose(r, ref, rtol=1e-12, atol=1e-12)


def test_rd_equilibrium_residual_zero():
    # u = v = const makes every reaction term cancel except -u, so u = v = 0 only
    n = 4
    js = Y.JetSet.from_arrays(u=(np.zeros(n), {"t": np.zeros(n)}, {"x": np.zeros(n), "y": np.zeros(n)}),
                              v=np.zeros(n))
    assert np.all(Y.rd().residuals(js)["u"] == 0)


def test_wildfire_residual_threshold():
    c = Y.wildfire().constants
    u = np.array([0.0, 2.99, 3.0, 5.0])
    b = np.array([1.0, 1.0, 0.5, 0.2])
    bt = np.array([0.1, 0.0, -0.3, 0.0])
    js = Y.JetSet.from_arrays(u=u, beta=(b, {"t": bt}, {}))
    r = Y.wildfire().residuals(js)["beta"]
    burn = np.where(u >= c["u_pc"], c["eps"] / c["q"] * b * np.exp(u / (1 + c["eps"] * u)), 0.0)
    np.testing.assert_allclose(r, bt + burn, rtol=1e-15)
    assert r[1] == 0.0


def test_missing_direction_is_reported():
    js = Y.JetSet.from_arrays(h=(np.ones(2), {"x": np.ones(2)}, {}), hu=np.ones(2))
    with pytest.raises(Y.MissingDirectionError):
        Y.swe().residuals(js)


def test_roles_and_dirs():
    s = Y.get_system("swe")
    assert s.data_vars == ("hu",) and s.eq_vars == ("h",)
    assert Y.get_system("swe_swapped").data_vars == ("h",)
    assert Y.fn().dirs == ((0, 1, 2), (0, 1))
    assert Y.wildfire().dirs == ((2,), ())
    with pytest.raises(ValueError):
        Y.get_system("heat")


def test_overlapping_roles_rejected():
    with pytest.raises(ValueError):
        Y.SystemSpec("bad", 1, ("a", "b"), ("a",), ("a", "b"), {}, (0, 1), ((0, 1),), (), (), None)


# loss assembly ------------------------------------------------------------------------------


def _swe_js(h, ht, q, qx):
    return Y.JetSet.from_arrays(h=(h, {"t": ht}, {}), hu=(q, {"x": qx}, {}))


def test_assemble_loss_by_hand():
    h = np.array([1.0, 2.0, 3.0, 0.5])
    ht = np.array([0.1, 0.2, -0.1, 0.0])
    q = np.array([0.5, -0.5, 1.0, 2.0])
    qx = np.array([0.0, 0.3, 0.1, 0.0])
    main = np.array([1, 1, 1, 0], bool)
    ic = np.array([0, 0, 0, 1], bool)
    rows = Y.LossRows(main, ic, {"hu": np.array([0.0, 0.0, 1.0, 9.0])}, {"h": np.array([0, 0, 0, 1.0])},
                      {"h": 2.0})
    w = Y.LossWeights(data=3.0, phys=0.5, ic=4.0, l0=0.1)
    la = np.array([0.0, 1.0, -1.0])
    total, terms = Y.assemble_loss(_swe_js(h, ht, q, qx), rows, Y.swe(), w, "gated", la, GateConfig())
    data = (0.25 + 0.25 + 0.0) / 3
    res = 2.0 * (ht + qx)
    phys = float(np.sum(res[:3] ** 2)) / 3
    icv = (0.5 - 1.0) ** 2
    pen = float(l0_penalty(la, GateConfig()))
    assert terms["data:hu"] == pytest.approx(data, rel=1e-15)
    assert terms["phys:h"] == pytest.approx(phys, rel=1e-15)
    assert terms["ic:h"] == pytest.approx(icv, rel=1e-15)
    assert terms["l0"] == pytest.approx(pen, rel=1e-15)
    assert total == pytest.approx(3 * data + 0.5 * phys + 4 * icv + 0.1 * pen, rel=1e-14)


def test_assemble_loss_per_variable_weights_and_mode():
    n = 3
    js = _swe_js(np.ones(n), np.ones(n), np.ones(n), np.ones(n))
    rows = Y.LossRows(np.ones(n, bool), np.zeros(n, bool), {"hu": np.zeros(n)}, {})
    w = Y.LossWeights(data={"hu": 2.0}, phys={"h": 0.0}, ic=0.0, l0=5.0)
    total, terms = Y.assemble_loss(js, rows, Y.swe(), w, "none", np.zeros(4))
    assert total == pytest.approx(2.0) and terms["l0"] == 0.0 and terms["phys:h"] == 0.0


def test_assemble_loss_ic_required():
    n = 2
    js = _swe_js(np.ones(n), np.ones(n), np.ones(n), np.ones(n))
    rows = Y.LossRows(np.ones(n, bool), np.zeros(n, bool), {"hu": np.zeros(n)}, {})
    with pytest.raises(ValueError, match="initial-condition"):
        Y.assemble_loss(js, rows, Y.swe(), Y.LossWeights(ic=1.0))


def test_negative_weights_rejected():
    with pytest.raises(ValueError):
        Y.LossWeights(data={"hu": -1.0})
    with pytest.raises(ValueError):
        Y.LossWeights(l0=-1e-3)
