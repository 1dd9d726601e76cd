"""The four coupled systems: variable roles, residuals and loss assembly.

Residuals are written once against a :class:`JetSet`, which hands out
values and derivatives of each variable in physical units. The same code runs
on plain numpy arrays (checks, evaluation) and on tape nodes (training).
"""

from dataclasses import dataclass, field

import numpy as np

from .autodiff import tape as T
from .network import GateConfig, l0_penalty
from .solvers import GRAVITY, FN_DEFAULTS, SWE_EPS, WILDFIRE_DEFAULTS

__all__ = [
    "SystemSpec",
    "MissingDirectionError",
    "JetSet",
    "ChannelVar",
    "ArrayVar",
    "LossWeights",
    "LossRows",
    "swe",
    "swe_swapped",
    "fn",
    "rd",
    "wildfire",
    "get_system",
    "SYSTEMS",
    "residual_swe",
    "residual_swe_swapped",
    "residual_fn",
    "residual_rd",
    "residual_wildfire",
    "assemble_loss",
]


class MissingDirectionError(KeyError):
    """A residual asked for a derivative the jets were not computed for."""


@dataclass(frozen=True)
class SystemSpec:
    """Constants, variable roles and residual of one coupled system.

    ``coords`` names the network inputs in order (space first, then ``t``);
    ``variables`` names the outputs. ``first``/``second`` list the
    ``(variable, coordinate)`` derivatives the residual consumes.
    """

    id: str
    dim: int
    variables: tuple
    data_vars: tuple
    eq_vars: tuple
    constants: dict
    t_interval: tuple
    box: tuple
    first: tuple
    second: tuple
    residual: object = field(repr=False, compare=False)

    def __post_init__(self):
        d, e = set(self.data_vars), set(self.eq_vars)
        if d & e:
            raise ValueError(f"data and equation variables overlap: {sorted(d & e)}")
        if d | e != set(self.variables):
            raise ValueError("data and equation variables must cover all variables")

    @property
    def coords(self):
        return ("x", "t") if self.dim == 1 else ("x", "y", "t")

    def coord_index(self, name):
        return self.coords.index(name)

    def var_index(self, name):
        return self.variables.index(name)

    @property
    def dirs(self):
        """Input coordinates needing first / second derivative channels."""
        first = sorted({self.coord_index(c) for _, c in self.first + self.second})
        second = sorted({self.coord_index(c) for _, c in self.second})
        return tuple(first), tuple(second)

    def residuals(self, js):
        """Residual per equation variable, in physical units."""
        return self.residual(js, self)


# jet access ----------------------------------------------------------------------


class ChannelVar:
    """One network output viewed through physical-unit channels."""

    def __init__(self, channels, j, coords):
        self.ch, self.j, self.coords = channels, j, coords

    def value(self):
        return self.ch.value(self.j)

    def nvalue(self):
        return self.ch.ch.value(self.j)

    def d1(self, c):
        try:
            return self.ch.d1(self.j, self.coords.index(c))
        except KeyError as exc:
            raise MissingDirectionError(str(exc)) from None

    def d2(self, c):
        try:
            return self.ch.d2(self.j, self.coords.index(c))
        except KeyError as exc:
            raise MissingDirectionError(str(exc)) from None


class ArrayVar:
    """A variable given by explicit arrays (or scalars)."""

    def __init__(self, value, d1=None, d2=None, nvalue=None):
        self._v, self._d1, self._d2 = value, dict(d1 or {}), dict(d2 or {})
        self._nv = nvalue

    def value(self):
        return self._v

    def nvalue(self):
        return self._v if self._nv is None else self._nv

    def d1(self, c):
        if c not in self._d1:
            raise MissingDirectionError(f"no first derivative along {c!r}")
        return self._d1[c]

    def d2(self, c):
        if c not in self._d2:
            raise MissingDirectionError(f"no second derivative along {c!r}")
        return self._d2[c]


class JetSet:
    """Named access to values and derivatives of every system variable."""

    def __init__(self, vars):
        self.vars = dict(vars)
        self.diagnostics = {}

    @classmethod
    def from_channels(cls, spec, channels, overrides=None):
        vs = {name: ChannelVar(channels, j, spec.coords) for j, name in enumerate(spec.variables)}
        vs.update(overrides or {})
        return cls(vs)

    @classmethod
    def from_arrays(cls, **vars):
        """``name=(value, {coord: d1}, {coord: d2})`` or just ``name=value``."""
        out = {}
        for k, v in vars.items():
            out[k] = ArrayVar(*v) if isinstance(v, tuple) else ArrayVar(v)
        return cls(out)

    def __getitem__(self, name):
        return self.vars[name]

    def value(self, name):
        return self.vars[name].value()

    def nvalue(self, name):
        return self.vars[name].nvalue()

    def d1(self, name, c):
        return self.vars[name].d1(c)

    def d2(self, name, c):
        return self.vars[name].d2(c)

    def laplacian(self, name, dim):
        lap = self.d2(name, "x")
        if dim == 2:
            lap = lap + self.d2(name, "y")
        return lap


# residuals ------------------------------------------------------------------------


def residual_swe(js, g=GRAVITY):
    """Mass equation ``h_t + (hu)_x``."""
    return js.d1("h", "t") + js.d1("hu", "x")


def residual_swe_swapped(js, g=GRAVITY, eps=SWE_EPS):
    """Momentum equation ``(hu)_t + (h u^2)_x + g/2 (h^2)_x`` with desingularized ``u``.

    ``u = hu * w(h)`` with ``w = 2h / (h^2 + max(h, eps)^2)``, which equals
    ``1/h`` for ``h >= eps``; the flux derivative is expanded by the product
    rule from first-derivative channels only.
    """
    h, q = js.value("h"), js.value("hu")
    hx, qx = js.d1("h", "x"), js.d1("hu", "x")
    m = T.maximum(h, eps)
    on = T.step(h, eps)
    den = h * h + m * m
    w = 2.0 * h / den
    dw = (2.0 * den - 2.0 * h * (2.0 * h + 2.0 * m * on)) / (den * den)
    # (h q^2 w^2)_x
    flux_x = hx * q * q * w * w + 2.0 * h * q * qx * w * w + 2.0 * h * q * q * w * dw * hx
    dry = np.asarray(h.value if isinstance(h, T.Var) else h) < eps
    js.diagnostics["desingularized"] = int(np.count_nonzero(dry))
    return js.d1("hu", "t") + flux_x + g * h * hx


def residual_fn(js, gamma_v=FN_DEFAULTS["gamma_v"], beta=FN_DEFAULTS["beta"]):
    """``v_t - gamma_v Lap v - beta (u - v)``."""
    u, v = js.value("u"), js.value("v")
    return js.d1("v", "t") - gamma_v * js.laplacian("v", 2) - beta * (u - v)


def residual_rd(js, diffusion=0.1):
    """``u_t - 0.1 Lap u + u v^2 + u^3 - v^3 - u^2 v - u``."""
    u, v = js.value("u"), js.value("v")
    return (js.d1("u", "t") - diffusion * js.laplacian("u", 2)
            + u * v * v + u * u * u - v * v * v - u * u * v - u)


def residual_wildfire(js, eps=WILDFIRE_DEFAULTS["eps"], q=WILDFIRE_DEFAULTS["q"],
                      u_pc=WILDFIRE_DEFAULTS["u_pc"]):
    """``beta_t - g(u, beta)`` with ``g = -[u >= u_pc] (eps/q) beta exp(u/(1+eps u))``."""
    u, b = js.value("u"), js.value("beta")
    burn = T.step(u, u_pc) * (eps / q) * b * T.exp(u / (1.0 + eps * u))
    return js.d1("beta", "t") + burn


def _res_swe(js, spec):
    return {"h": residual_swe(js, spec.constants["g"])}


def _res_swe_swapped(js, spec):
    c = spec.constants
    return {"hu": residual_swe_swapped(js, c["g"], c["eps_h"])}


def _res_fn(js, spec):
    c = spec.constants
    return {"v": residual_fn(js, c["gamma_v"], c["beta"])}


def _res_rd(js, spec):
    return {"u": residual_rd(js, spec.constants["diffusion"])}


def _res_wildfire(js, spec):
    c = spec.constants
    return {"beta": residual_wildfire(js, c["eps"], c["q"], c["u_pc"])}


# factories ---------------------------------------------------------------------------


def swe(g=GRAVITY, eps_h=SWE_EPS, t_end=1.0, length=10.0):
    return SystemSpec("swe", 1, ("h", "hu"), ("hu",), ("h",), {"g": g, "z_b": 0.0, "eps_h": eps_h},
                      (0.0, t_end), ((0.0, length),), (("h", "t"), ("hu", "x")), (), _res_swe)


def swe_swapped(g=GRAVITY, eps_h=SWE_EPS, t_end=1.0, length=10.0):
    return SystemSpec("swe_swapped", 1, ("h", "hu"), ("h",), ("hu",),
                      {"g": g, "z_b": 0.0, "eps_h": eps_h}, (0.0, t_end), ((0.0, length),),
                      (("hu", "t"), ("hu", "x"), ("h", "x")), (), _res_swe_swapped)


def fn(constants=None):
    c = dict(FN_DEFAULTS)
    c.update(constants or {})
    return SystemSpec("fn", 2, ("u", "v"), ("u",), ("v",), c, (10.0, 60.0),
                      ((0.0, 100.0), (0.0, 100.0)), (("v", "t"),), (("v", "x"), ("v", "y")), _res_fn)


def rd(diffusion=0.1):
    return SystemSpec("rd", 2, ("u", "v"), ("v",), ("u",), {"diffusion": diffusion}, (0.0, 10.0),
                      ((-10.0, 10.0), (-10.0, 10.0)), (("u", "t"),), (("u", "x"), ("u", "y")), _res_rd)


def wildfire(constants=None):
    c = dict(WILDFIRE_DEFAULTS)
    c.update(constants or {})
    return SystemSpec("wildfire", 2, ("u", "beta"), ("u",), ("beta",), c, (2.0, 10.0),
                      ((0.0, 10.0), (0.0, 10.0)), (("beta", "t"),), (), _res_wildfire)


SYSTEMS = {"swe": swe, "swe_swapped": swe_swapped, "fn": fn, "rd": rd, "wildfire": wildfire}


def get_system(name, **kw):
    try:
        return SYSTEMS[name.lower()](**kw)
    except KeyError:
        raise ValueError(f"unknown system {name!r}; choose from {', '.join(SYSTEMS)}") from None


# loss ------------------------------------------------------------------------------------


@dataclass
class LossWeights:
    """Term weights; ``data``/``phys`` may be a float or a per-variable dict."""

    data: object = 1.0
    phys: object = 1.0
    ic: float = 1.0
    l0: float = 0.0

    def __post_init__(self):
        for name in ("data", "phys"):
            val = getattr(self, name)
            vals = val.values() if isinstance(val, dict) else [val]
            if any(v < 0 for v in vals):
                raise ValueError(f"negative {name} weight")
        if self.ic < 0 or self.l0 < 0:
            raise ValueError("loss weights must be nonnegative")

    def for_var(self, kind, var):
        val = getattr(self, kind)
        return float(val.get(var, 1.0)) if isinstance(val, dict) else float(val)


@dataclass
class LossRows:
    """Which evaluated rows feed which term.

    The network is evaluated once on the stacked ``[training points; IC
    points]``; ``main`` and ``ic`` are boolean row selectors. Targets are
    normalized and aligned with the rows (entries outside their selector are
    ignored). ``residual_scale`` multiplies each equation variable's residual.
    """

    main: np.ndarray
    ic: np.ndarray
    data_targets: dict
    ic_targets: dict
    residual_scale: dict = field(default_factory=dict)


def _mse(diff, sel, n):
    return T.asum(diff * diff * sel) / n if n else 0.0


def assemble_loss(js, rows, spec, w, mode="gated", log_alpha=None, gate_cfg=None):
    """Weighted sum of data-fit, residual, IC and L0 terms.

    Returns ``(total, breakdown)``; the breakdown holds unweighted term values
    keyed ``data:<var>``, ``phys:<var>``, ``ic:<var>`` and ``l0``.
    """
    main = np.asarray(rows.main, dtype=float)
    ic = np.asarray(rows.ic, dtype=float)
    n_main, n_ic = int(main.sum()), int(ic.sum())
    if w.ic > 0 and n_ic == 0:
        raise ValueError("batch has no initial-condition points but the IC weight is positive")
    terms, total = {}, 0.0
    for var in spec.data_vars:
        lam = w.for_var("data", var)
        diff = js.nvalue(var) - np.asarray(rows.data_targets[var], dtype=float)
        terms[f"data:{var}"] = _mse(diff, main, n_main)
        if lam:
            total = total + lam * terms[f"data:{var}"]
    need_phys = any(w.for_var("phys", v) for v in spec.eq_vars)
    res = spec.residuals(js) if need_phys else {}
    for var in spec.eq_vars:
        lam = w.for_var("phys", var)
        if var in res:
            r = res[var] * float(rows.residual_scale.get(var, 1.0))
            terms[f"phys:{var}"] = _mse(r, main, n_main)
            total = total + lam * terms[f"phys:{var}"]
        else:
            terms[f"phys:{var}"] = 0.0
    for var in spec.eq_vars:
        if n_ic:
            diff = js.nvalue(var) - np.asarray(rows.ic_targets[var], dtype=float)
            terms[f"ic:{var}"] = _mse(diff, ic, n_ic)
            if w.ic:
                total = total + w.ic * terms[f"ic:{var}"]
        else:
            terms[f"ic:{var}"] = 0.0
    pen = 0.0
    if mode == "gated" and log_alpha is not None:
        pen = l0_penalty(log_alpha, gate_cfg or GateConfig())
        total = total + w.l0 * pen
    terms["l0"] = pen
    return total, terms
