"""Ground-truth solvers and the on-disk field container.

* ``solve_swe_rusanov``: 1D shallow water dam break, finite volume with the
  local Lax-Friedrichs (Rusanov) flux.
* ``solve_fn_fd`` / ``solve_rd_fd``: 2D reaction-diffusion pairs, forward
  Euler with the periodic 5-point Laplacian.
* ``solve_wildfire_fd``: temperature/fuel model with upwind advection,
  Dirichlet walls and sub-stepped forward Euler.

Every time-stepping loop has a numba kernel and a numpy fallback
(see :mod:`music._accel`); both give the same fields to round-off.
"""

import configparser
import math
import os
from dataclasses import dataclass, field

import numpy as np

from . import _accel

__all__ = [
    "GRAVITY",
    "SolverError",
    "GridSpec",
    "FieldSeries",
    "WindField",
    "make_wind",
    "swe_grid",
    "fn_grid",
    "rd_grid",
    "wildfire_grid",
    "dam_break_ic",
    "solve_swe_rusanov",
    "solve_fn_fd",
    "solve_rd_fd",
    "spiral_ic",
    "solve_wildfire_fd",
    "gaussian_fire_ic",
    "FN_DEFAULTS",
    "WILDFIRE_DEFAULTS",
    "write_series",
    "read_series",
]

GRAVITY = 9.81
SWE_EPS = 1e-6
FN_DEFAULTS = {"gamma_u": 1.0, "gamma_v": 100.0, "alpha": 0.01, "beta": 0.25}
WILDFIRE_DEFAULTS = {"kappa": 0.2, "eps": 0.3, "alpha": 0.01, "q": 1.0, "u_pc": 3.0}
BLOWUP = 1e3


class SolverError(RuntimeError):
    """Raised when a solver aborts (instability, blow-up, invalid state)."""

    def __init__(self, msg, step=None):
        super().__init__(msg if step is None else f"{msg} at step {step}")
        self.step = step


@dataclass
class GridSpec:
    """Space-time grid of a solver run.

    ``layout`` fixes where samples sit: ``cell`` (cell centres), ``periodic``
    (``lo + i*dx``, ``i < n``) or ``node`` (``lo + i*dx`` including both ends).
    Frames are saved every ``save_every`` solver steps starting at ``t0``.
    """

    extents: tuple
    cells: tuple
    dt: float
    save_every: int
    nt: int
    layout: str = "cell"
    t0: float = 0.0

    def __post_init__(self):
        self.extents = tuple((float(a), float(b)) for a, b in self.extents)
        self.cells = tuple(int(n) for n in self.cells)
        if len(self.extents) != len(self.cells) or len(self.cells) not in (1, 2):
            raise ValueError("extents and cells must both describe 1 or 2 axes")
        if any(b <= a for a, b in self.extents) or any(n < 2 for n in self.cells):
            raise ValueError("empty grid axis")
        if self.layout not in ("cell", "periodic", "node"):
            raise ValueError(f"unknown layout {self.layout!r}")
        if not self.dt > 0 or self.save_every < 1 or self.nt < 1:
            raise ValueError("dt, save_every and nt must be positive")

    @property
    def dim(self):
        return len(self.cells)

    def spacing(self, axis=0):
        (a, b), n = self.extents[axis], self.cells[axis]
        return (b - a) / (n - 1) if self.layout == "node" else (b - a) / n

    def coords(self, axis=0):
        (a, _), n = self.extents[axis], self.cells[axis]
        h = self.spacing(axis)
        if self.layout == "cell":
            return a + (np.arange(n) + 0.5) * h
        return a + np.arange(n) * h

    @property
    def dt_save(self):
        return self.dt * self.save_every

    @property
    def times(self):
        return self.t0 + np.arange(self.nt) * self.dt_save

    @property
    def shape(self):
        """Array shape ``(nt, [ny,] nx)`` of a saved field."""
        return (self.nt,) + tuple(reversed(self.cells))

    def check_stability(self, bound, what="scheme"):
        if self.dt > bound:
            raise ValueError(f"dt = {self.dt} exceeds the {what} stability bound {bound:.6g}")

    def to_dict(self):
        return {
            "extents": ";".join(f"{a!r},{b!r}" for a, b in self.extents),
            "cells": ",".join(str(n) for n in self.cells),
            "dt": repr(self.dt),
            "save_every": str(self.save_every),
            "nt": str(self.nt),
            "layout": self.layout,
            "t0": repr(self.t0),
        }

    @classmethod
    def from_dict(cls, d):
        ext = [tuple(float(v) for v in part.split(",")) for part in d["extents"].split(";")]
        return cls(ext, [int(n) for n in d["cells"].split(",")], float(d["dt"]),
                   int(d["save_every"]), int(d["nt"]), d.get("layout", "cell"),
                   float(d.get("t0", 0.0)))


@dataclass
class FieldSeries:
    """One solution variable on a regular space-time grid, ``[t][y][x]``."""

    name: str
    grid: GridSpec
    values: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.values = np.ascontiguousarray(self.values, dtype=np.float64)
        if self.values.shape != self.grid.shape:
            raise ValueError(f"{self.name}: values shaped {self.values.shape}, grid wants {self.grid.shape}")
        if not np.all(np.isfinite(self.values)):
            raise ValueError(f"{self.name}: non-finite values")

    @property
    def times(self):
        return self.grid.times


# containers ----------------------------------------------------------------


def write_series(out_dir, series, meta=None):
    """Write ``manifest.txt`` plus one little-endian float64 ``<name>.bin`` per field."""
    os.makedirs(out_dir, exist_ok=True)
    grid = series[0].grid
    for s in series[1:]:
        if s.grid != grid:
            raise ValueError("all fields in a container must share one grid")
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    cp["grid"] = grid.to_dict()
    cp["fields"] = {"names": ",".join(s.name for s in series)}
    info = {}
    for s in series:
        info.update({k: str(v) for k, v in s.meta.items()})
    info.update({k: str(v) for k, v in (meta or {}).items()})
    cp["meta"] = dict(sorted(info.items()))
    paths = []
    for s in series:
        p = os.path.join(out_dir, f"{s.name}.bin")
        with open(p, "wb") as fh:
            fh.write(s.values.astype("<f8").tobytes())
        paths.append(p)
    mp = os.path.join(out_dir, "manifest.txt")
    with open(mp, "w") as fh:
        cp.write(fh)
    return [mp] + paths


def read_series(in_dir):
    """Inverse of :func:`write_series`; returns ``(list of FieldSeries, meta dict)``."""
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    mp = os.path.join(in_dir, "manifest.txt")
    if not cp.read(mp):
        raise FileNotFoundError(mp)
    grid = GridSpec.from_dict(dict(cp["grid"]))
    meta = dict(cp["meta"]) if cp.has_section("meta") else {}
    out = []
    for name in cp["fields"]["names"].split(","):
        raw = np.fromfile(os.path.join(in_dir, f"{name}.bin"), dtype="<f8")
        if raw.size != int(np.prod(grid.shape)):
            raise ValueError(f"{name}.bin holds {raw.size} values, grid needs {np.prod(grid.shape)}")
        out.append(FieldSeries(name, grid, raw.astype(np.float64).reshape(grid.shape)))
    return out, meta


# shallow water ---------------------------------------------------------------


def swe_grid(nx=200, nt=1000, dt=0.001, length=10.0):
    return GridSpec([(0.0, length)], [nx], dt, 1, nt, "cell")


def dam_break_ic(grid, h_left=1.0, x_dam=5.0):
    x = grid.coords(0)
    h = np.where(x <= x_dam, h_left, 0.0)
    return h, np.zeros_like(h)


@_accel.njit
def _swe_advance_nb(h, hu, n_steps, dt, dx, g, eps, reflective):
    n = h.shape[0]
    fh = np.empty(n + 1)
    fq = np.empty(n + 1)
    for step in range(n_steps):
        amax = 0.0
        for i in range(n + 1):
            if i == 0:
                hr, qr = h[0], hu[0]
                hl = hr
                ql = -qr if reflective else qr
            elif i == n:
                hl, ql = h[n - 1], hu[n - 1]
                hr = hl
                qr = -ql if reflective else ql
            else:
                hl, ql, hr, qr = h[i - 1], hu[i - 1], h[i], hu[i]
            ml = max(hl, eps)
            mr = max(hr, eps)
            ul = 2.0 * hl * ql / (hl * hl + ml * ml)
            ur = 2.0 * hr * qr / (hr * hr + mr * mr)
            a = max(abs(ul) + math.sqrt(g * hl), abs(ur) + math.sqrt(g * hr))
            if a > amax:
                amax = a
            fh[i] = 0.5 * (ql + qr) - 0.5 * a * (hr - hl)
            fl = ql * ul + 0.5 * g * hl * hl
            fr = qr * ur + 0.5 * g * hr * hr
            fq[i] = 0.5 * (fl + fr) - 0.5 * a * (qr - ql)
        if amax * dt / dx > 1.0:
            return step, 1
        r = dt / dx
        for i in range(n):
            h[i] = h[i] - r * (fh[i + 1] - fh[i])
            hu[i] = hu[i] - r * (fq[i + 1] - fq[i])
            if h[i] < 0.0:
                return step, 2
    return -1, 0


def _swe_advance_np(h, hu, n_steps, dt, dx, g, eps, reflective):
    sgn = -1.0 if reflective else 1.0
    for step in range(n_steps):
        he = np.concatenate(([h[0]], h, [h[-1]]))
        qe = np.concatenate(([sgn * hu[0]], hu, [sgn * hu[-1]]))
        hl, hr, ql, qr = he[:-1], he[1:], qe[:-1], qe[1:]
        ml, mr = np.maximum(hl, eps), np.maximum(hr, eps)
        ul = 2.0 * hl * ql / (hl * hl + ml * ml)
        ur = 2.0 * hr * qr / (hr * hr + mr * mr)
        a = np.maximum(np.abs(ul) + np.sqrt(g * hl), np.abs(ur) + np.sqrt(g * hr))
        if a.max() * dt / dx > 1.0:
            return step, 1
        fh = 0.5 * (ql + qr) - 0.5 * a * (hr - hl)
        fq = 0.5 * ((ql * ul + 0.5 * g * hl * hl) + (qr * ur + 0.5 * g * hr * hr)) - 0.5 * a * (qr - ql)
        r = dt / dx
        h -= r * (fh[1:] - fh[:-1])
        hu -= r * (fq[1:] - fq[:-1])
        if np.any(h < 0.0):
            return step, 2
    return -1, 0


def solve_swe_rusanov(grid=None, ic=None, g=GRAVITY, boundary="reflective", eps=SWE_EPS):
    """Dam-break shallow water run; returns ``(h, hu)`` FieldSeries.

    ``boundary='reflective'`` mirrors the state into the ghost cell with the
    discharge negated, so no mass crosses the walls; ``'transmissive'``
    copies it unchanged.
    """
    grid = grid or swe_grid()
    if grid.dim != 1:
        raise ValueError("shallow water solver is one-dimensional")
    if boundary not in ("reflective", "transmissive"):
        raise ValueError(f"unknown boundary {boundary!r}")
    h0, hu0 = dam_break_ic(grid) if ic is None else ic
    h = np.array(h0, dtype=float)
    hu = np.array(hu0, dtype=float)
    dx = grid.spacing(0)
    advance = _accel.pick(_swe_advance_nb, _swe_advance_np)
    H = np.empty(grid.shape)
    Q = np.empty(grid.shape)
    H[0], Q[0] = h, hu
    for k in range(1, grid.nt):
        bad, code = advance(h, hu, grid.save_every, grid.dt, dx, g, eps, boundary == "reflective")
        if bad >= 0:
            step = (k - 1) * grid.save_every + bad
            raise SolverError("CFL condition violated" if code == 1 else "negative depth", step)
        H[k], Q[k] = h, hu
    meta = {"system": "swe", "g": g, "boundary": boundary}
    return FieldSeries("h", grid, H, meta), FieldSeries("hu", grid, Q, meta)


# periodic reaction-diffusion pairs -----------------------------------------------


@_accel.njit
def _rd_advance_nb(u, v, n_steps, dt, dx, du, dv, kind, p1, p2):
    ny, nx = u.shape
    un = np.empty_like(u)
    vn = np.empty_like(v)
    inv = 1.0 / (dx * dx)
    for step in range(n_steps):
        for j in range(ny):
            jm = j - 1 if j > 0 else ny - 1
            jp = j + 1 if j < ny - 1 else 0
            for i in range(nx):
                im = i - 1 if i > 0 else nx - 1
                ip = i + 1 if i < nx - 1 else 0
                a = u[j, i]
                b = v[j, i]
                lu = (u[j, im] + u[j, ip] + u[jm, i] + u[jp, i] - 4.0 * a) * inv
                lv = (v[j, im] + v[j, ip] + v[jm, i] + v[jp, i] - 4.0 * b) * inv
                if kind == 0:
                    fu = a - a * a * a - b + p1
                    fv = p2 * (a - b)
                else:
                    r2 = a * a + b * b
                    fu = (1.0 - r2) * a + r2 * b
                    fv = -r2 * a + (1.0 - r2) * b
                un[j, i] = a + dt * (du * lu + fu)
                vn[j, i] = b + dt * (dv * lv + fv)
        blown = False
        for j in range(ny):
            for i in range(nx):
                u[j, i] = un[j, i]
                v[j, i] = vn[j, i]
                if not (abs(un[j, i]) <= 1e3 and abs(vn[j, i]) <= 1e3):
                    blown = True
        if blown:
            return step
    return -1


def _lap_periodic(a, dx):
    return (np.roll(a, 1, 1) + np.roll(a, -1, 1) + np.roll(a, 1, 0) + np.roll(a, -1, 0) - 4.0 * a) / (dx * dx)


def _rd_advance_np(u, v, n_steps, dt, dx, du, dv, kind, p1, p2):
    for step in range(n_steps):
        lu, lv = _lap_periodic(u, dx), _lap_periodic(v, dx)
        if kind == 0:
            fu = u - u * u * u - v + p1
            fv = p2 * (u - v)
        else:
            r2 = u * u + v * v
            fu = (1.0 - r2) * u + r2 * v
            fv = -r2 * u + (1.0 - r2) * v
        un = u + dt * (du * lu + fu)
        vn = v + dt * (dv * lv + fv)
        u[...] = un
        v[...] = vn
        if not (np.all(np.abs(un) <= BLOWUP) and np.all(np.abs(vn) <= BLOWUP)):
            return step
    return -1


def _run_pair(grid, u0, v0, du, dv, kind, p1, p2, names, meta):
    u = np.ascontiguousarray(u0, dtype=float).copy()
    v = np.ascontiguousarray(v0, dtype=float).copy()
    expect = tuple(reversed(grid.cells))
    if u.shape != expect or v.shape != expect:
        raise ValueError(f"initial condition must be shaped {expect}")
    dx = grid.spacing(0)
    if abs(grid.spacing(1) - dx) > 1e-12 * dx:
        raise ValueError("solver needs dx == dy")
    advance = _accel.pick(_rd_advance_nb, _rd_advance_np)
    U = np.empty(grid.shape)
    V = np.empty(grid.shape)
    U[0], V[0] = u, v
    for k in range(1, grid.nt):
        bad = advance(u, v, grid.save_every, grid.dt, dx, du, dv, kind, p1, p2)
        if bad >= 0:
            raise SolverError("solution blew up (|value| > 1e3)", (k - 1) * grid.save_every + bad)
        U[k], V[k] = u, v
    return FieldSeries(names[0], grid, U, meta), FieldSeries(names[1], grid, V, meta)


def fn_grid(n=200, length=100.0, dt=0.0005, t_end=60.0, save_dt=1.0):
    every = int(round(save_dt / dt))
    return GridSpec([(0.0, length)] * 2, [n, n], dt, every, int(round(t_end / save_dt)) + 1, "periodic")


def solve_fn_fd(grid=None, constants=None, seed=0, ic=None):
    """FitzHugh-Nagumo reaction-diffusion with Gaussian random initial data.

    ``u_t = gamma_u Lap u + u - u^3 - v + alpha``,
    ``v_t = gamma_v Lap v + beta (u - v)``.
    """
    grid = grid or fn_grid()
    c = dict(FN_DEFAULTS)
    c.update(constants or {})
    dx = grid.spacing(0)
    dmax = max(c["gamma_u"], c["gamma_v"])
    if dmax > 0:
        grid.check_stability(dx * dx / (4.0 * dmax), "diffusion")
    if ic is None:
        rng = np.random.default_rng(seed)
        shape = tuple(reversed(grid.cells))
        std = math.sqrt(0.2)
        ic = (rng.normal(0.0, std, shape), rng.normal(0.0, std, shape))
    meta = {"system": "fn", "seed": seed, **c}
    return _run_pair(grid, ic[0], ic[1], c["gamma_u"], c["gamma_v"], 0, c["alpha"], c["beta"],
                     ("u", "v"), meta)


def rd_grid(n=128, half=10.0, dt=0.005, t_end=10.0, nt=101):
    every = int(round(t_end / (nt - 1) / dt))
    return GridSpec([(-half, half)] * 2, [n, n], dt, every, nt, "periodic")


def spiral_ic(grid):
    x, y = grid.coords(0), grid.coords(1)
    X, Y = np.meshgrid(x, y)
    rho = np.sqrt(X * X + Y * Y)
    th = np.arctan2(Y, X)
    return np.tanh(rho) * np.cos(th - rho), np.tanh(rho) * np.sin(th - rho)


def solve_rd_fd(grid=None, ic=None, diffusion=0.1):
    """lambda-omega reaction-diffusion (spiral waves) with periodic walls.

    With ``A^2 = u^2 + v^2``: ``u_t = d Lap u + (1 - A^2) u + A^2 v``,
    ``v_t = d Lap v - A^2 u + (1 - A^2) v``.
    """
    grid = grid or rd_grid()
    dx = grid.spacing(0)
    grid.check_stability(dx * dx / (4.0 * diffusion), "diffusion")
    if ic is None:
        ic = spiral_ic(grid)
    meta = {"system": "rd", "diffusion": diffusion}
    return _run_pair(grid, ic[0], ic[1], diffusion, diffusion, 1, 0.0, 0.0, ("u", "v"), meta)


# wildfire ------------------------------------------------------------------------------


@dataclass
class WindField:
    """Frozen wind components per cell, arrays shaped ``(ny, nx)``."""

    kind: str
    vx: np.ndarray
    vy: np.ndarray

    @property
    def max_speed(self):
        return float(max(np.abs(self.vx).max(), np.abs(self.vy).max()))


def make_wind(kind, grid, seed=0, vector=(0.3, 0.3), std=0.5):
    """``fixed``: a constant vector; ``stochastic``: per-cell squared normals."""
    shape = tuple(reversed(grid.cells))
    if kind == "fixed":
        return WindField(kind, np.full(shape, float(vector[0])), np.full(shape, float(vector[1])))
    if kind == "stochastic":
        rng = np.random.default_rng(seed)
        v1 = rng.normal(0.0, std, shape)
        v2 = rng.normal(0.0, std, shape)
        return WindField(kind, v1 * v1, v2 * v2)
    raise ValueError(f"unknown wind kind {kind!r}")


def wildfire_grid(n=51, length=10.0, save_dt=0.1, t_end=10.0):
    nt = int(round(t_end / save_dt)) + 1
    # dt is the save interval here; the solver sub-steps internally
    return GridSpec([(0.0, length)] * 2, [n, n], save_dt, 1, nt, "node")


def gaussian_fire_ic(grid, amp=10.0, center=(2.0, 2.0), width=1.0, fuel=1.0):
    x, y = grid.coords(0), grid.coords(1)
    X, Y = np.meshgrid(x, y)
    u = amp * np.exp(-((X - center[0]) ** 2 + (Y - center[1]) ** 2) / width ** 2)
    b = np.full_like(u, fuel)
    for a in (u, b):
        a[0, :] = a[-1, :] = a[:, 0] = a[:, -1] = 0.0
    return u, b


@_accel.njit
def _fire_advance_nb(u, b, vx, vy, n_sub, dt, dx, kappa, eps, alpha, q, upc):
    ny, nx = u.shape
    un = np.zeros_like(u)
    bn = np.zeros_like(b)
    inv2 = 1.0 / (dx * dx)
    for s in range(n_sub):
        for j in range(1, ny - 1):
            for i in range(1, nx - 1):
                a = u[j, i]
                lap = (u[j, i - 1] + u[j, i + 1] + u[j - 1, i] + u[j + 1, i] - 4.0 * a) * inv2
                wx = vx[j, i]
                wy = vy[j, i]
                gx = (a - u[j, i - 1]) / dx if wx >= 0.0 else (u[j, i + 1] - a) / dx
                gy = (a - u[j - 1, i]) / dx if wy >= 0.0 else (u[j + 1, i] - a) / dx
                r = 0.0
                if a >= upc:
                    r = b[j, i] * math.exp(a / (1.0 + eps * a))
                un[j, i] = a + dt * (kappa * lap - wx * gx - wy * gy + r - alpha * a)
                bn[j, i] = b[j, i] - dt * (eps / q) * r
        for j in range(ny):
            for i in range(nx):
                u[j, i] = un[j, i]
                b[j, i] = bn[j, i]
    return -1


def _fire_advance_np(u, b, vx, vy, n_sub, dt, dx, kappa, eps, alpha, q, upc):
    for _ in range(n_sub):
        c = u[1:-1, 1:-1]
        lap = (u[1:-1, :-2] + u[1:-1, 2:] + u[:-2, 1:-1] + u[2:, 1:-1] - 4.0 * c) / (dx * dx)
        wx, wy = vx[1:-1, 1:-1], vy[1:-1, 1:-1]
        gx = np.where(wx >= 0.0, (c - u[1:-1, :-2]) / dx, (u[1:-1, 2:] - c) / dx)
        gy = np.where(wy >= 0.0, (c - u[:-2, 1:-1]) / dx, (u[2:, 1:-1] - c) / dx)
        r = np.where(c >= upc, b[1:-1, 1:-1] * np.exp(c / (1.0 + eps * c)), 0.0)
        un = np.zeros_like(u)
        bn = np.zeros_like(b)
        un[1:-1, 1:-1] = c + dt * (kappa * lap - wx * gx - wy * gy + r - alpha * c)
        bn[1:-1, 1:-1] = b[1:-1, 1:-1] - dt * (eps / q) * r
        u[...] = un
        b[...] = bn
    return -1


def solve_wildfire_fd(grid=None, constants=None, wind=None, ic=None, discard_until=2.0,
                      safety=0.9):
    """Fire temperature ``u`` and fuel ``beta`` with zero Dirichlet walls.

    ``u_t = kappa Lap u - w . grad u + H(u) beta exp(u/(1+eps u)) - alpha u``,
    ``beta_t = -H(u) (eps/q) beta exp(u/(1+eps u))`` with ``H(u) = [u >= u_pc]``.
    Frames with ``t <= discard_until`` are dropped from the returned series.
    """
    grid = grid or wildfire_grid()
    c = dict(WILDFIRE_DEFAULTS)
    c.update(constants or {})
    wind = wind or make_wind("fixed", grid)
    dx = grid.spacing(0)
    if abs(grid.spacing(1) - dx) > 1e-12 * dx:
        raise ValueError("solver needs dx == dy")
    bound = dx * dx / (4.0 * c["kappa"])
    if wind.max_speed > 0:
        bound = min(bound, dx / wind.max_speed)
    # u/(1+eps u) < 1/eps bounds the reaction rate, so this keeps beta >= 0
    bound = min(bound, c["q"] / (c["eps"] * math.exp(1.0 / c["eps"])))
    n_sub = max(1, int(math.ceil(grid.dt / (safety * bound))))
    dt = grid.dt / n_sub
    if ic is None:
        ic = gaussian_fire_ic(grid)
    u = np.ascontiguousarray(ic[0], dtype=float).copy()
    b = np.ascontiguousarray(ic[1], dtype=float).copy()
    b_max = float(b.max())
    vx = np.ascontiguousarray(wind.vx, dtype=float)
    vy = np.ascontiguousarray(wind.vy, dtype=float)
    advance = _accel.pick(_fire_advance_nb, _fire_advance_np)
    U = np.empty(grid.shape)
    B = np.empty(grid.shape)
    U[0], B[0] = u, b
    for k in range(1, grid.nt):
        for _ in range(grid.save_every):
            advance(u, b, vx, vy, n_sub, dt, dx, c["kappa"], c["eps"], c["alpha"], c["q"], c["u_pc"])
        if not np.all(np.isfinite(u)) or np.abs(u).max() > BLOWUP:
            raise SolverError("temperature blew up", k * grid.save_every * n_sub)
        if b.min() < 0.0 or b.max() > b_max + 1e-12:
            raise SolverError("fuel left [0, initial max]", k * grid.save_every * n_sub)
        U[k], B[k] = u, b
    keep = grid.times > discard_until + 1e-9 * grid.dt_save
    first = int(np.argmax(keep)) if keep.any() else grid.nt
    out_grid = GridSpec(grid.extents, grid.cells, grid.dt, grid.save_every, grid.nt - first,
                        grid.layout, float(grid.times[first]) if first < grid.nt else grid.t0)
    meta = {"system": "wildfire", "wind": wind.kind, "substeps": n_sub, **c}
    return (FieldSeries("u", out_grid, U[first:], meta), FieldSeries("beta", out_grid, B[first:], meta))
