"""Datasets, mesh-free point sampling, noise and forecast windows."""

import hashlib
from dataclasses import dataclass, field, replace

import numpy as np

from .network import Normalizer
from .solvers import GridSpec
from .systems import get_system

__all__ = [
    "Dataset",
    "PointBatch",
    "SplitSpec",
    "RECIPES",
    "build_dataset",
    "sample_meshfree",
    "add_noise",
    "time_window_split",
    "fit_split",
]

# spatial sites per axis, and the [t_lo, t_hi) window of kept frames (None = all)
RECIPES = {
    "swe": {"sites": 200, "window": None},
    "swe_swapped": {"sites": 200, "window": None},
    "fn": {"sites": 100, "window": (10.0, 60.0), "nt": 50},
    "rd": {"sites": 128, "window": None, "nt": 101, "normalize_outputs": False},
    "wildfire": {"sites": 51, "window": None, "nt": 80},
}


@dataclass
class Dataset:
    """Physical fields on a regular grid plus the fitted normalization.

    ``fields[name]`` is shaped ``(nt, [ny,] nx)``; ``axes`` holds the
    coordinate vectors ``(x, [y,] t)`` in the network's input order.
    """

    system: str
    fields: dict
    axes: tuple
    normalizer: Normalizer

    @property
    def spec(self):
        return get_system(self.system)

    @property
    def times(self):
        return self.axes[-1]

    @property
    def spatial_shape(self):
        return tuple(len(a) for a in reversed(self.axes[:-1]))

    @property
    def n_sites(self):
        return int(np.prod(self.spatial_shape))

    def site_coords(self, sites):
        """Physical coordinates ``(len(sites), d)`` of flat spatial indices."""
        sites = np.asarray(sites)
        if len(self.axes) == 2:
            return self.axes[0][sites][:, None]
        ny, nx = self.spatial_shape
        j, i = np.divmod(sites, nx)
        return np.stack([self.axes[0][i], self.axes[1][j]], axis=1)

    def points(self, time_idx, sites):
        """Coordinates and targets of the Cartesian product ``time_idx x sites``."""
        time_idx = np.asarray(time_idx, dtype=int)
        sites = np.asarray(sites, dtype=int)
        ti = np.repeat(time_idx, len(sites))
        si = np.tile(sites, len(time_idx))
        xs = self.site_coords(si)
        coords = np.concatenate([xs, self.times[ti][:, None]], axis=1)
        return coords, ti, si

    def values_at(self, var, ti, si):
        return self.fields[var].reshape(len(self.times), -1)[ti, si]

    def full_grid(self, time_idx=None):
        """All grid points (optionally a subset of time levels), time-major."""
        time_idx = np.arange(len(self.times)) if time_idx is None else np.asarray(time_idx)
        return self.points(time_idx, np.arange(self.n_sites))

    def digest(self):
        h = hashlib.sha256()
        h.update(self.system.encode())
        for a in self.axes:
            h.update(np.ascontiguousarray(a, dtype="<f8").tobytes())
        for k in sorted(self.fields):
            h.update(k.encode())
            h.update(np.ascontiguousarray(self.fields[k], dtype="<f8").tobytes())
        return h.hexdigest()


def _stride_to(n_have, n_want, what):
    if n_want is None or n_have == n_want:
        return 1
    if n_have % n_want:
        raise ValueError(f"cannot downsample {n_have} {what} to {n_want} evenly")
    return n_have // n_want


def build_dataset(series, system, recipe=None):
    """Apply the system's downsampling recipe and fit min-max maps."""
    spec = get_system(system)
    rec = dict(RECIPES[spec.id])
    rec.update(recipe or {})
    by_name = {s.name: s for s in series}
    missing = [v for v in spec.variables if v not in by_name]
    if missing:
        raise ValueError(f"missing fields for {system}: {missing}")
    grid: GridSpec = by_name[spec.variables[0]].grid
    for v in spec.variables:
        if by_name[v].grid != grid:
            raise ValueError(f"field {v!r} is on a different grid")
    if grid.dim != spec.dim:
        raise ValueError(f"{system} needs {spec.dim}D fields, got {grid.dim}D")
    times = grid.times
    tsel = np.arange(len(times))
    if rec.get("window"):
        lo, hi = rec["window"]
        tsel = np.flatnonzero((times >= lo - 1e-9) & (times < hi - 1e-9))
    if rec.get("nt") and len(tsel) != rec["nt"]:
        step = _stride_to(len(tsel), rec["nt"], "time levels")
        tsel = tsel[::step]
    spatial = []
    for ax in range(grid.dim):
        n = grid.cells[ax]
        want = rec.get("sites") if rec.get("sites", 0) <= n else None
        spatial.append(np.arange(0, n, _stride_to(n, want, "sites")))
    axes = tuple(grid.coords(ax)[spatial[ax]] for ax in range(grid.dim)) + (times[tsel],)
    fields = {}
    for v in spec.variables:
        a = by_name[v].values[tsel]
        if grid.dim == 1:
            a = a[:, spatial[0]]
        else:
            a = a[:, spatial[1]][:, :, spatial[0]]
        fields[v] = np.ascontiguousarray(a)
    in_min = [float(a.min()) for a in axes]
    in_max = [float(a.max()) for a in axes]
    if rec.get("normalize_outputs", True):
        out_min = [float(fields[v].min()) for v in spec.variables]
        out_max = [float(fields[v].max()) for v in spec.variables]
    else:
        out_min, out_max = [0.0] * len(spec.variables), [1.0] * len(spec.variables)
        for v in spec.variables:
            if fields[v].max() == fields[v].min():
                raise ValueError(f"degenerate normalization range for {v}")
    nrm = Normalizer(in_min, in_max, out_min, out_max, spec.coords, spec.variables)
    return Dataset(spec.id, fields, axes, nrm)


@dataclass(frozen=True)
class SplitSpec:
    n_s: int
    n_t: int
    train_frac: float = 0.8
    t1: float = None

    def __post_init__(self):
        if not 0.0 < self.train_frac < 1.0:
            raise ValueError("train fraction must lie in (0, 1)")
        if self.n_s < 1 or self.n_t < 1:
            raise ValueError("need at least one site and one time level")
        if self.t1 is not None and not 0.0 < self.t1 < 1.0:
            raise ValueError("t1 must lie inside the (normalized) time interval")


@dataclass
class PointBatch:
    """Mesh-free sample: coordinates (physical), targets and IC subset."""

    coords: np.ndarray
    time_idx: np.ndarray
    site_idx: np.ndarray
    targets: dict
    clean: dict
    ic_coords: np.ndarray
    ic_targets: dict
    noise: float = 0.0
    seed: int = 0
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.coords)

    def subset(self, rows):
        rows = np.asarray(rows)
        return replace(self, coords=self.coords[rows], time_idx=self.time_idx[rows],
                       site_idx=self.site_idx[rows],
                       targets={k: v[rows] for k, v in self.targets.items()},
                       clean={k: v[rows] for k, v in self.clean.items()})


def time_window_split(dataset, t1):
    """Time indices of ``[t0, t1]`` and ``(t1, t2]``; ``t1`` is in normalized time."""
    t = dataset.times
    tn = (t - t[0]) / (t[-1] - t[0])
    if not 0.0 < t1 < 1.0:
        raise ValueError(f"t1 = {t1} must lie strictly inside (0, 1)")
    train = np.flatnonzero(tn <= t1 + 1e-12)
    fore = np.flatnonzero(tn > t1 + 1e-12)
    if len(fore) == 0 or len(train) == 0:
        raise ValueError("empty time window")
    return train, fore


def fit_split(dataset, split):
    """``split`` with ``n_t`` (and ``n_s``) clipped to what the dataset and window offer."""
    n_levels = len(dataset.times)
    if split.t1 is not None:
        n_levels = len(time_window_split(dataset, split.t1)[0])
    return replace(split, n_s=min(split.n_s, dataset.n_sites), n_t=min(split.n_t, n_levels))


def sample_meshfree(dataset, split, seed=0):
    """Draw sites and time levels without replacement; split 80/20 by shuffle."""
    spec = dataset.spec
    rng = np.random.default_rng(seed)
    allowed = np.arange(len(dataset.times))
    if split.t1 is not None:
        allowed = time_window_split(dataset, split.t1)[0]
    if split.n_s > dataset.n_sites:
        raise ValueError(f"n_s = {split.n_s} exceeds the {dataset.n_sites} grid sites")
    if split.n_t > len(allowed):
        raise ValueError(f"n_t = {split.n_t} exceeds the {len(allowed)} available time levels")
    sites = np.sort(rng.choice(dataset.n_sites, size=split.n_s, replace=False))
    tidx = np.sort(rng.choice(allowed, size=split.n_t, replace=False))
    coords, ti, si = dataset.points(tidx, sites)
    order = rng.permutation(len(coords))
    n_train = int(round(split.train_frac * len(coords)))
    tr, va = order[:n_train], order[n_train:]
    ic_coords, ic_ti, ic_si = dataset.points([0], sites)
    ic_targets = {v: dataset.values_at(v, ic_ti, ic_si) for v in spec.eq_vars}

    def make(rows, with_ic):
        tg = {v: dataset.values_at(v, ti[rows], si[rows]) for v in spec.data_vars}
        return PointBatch(coords[rows], ti[rows], si[rows], tg, {k: a.copy() for k, a in tg.items()},
                          ic_coords if with_ic else ic_coords[:0],
                          ic_targets if with_ic else {k: a[:0] for k, a in ic_targets.items()},
                          0.0, seed)

    return make(tr, True), make(va, False)


def add_noise(batch, level, seed=0):
    """Additive Gaussian noise scaled by each clean data target's global std."""
    if level < 0:
        raise ValueError("noise level must be nonnegative")
    if level == 0:
        return replace(batch, targets={k: v.copy() for k, v in batch.clean.items()}, noise=0.0)
    rng = np.random.default_rng(seed)
    noisy = {}
    for k in sorted(batch.clean):
        c = batch.clean[k]
        noisy[k] = c + level * float(np.std(c)) * rng.standard_normal(c.shape)
    return replace(batch, targets=noisy, noise=float(level))
