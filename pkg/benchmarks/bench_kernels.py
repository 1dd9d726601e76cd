"""Time the numba kernels against their numpy fallbacks.

    python3 benchmarks/bench_kernels.py [--repeat 5] [--quick]

Each kernel is run on identical inputs through both implementations; the
script checks the outputs agree and prints the best-of-N wall time. The
first numba call (compilation, or loading from cache) is excluded.
"""

import argparse
import time

import numpy as np

from music import solvers as S
from music.autodiff import jets as J


def best_of(fn, repeat):
    fn()
    times = []
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t)
    return min(times)


def case_jet_forward(rng, quick):
    K, N, H = 4, 8192 if quick else 65536, 20
    Z = rng.normal(size=(K, N, H))
    phi, p1, p2 = J.activation_derivs("tanh", Z[0], 2)
    g = rng.uniform(0.2, 1.0, H)
    sd = np.array([1], dtype=np.int64)

    def run(kernel):
        C = np.empty_like(Z)
        return lambda: kernel(Z, phi, p1, p2, g, 2, sd, C) or C

    return run(J._layer_fwd_nb), run(J._layer_fwd_np)


def case_jet_backward(rng, quick):
    K, N, H = 4, 8192 if quick else 65536, 20
    Z = rng.normal(size=(K, N, H))
    Cb = rng.normal(size=(K, N, H))
    phi, p1, p2, p3 = J.activation_derivs("tanh", Z[0], 3)
    g = rng.uniform(0.2, 1.0, H)
    sd = np.array([1], dtype=np.int64)

    def run(kernel):
        def go():
            Zb = np.zeros_like(Z)
            gs = np.empty(H)
            kernel(Cb, Z, phi, p1, p2, p3, g, 2, sd, Zb, gs)
            return np.concatenate([Zb.ravel(), gs])
        return go

    return run(J._layer_bwd_nb), run(J._layer_bwd_np)


def case_swe(rng, quick):
    grid = S.swe_grid(200, 2)
    h0, hu0 = S.dam_break_ic(grid)
    steps = 200 if quick else 1000

    def run(kernel):
        def go():
            h, hu = h0.copy(), hu0.copy()
            kernel(h, hu, steps, grid.dt, grid.spacing(0), S.GRAVITY, S.SWE_EPS, True)
            return np.concatenate([h, hu])
        return go

    return run(S._swe_advance_nb), run(S._swe_advance_np)


def case_fn(rng, quick):
    n = 64 if quick else 200
    u0 = rng.normal(0.0, 0.45, (n, n))
    v0 = rng.normal(0.0, 0.45, (n, n))
    c = S.FN_DEFAULTS
    steps = 50 if quick else 200

    def run(kernel):
        def go():
            u, v = u0.copy(), v0.copy()
            kernel(u, v, steps, 0.0005, 0.5, c["gamma_u"], c["gamma_v"], 0, c["alpha"], c["beta"])
            return np.concatenate([u.ravel(), v.ravel()])
        return go

    return run(S._rd_advance_nb), run(S._rd_advance_np)


def case_wildfire(rng, quick):
    grid = S.wildfire_grid(51)
    u0, b0 = S.gaussian_fire_ic(grid)
    w = S.make_wind("fixed", grid)
    c = S.WILDFIRE_DEFAULTS
    dx = grid.spacing(0)
    steps = 50 if quick else 400

    def run(kernel):
        def go():
            u, b = u0.copy(), b0.copy()
            kernel(u, b, w.vx, w.vy, steps, 0.005, dx, c["kappa"], c["eps"], c["alpha"], c["q"], c["u_pc"])
            return np.concatenate([u.ravel(), b.ravel()])
        return go

    return run(S._fire_advance_nb), run(S._fire_advance_np)


CASES = {
    "jet layer forward": case_jet_forward,
    "jet layer backward": case_jet_backward,
    "swe rusanov": case_swe,
    "fitzhugh-nagumo step": case_fn,
    "wildfire step": case_wildfire,
}


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--quick", action="store_true", help="small problem sizes")
    args = ap.parse_args(argv)
    rng = np.random.default_rng(0)
    print(f"{'kernel':24s} {'numba ms':>10s} {'numpy ms':>10s} {'speedup':>8s} {'max |diff|':>11s}")
    for name, make in CASES.items():
        nb, np_ = make(rng, args.quick)
        diff = float(np.max(np.abs(np.asarray(nb()) - np.asarray(np_()))))
        t_nb = best_of(nb, args.repeat)
        t_np = best_of(np_, args.repeat)
        print(f"{name:24s} {t_nb * 1e3:10.2f} {t_np * 1e3:10.2f} {t_np / t_nb:8.2f} {diff:11.2e}")


if __name__ == "__main__":
    main()
