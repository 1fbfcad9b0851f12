"""Compare the compiled kernels with the numpy fallback.

Usage::

    python benchmarks/bench_kernels.py [--trajectories 200] [--steps 1000] [--repeat 3]

Both backends receive identical inputs; the script reports the best wall
time of each and the largest difference between their outputs.
"""

import argparse
import math
import time

import numpy as np

from qfilter import _kernels_py
from qfilter.filtering import _stepping_channels
from qfilter.kalman import solve_riccati
from qfilter.models import open_oscillator, spin_half_sphere, truncated_fock_bridge
from qfilter.stochastic import SeedPolicy, TimeGrid, sample_wiener_path

try:
    from qfilter import _kernels as compiled
except ImportError:  # the extension was not built
    compiled = None


def best_time(fn, repeat):
    best, out = math.inf, None
    for _ in range(repeat):
        start = time.perf_counter()
        out = fn()
        best = min(best, time.perf_counter() - start)
    return best, out


def sme_case(name, model, n_traj, n_steps, dt):
    system = model.system()
    grid = TimeGrid(0.0, n_steps * dt, n_steps)
    noise = np.stack([sample_wiener_path(grid, system.weights, SeedPolicy(1), k).increments
                      for k in range(n_traj)])
    chans = _stepping_channels(system)
    Ld = np.array([math.sqrt(w) * L for L, w in chans], dtype=complex).reshape(
        len(chans), system.dim, system.dim)
    obs = np.array(list(model.observables.values())[:3], dtype=complex)
    args = (model.rho0, system.K, Ld, system.L_cols, system.weights, noise, grid.dt,
            True, 10, obs, True)
    return name, args


def compare(label, py_fn, c_fn, repeat, key=None):
    t_py, out_py = best_time(py_fn, repeat)
    if c_fn is None:
        print(f"{label:<34} python {t_py:8.3f} s   compiled  (not built)")
        return
    t_c, out_c = best_time(c_fn, repeat)
    diff = np.max(np.abs(out_py[key] - out_c[key])) if key else np.max(np.abs(out_py - out_c))
    print(f"{label:<34} python {t_py:8.3f} s   compiled {t_c:8.3f} s   "
          f"speedup {t_py / t_c:5.1f}x   max diff {diff:.1e}")


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--trajectories", type=int, default=200)
    p.add_argument("--steps", type=int, default=1000)
    p.add_argument("--repeat", type=int, default=3)
    args = p.parse_args()

    cases = [
        sme_case("spin-1/2 hemisphere", spin_half_sphere(2, strength=0.5, omega=1.0),
                 args.trajectories, args.steps, 1e-3),
        sme_case("30-level oscillator", truncated_fock_bridge(30, epsilon=0.5, omega=0.5).quantum,
                 max(1, args.trajectories // 20), args.steps, 1e-4),
    ]
    for name, a in cases:
        label = f"sme {name} ({a[5].shape[0]} x {a[5].shape[1]})"
        compare(label, lambda: _kernels_py.sme_integrate(*a),
                None if compiled is None else (lambda: compiled.sme_integrate(*a)),
                args.repeat, key="rho")

    m = open_oscillator(1.0, 0.5, 2.0, P0=2 * np.eye(2))
    n = 20 * args.steps
    r_args = (m.P0, m.A, m.D, m.X2, m.SY, m.weights, 1e-3, n, 1)
    compare(f"riccati rk4 ({n} steps)", lambda: _kernels_py.riccati_rk4(*r_args),
            None if compiled is None else (lambda: compiled.riccati_rk4(*r_args)), args.repeat)
    # the public entry point includes the admissibility scan
    best, _ = best_time(lambda: solve_riccati(m, TimeGrid(0.0, n * 1e-3, n)), args.repeat)
    print(f"{'solve_riccati (selected backend)':<34} {best:8.3f} s")


if __name__ == "__main__":
    main()
