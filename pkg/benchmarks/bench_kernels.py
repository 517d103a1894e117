"""Compare the numba kernel lane against the pure-numpy fallback.

Runs each hot kernel on representative sizes, checks the two lanes agree,
and reports best-of-5 wall times.  The numba lane must be importable; run
with CELLFLOW_NUMBA=0 to see the fallback-only numbers instead.

    python3 benchmarks/bench_kernels.py
"""

import time

import numpy as np

from cellflow import _kernels
from cellflow.numerics import make_rng


def best_of(fn, n=5):
    times = []
    for _ in range(n):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def bench(name, args, rtol=1e-10):
    py = _kernels.PY_FUNCS[name]
    nb = _kernels.NB_FUNCS.get(name)
    ref = py(*args)
    row = f"{name:22s}"
    t_py = best_of(lambda: py(*args))
    row += f" numpy {t_py * 1e3:9.2f} ms"
    if nb is not None:
        nb(*args)  # trigger JIT outside timing
        out = nb(*args)
        ok = np.allclose(np.asarray(ref), np.asarray(out), rtol=rtol, atol=1e-10)
        t_nb = best_of(lambda: nb(*args))
        row += f"   numba {t_nb * 1e3:9.2f} ms   x{t_py / t_nb:6.1f}   match={ok}"
    else:
        row += "   (numba lane disabled)"
    print(row)


def main():
    rng = make_rng(0, 99)
    print(f"active lane: {'numba' if _kernels.USE_NUMBA else 'numpy'}")

    X = rng.standard_normal((1000, 50))
    Y = rng.standard_normal((800, 50))
    bench("pairwise_sq_dists", (X, Y))

    P = rng.standard_normal((400, 2))
    D = rng.standard_normal((2000, 2))
    bench("density_hinge", (P, D, 5, 0.1))

    n, m = 256, 256
    C = _kernels.PY_FUNCS["pairwise_sq_dists"](rng.standard_normal((n, 2)),
                                               rng.standard_normal((m, 2)))
    log_mu = np.full(n, -np.log(n))
    log_nu = np.full(m, -np.log(m))
    f = np.zeros(n)
    g = np.zeros(m)
    bench("sinkhorn_log_sweeps", (C, log_mu, log_nu, 0.01 * C.mean(), 1.0, 1.0, 50, f, g),
          rtol=1e-8)

    n_cells, n_genes, n_edges = 300, 200, 400
    x = rng.uniform(0.0, 2.0, (n_cells, n_genes))
    basal = np.tile(rng.uniform(0.05, 0.15, n_genes), (n_cells, 1))
    decay = rng.uniform(0.9, 1.1, n_genes)
    tgt = rng.integers(4, n_genes, n_edges)
    reg = rng.integers(0, 4, n_edges)
    w = rng.uniform(1.5, 3.0, n_edges)
    K = rng.uniform(0.8, 1.4, n_edges)
    hn = np.full(n_edges, 2.0)
    noise = rng.standard_normal((n_cells, n_genes))
    bench("grn_step", (x, basal, decay, tgt, reg, w, K, hn, 0.05, 0.1, noise))


if __name__ == "__main__":
    main()
