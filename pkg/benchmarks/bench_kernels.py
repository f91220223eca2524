"""Time the compiled kernels against the numpy fallback.

Usage::

    python benchmarks/bench_kernels.py [--nodes 1601] [--steps 200] [--repeat 5]

Inputs are a Gaussian on a 1D grid with OU-like coefficients, so the sizes
match the desk runs. The best of ``--repeat`` timings is reported per kernel.
"""

import argparse
import timeit

import numpy as np

from gradflows import _pykernels as py

try:
    from gradflows import _ckernels as ck
except ImportError:  # extension not built
    ck = None


def make_inputs(nodes: int, steps: int):
    x = np.linspace(-10, 10, nodes)
    h = x[1] - x[0]
    rho = np.exp(-0.5 * (x - 2) ** 2 / 0.25)
    rho /= rho.sum() * h
    rho_bar = np.exp(-0.5 * x ** 2)
    rho_bar /= rho_bar.sum() * h
    logref = np.log(rho_bar)
    # Scharfetter-Gummel coefficients for unit mobility and drift -x
    drift = -0.5 * (x[:-1] + x[1:]) * h
    bern = lambda z: np.where(np.abs(z) < 1e-8, 1.0, z / np.expm1(z))  # noqa: E731
    cl, cr = bern(-drift) / h, bern(drift) / h
    pnode = np.zeros((1, nodes))
    pface = [np.zeros(nodes - 1)]
    dt = 0.1 * h * h
    faces = [np.ascontiguousarray(-0.5 * (x[:-1] + x[1:]))]
    rho_tilde = np.exp(-0.5 * (x + 1) ** 2 / 0.5)
    rho_tilde /= rho_tilde.sum() * h
    return {
        "fp_advance": lambda k: k.fp_advance(rho.copy(), [cl], [cr], logref, np.ones(nodes, bool),
                                             pface, pnode, (h,), dt, np.zeros(steps + 1),
                                             np.zeros(steps)),
        "upwind_step": lambda k: [k.upwind_step(rho.copy(), faces, (h,), dt) for _ in range(steps)],
        "product_implicit_1d": lambda k: [k.product_implicit_1d(rho_tilde, rho, h, 1e-3)
                                          for _ in range(steps)],
    }


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--nodes", type=int, default=1601)
    parser.add_argument("--steps", type=int, default=200)
    parser.add_argument("--repeat", type=int, default=5)
    args = parser.parse_args(argv)
    if ck is None:
        print("compiled extension gradflows._ckernels is not built; nothing to compare")
        return 1
    print(f"nodes={args.nodes} steps={args.steps} (best of {args.repeat})")
    print(f"{'kernel':<22}{'python [ms]':>14}{'cython [ms]':>14}{'speedup':>10}")
    for name, call in make_inputs(args.nodes, args.steps).items():
        t_py = min(timeit.repeat(lambda: call(py), number=1, repeat=args.repeat))
        t_ck = min(timeit.repeat(lambda: call(ck), number=1, repeat=args.repeat))
        print(f"{name:<22}{1e3 * t_py:>14.2f}{1e3 * t_ck:>14.2f}{t_py / t_ck:>9.1f}x")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
