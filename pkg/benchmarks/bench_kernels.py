"""Time the compiled and pure-Python kernels on the same inputs.

    python benchmarks/bench_kernels.py [--L 100 200 1000] [--cols 1 8] [--repeat 5]
"""
import argparse
import timeit

import numpy as np

from probetrace._backend import compiled_available, load_backend


def _inputs(L, cols, seed=0):
    rng = np.random.default_rng(seed)
    sup = -0.5 + 0.1 * rng.standard_normal(L)
    sub = 0.5 + 0.1 * rng.standard_normal(L)
    return sub, sup, rng.standard_normal((cols, L))


def _best(fn, repeat):
    timer = timeit.Timer(fn)
    number, _ = timer.autorange()
    return min(timer.repeat(repeat, number)) / number


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--L", type=int, nargs="+", default=[100, 1000])
    parser.add_argument("--cols", type=int, nargs="+", default=[1, 8])
    parser.add_argument("--repeat", type=int, default=5)
    args = parser.parse_args(argv)

    names = ["python"] + (["compiled"] if compiled_available() else [])
    if len(names) == 1:
        print("compiled extension not built; timing the python backend only")
    backends = {name: load_backend(name) for name in names}

    print(f"{'kernel':<14}{'L':>6}{'cols':>6}" + "".join(f"{n + ' [us]':>16}" for n in names) + f"{'speedup':>10}")
    for L in args.L:
        for cols in args.cols:
            sub, sup, V = _inputs(L, cols)
            for kernel, call in [
                ("tridiag_apply", lambda k: k.tridiag_apply(sub, sup, 1.0, V)),
                ("bicgstab", lambda k: k.bicgstab(sub, sup, 1.0, V, 1e-10, 10 * L)),
            ]:
                times = {n: _best(lambda k=k: call(k), args.repeat) for n, k in backends.items()}
                speedup = times["python"] / times["compiled"] if "compiled" in times else float("nan")
                print(f"{kernel:<14}{L:>6}{cols:>6}"
                      + "".join(f"{1e6 * times[n]:>16.1f}" for n in names) + f"{speedup:>9.1f}x")


if __name__ == "__main__":
    main()
