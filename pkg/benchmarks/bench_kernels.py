"""Time the compiled and pure-Python kernel backends on the same workloads.

    python3 benchmarks/bench_kernels.py [--repeat 3] [--quick]

Each workload runs through the public API (lesion extraction, boosting,
SHAP) with the kernel functions swapped in, and the outputs of the two
backends are checked for equality.
"""

import argparse
import contextlib
import time

import numpy as np

from ctcs import boost, kernels, treeshap
from ctcs.cohort import CohortSpec, generate_cohort
from ctcs.volgrid import extract_lesions

KERNELS = ("label_components", "find_splits", "tree_shap")


@contextlib.contextmanager
def use_backend(mod):
    saved = {k: getattr(kernels, k) for k in KERNELS}
    for k in KERNELS:
        setattr(kernels, k, getattr(mod, k))
    try:
        yield
    finally:
        for k, v in saved.items():
            setattr(kernels, k, v)


def best_of(fn, repeat):
    times, out = [], None
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        times.append(time.perf_counter() - t0)
    return min(times), out


def workloads(quick):
    n_phantoms = 4 if quick else 12
    cohort = generate_cohort(CohortSpec(n=max(10, n_phantoms), seed=1, max_lesions=10))
    phantoms = [cohort.phantom(i) for i in range(n_phantoms)]

    rng = np.random.default_rng(0)
    n, p = (300, 20) if quick else (800, 40)
    X = rng.normal(size=(n, p))
    y = (X[:, 0] - X[:, 1] + rng.normal(size=n) > 0).astype(float)
    cfg = boost.TrainConfig(max_rounds=30 if quick else 100)
    model = boost.train(X, y, cfg=cfg)

    def components():
        return [[sorted(map(tuple, les.voxels.tolist())) for les in extract_lesions(ph.volume, ph.mask)]
                for ph in phantoms]

    def training():
        return boost.train(X, y, cfg=cfg).to_json()

    def shap():
        return treeshap.shap_values(model, X[:200])[0]

    return [("label_components", components), ("train", training), ("tree_shap", shap)]


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=3)
    ap.add_argument("--quick", action="store_true", help="smaller workloads")
    args = ap.parse_args(argv)

    backends = kernels.backends()
    if "cython" not in backends:
        print("compiled extension not built; timing the python backend only")
    print(f"{'workload':<18}" + "".join(f"{b:>12}" for b in backends) + ("     speedup  equal" if len(backends) > 1 else ""))
    for name, fn in workloads(args.quick):
        results = {}
        for b, mod in backends.items():
            with use_backend(mod):
                results[b] = best_of(fn, args.repeat)
        line = f"{name:<18}" + "".join(f"{results[b][0]:>11.4f}s" for b in backends)
        if len(backends) > 1:
            py, cy = results["python"], results["cython"]
            equal = np.array_equal(py[1], cy[1]) if isinstance(py[1], np.ndarray) else py[1] == cy[1]
            line += f"  {py[0] / cy[0]:>9.1f}x  {'yes' if equal else 'NO'}"
        print(line)


if __name__ == "__main__":
    main()
