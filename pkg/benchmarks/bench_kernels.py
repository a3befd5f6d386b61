"""Compare the compiled and numpy kernel backends on window-sized inputs.

    python3 benchmarks/bench_kernels.py [--repeat N] [--json OUT]
"""
from __future__ import annotations

import argparse
import json
import sys
import timeit

import numpy as np

from dynba.geometry import Rotation
from dynba.kernels import available_backends


def window_inputs(rng, frames=10, landmarks=300, obs=2400):
    R = np.array([Rotation.exp(rng.normal(size=3) * 0.2).matrix() for _ in range(frames)])
    p = rng.normal(size=(frames, 3))
    Rc = Rotation.exp(rng.normal(size=3)).matrix()
    tc = rng.normal(size=3) * 0.05
    a = rng.integers(0, frames, obs)
    j = (a + 1 + rng.integers(0, frames - 1, obs)) % frames
    l = rng.integers(0, landmarks, obs)
    xa = rng.normal(size=(obs, 2)) * 0.3
    xj = rng.normal(size=(obs, 2)) * 0.3
    lam = rng.uniform(0.05, 1.0, landmarks)
    w = np.full(obs, 400.0)
    return R, p, Rc, tc, a, j, l, xa, xj, lam, w, w.copy()


def cases(rng):
    pk = rng.uniform(0, 640, (120, 2))
    pk1 = pk + rng.normal(size=(120, 2))
    M = rng.normal(size=(3, 3)) * 1e-3
    d = np.sort(rng.chisquare(1, 120) * np.where(rng.random(120) < 0.3, 40, 1))[::-1].copy()
    vis = window_inputs(rng)
    F, L = 10, 300
    r, Ja, Jj, Jl, _ = available_backends()["python"].visual_linearize(*vis)
    s = np.ones(len(r))

    def acc(k):
        Hpp = np.zeros((F * 15, F * 15))
        Hpl = np.zeros((F * 15, L))
        k.visual_accumulate(r, Ja, Jj, Jl, s, vis[4], vis[5], vis[6], 15,
                            Hpp, Hpl, np.zeros(L), np.zeros(F * 15), np.zeros(L))

    return {
        "epipolar_scores[120]": lambda k: k.epipolar_scores(pk, pk1, M),
        "eliminate_sorted[120]": lambda k: k.eliminate_sorted(d, 4.0, 2 ** 0.5, 2),
        "visual_linearize[2400]": lambda k: k.visual_linearize(*vis),
        "visual_accumulate[2400]": acc,
    }


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--repeat", type=int, default=7)
    ap.add_argument("--json")
    args = ap.parse_args(argv)
    backends = available_backends()
    if "cython" not in backends:
        print("compiled backend not built; only the numpy backend is timed", file=sys.stderr)
    results = {}
    for name, fn in cases(np.random.default_rng(0)).items():
        row = {}
        for bname, mod in backends.items():
            t = timeit.Timer(lambda: fn(mod))
            number, _ = t.autorange()
            row[bname] = min(t.repeat(args.repeat, number)) / number * 1e6
        results[name] = row
    print(f"{'kernel':26s} " + " ".join(f"{b + ' (us)':>14s}" for b in backends) + "   speedup")
    for name, row in results.items():
        sp = row["python"] / row["cython"] if "cython" in row else float("nan")
        print(f"{name:26s} " + " ".join(f"{row[b]:14.1f}" for b in backends) + f"   {sp:6.1f}x")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(results, fh, indent=2)


if __name__ == "__main__":
    main()
