"""Time each kernel against its pure-python fallback.

The package picks one backend at import time (MEC_KERNELS=auto|c|py);
this script sidesteps the dispatcher and times both implementation
modules on identical inputs, so the speedup column is apples to apples.
A parity column reports the worst relative difference between the two
backends on each kernel's output.

Shapes default to the bundled synthetic workload: 32k-row batches of
d=16 embeddings, M=4 subspaces, K=64 codewords, and codewords drawn from
the data itself so soft assignments stay genuinely soft (random far-away
codewords make the entropy kernel look cheaper than it is in training).

Run from the repo root after an editable install:

    python benchmarks/bench_kernels.py
    python benchmarks/bench_kernels.py --rows 8192 --reps 30
"""

import argparse
import time

import numpy as np

from mec.kernels import _pykernels

try:
    from mec.kernels import _ckernels
except ImportError:
    _ckernels = None


def build_inputs(rows, d, m, k, n_features, n_neg, reg_rows, seed):
    rng = np.random.default_rng(seed)
    dm = d // m
    S = rng.normal(scale=0.05, size=(rows, d))
    CW = np.empty((m, k, dm))
    for i in range(m):
        pick = rng.choice(rows, size=k, replace=False)
        CW[i] = S[pick, i * dm : (i + 1) * dm]
    CW = np.ascontiguousarray(CW)
    S0 = np.ascontiguousarray(S[:, :dm])
    C0 = np.ascontiguousarray(CW[0])
    codes = np.empty((rows, m), dtype=np.int64)
    for i in range(m):
        Si = np.ascontiguousarray(S[:, i * dm : (i + 1) * dm])
        codes[:, i] = np.asarray(_pykernels.nearest_codeword(Si, np.ascontiguousarray(CW[i])))
    negs = rng.integers(0, k, size=(rows, n_neg, m))
    w = rng.integers(1, 12, size=rows).astype(np.float64)
    wreg = w[:reg_rows] / w[:reg_rows].sum()
    bag_sizes = rng.integers(1, 4, size=rows)
    offsets = np.concatenate([[0], np.cumsum(bag_sizes)]).astype(np.int64)
    ids = rng.integers(0, n_features, size=offsets[-1])
    table = rng.normal(scale=0.05, size=(n_features, d))
    return {
        "S": np.ascontiguousarray(S),
        "S0": S0,
        "C0": C0,
        "CW": CW,
        "codes": codes,
        "codes0": np.ascontiguousarray(codes[:, 0]),
        "negs": np.ascontiguousarray(negs),
        "w": w,
        "Sreg": np.ascontiguousarray(S[:reg_rows]),
        "wreg": np.ascontiguousarray(wreg),
        "acc": np.zeros((k, dm)),
        "table": table,
        "ids": np.ascontiguousarray(ids),
        "offsets": offsets,
        "gout": rng.normal(size=(rows, d)),
        "tau": 0.002,
    }


def make_cases(inp):
    rows, d = inp["S"].shape
    m, k, dm = inp["CW"].shape
    reg_rows = inp["Sreg"].shape[0]
    n_neg = inp["negs"].shape[1]

    def sqdist(impl):
        return np.asarray(impl.sqdist_matrix(inp["S0"], inp["C0"]))

    def nearest(impl):
        return np.asarray(impl.nearest_codeword(inp["S0"], inp["C0"]))

    def scatter(impl):
        inp["acc"].fill(0.0)
        impl.scatter_add_rows(inp["acc"], inp["codes0"], inp["S0"], inp["w"])
        return inp["acc"].copy()

    def bag(impl):
        return np.asarray(impl.bag_mean(inp["table"], inp["ids"], inp["offsets"], None))

    def bag_bwd(impl):
        return np.asarray(
            impl.bag_mean_backward(inp["gout"], inp["ids"], inp["offsets"], inp["table"].shape[0], None)
        )

    def contrastive(impl):
        loss, grad = impl.contrastive_pq(inp["S"], inp["codes"], inp["negs"], inp["CW"])
        return np.asarray(grad)

    def entropy(impl):
        loss, grad = impl.entropy_reg_pq(inp["Sreg"], inp["CW"], inp["wreg"], inp["tau"], 1e-10)
        return np.asarray(grad)

    return [
        ("sqdist_matrix", f"({rows},{dm})x({k},{dm})", sqdist),
        ("nearest_codeword", f"({rows},{dm})x({k},{dm})", nearest),
        ("scatter_add_rows", f"{rows} rows -> ({k},{dm})", scatter),
        ("bag_mean", f"{rows} bags, d={d}", bag),
        ("bag_mean_backward", f"{rows} bags, d={d}", bag_bwd),
        ("contrastive_pq", f"({rows},{d}), {n_neg} negs", contrastive),
        ("entropy_reg_pq", f"({reg_rows},{d}), K={k}", entropy),
    ]


def best_ms(fn, reps):
    fn()  # warm-up, also triggers any lazy allocation
    best = float("inf")
    for _ in range(reps):
        t0 = time.perf_counter()
        fn()
        dt = (time.perf_counter() - t0) * 1e3
        if dt < best:
            best = dt
    return best


def rel_diff(a, b):
    # worst absolute difference relative to the output's own magnitude;
    # elementwise ratios blow up on exact-zero distances where the
    # expanded quadratic form leaves +/-1e-18 dust
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    scale = max(float(np.max(np.abs(a))), float(np.max(np.abs(b))), 1e-30)
    return float(np.max(np.abs(a - b))) / scale


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--rows", type=int, default=32768, help="batch rows (default 32768)")
    ap.add_argument("--dim", type=int, default=16, help="embedding dim (default 16)")
    ap.add_argument("--M", type=int, default=4, help="subspaces (default 4)")
    ap.add_argument("--K", type=int, default=64, help="codewords per subspace (default 64)")
    ap.add_argument("--features", type=int, default=25005, help="embedding table rows (default 25005)")
    ap.add_argument("--negatives", type=int, default=4, help="contrastive negatives (default 4)")
    ap.add_argument("--reg-rows", type=int, default=128, help="entropy-regularizer subsample (default 128)")
    ap.add_argument("--reps", type=int, default=20, help="repetitions per kernel (default 20)")
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    if args.dim % args.M != 0:
        ap.error(f"--dim {args.dim} must be divisible by --M {args.M}")

    inp = build_inputs(
        args.rows, args.dim, args.M, args.K, args.features, args.negatives, min(args.reg_rows, args.rows), args.seed
    )
    cases = make_cases(inp)

    if _ckernels is None:
        print("compiled backend not importable; timing the pure-python fallback alone")
        print(f"{'kernel':20s} {'shape':24s} {'py ms':>9s}")
        for name, shape, fn in cases:
            print(f"{name:20s} {shape:24s} {best_ms(lambda: fn(_pykernels), args.reps):9.3f}")
        return

    print(f"rows={args.rows} d={args.dim} M={args.M} K={args.K} reps={args.reps} (best-of)")
    print(f"{'kernel':20s} {'shape':24s} {'py ms':>9s} {'c ms':>9s} {'speedup':>8s} {'parity':>9s}")
    for name, shape, fn in cases:
        out_py = fn(_pykernels)
        out_c = fn(_ckernels)
        if np.issubdtype(np.asarray(out_py).dtype, np.integer):
            parity = "exact" if np.array_equal(out_py, out_c) else "DIFFERS"
        else:
            parity = f"{rel_diff(out_py, out_c):.1e}"
        t_py = best_ms(lambda: fn(_pykernels), args.reps)
        t_c = best_ms(lambda: fn(_ckernels), args.reps)
        print(f"{name:20s} {shape:24s} {t_py:9.3f} {t_c:9.3f} {t_py / t_c:7.1f}x {parity:>9s}")


if __name__ == "__main__":
    main()
