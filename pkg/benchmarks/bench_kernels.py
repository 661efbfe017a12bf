"""Compare the compiled KL kernels with the numpy fallback.

    python benchmarks/bench_kernels.py --vocab 5000 --history 512
"""

import argparse
import timeit

import numpy as np

from lookback import _pykernels

try:
    from lookback import _ckernels
except ImportError:
    _ckernels = None


def make_rows(rng, n, v):
    raw = rng.random((n, v)) ** 4 + 1e-12
    probs = raw / raw.sum(1, keepdims=True)
    return probs, np.log(probs)


def bench(label, fn, repeat):
    times = timeit.repeat(fn, number=1, repeat=repeat)
    best = min(times)
    print(f"  {label:8s} best {1e3 * best:9.3f} ms  median {1e3 * float(np.median(times)):9.3f} ms")
    return best


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--vocab", type=int, default=5000)
    ap.add_argument("--history", type=int, default=512, help="rows compared against per step")
    ap.add_argument("--steps", type=int, default=128, help="distributions in the pairwise matrix")
    ap.add_argument("--repeat", type=int, default=7)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)

    rng = np.random.default_rng(args.seed)
    hist_p, hist_lp = make_rows(rng, args.history, args.vocab)
    cur_p, cur_lp = make_rows(rng, 1, args.vocab)
    cur_p, cur_lp = cur_p[0], cur_lp[0]
    mat_p, mat_lp = make_rows(rng, args.steps, args.vocab)

    backends = {"python": _pykernels}
    if _ckernels is None:
        print("compiled kernels not built; timing the numpy fallback only")
    else:
        backends["cython"] = _ckernels
        np.testing.assert_allclose(
            _ckernels.kl_rows(cur_p, cur_lp, hist_lp), _pykernels.kl_rows(cur_p, cur_lp, hist_lp), atol=1e-9
        )

    print(f"kl_rows: one step against {args.history} history rows, |V|={args.vocab}")
    rows = {name: bench(name, lambda m=m: m.kl_rows(cur_p, cur_lp, hist_lp), args.repeat) for name, m in backends.items()}
    print(f"pairwise_kl: {args.steps} x {args.steps} matrix, |V|={args.vocab}")
    pair = {name: bench(name, lambda m=m: m.pairwise_kl(mat_p, mat_lp), args.repeat) for name, m in backends.items()}
    if "cython" in backends:
        print(f"speedup (python / cython): kl_rows {rows['python'] / rows['cython']:.2f}x, "
              f"pairwise_kl {pair['python'] / pair['cython']:.2f}x")


if __name__ == "__main__":
    main()
