"""Compare the compiled and numpy kernel backends.

Run ``python3 benchmarks/bench_kernels.py [--rows N] [--vocab V] [--repeat R]``.
Two shapes are timed: many short rows (the toy vocabulary, where per-call
overhead dominates) and a wider vocabulary.
"""

from __future__ import annotations

import argparse
import timeit

import numpy as np

from paint_lab import _kernels_py, kernels

try:
    from paint_lab import _kernels as _compiled
except ImportError:
    _compiled = None


def _inputs(rows: int, vocab: int, seed: int = 0) -> dict:
    rng = np.random.default_rng(seed)
    p_t, lt = _kernels_py.softmax_rows(rng.normal(0, 2, (rows, vocab)))
    p_s, ls = _kernels_py.softmax_rows(rng.normal(0, 2, (rows, vocab)))
    return {"logits": rng.normal(0, 2, (rows, vocab)), "p_t": p_t, "lt": lt, "p_s": p_s, "ls": ls,
            "sel": rng.random(rows) < 0.3}


def _calls(mod, x: dict) -> dict:
    return {
        "softmax_rows": lambda: mod.softmax_rows(x["logits"], 1.1),
        "entropy_rows": lambda: mod.entropy_rows(x["p_t"]),
        "logsumexp_rows": lambda: mod.logsumexp_rows(x["logits"]),
        "interpolate_rows": lambda: mod.interpolate_rows(x["p_t"], x["lt"], x["ls"], x["sel"], 0.03),
        "clipped_fkl_rows": lambda: mod.clipped_fkl_rows(x["p_t"], x["lt"], x["ls"], 0.06),
        "clipped_fkl_grad_rows": lambda: mod.clipped_fkl_grad_rows(x["p_t"], x["lt"], x["p_s"], x["ls"], 0.06),
    }


def bench(rows: int, vocab: int, repeat: int) -> list[tuple[str, float, float | None]]:
    x = _inputs(rows, vocab)
    py = _calls(_kernels_py, x)
    cy = _calls(_compiled, x) if _compiled is not None else {}
    out = []
    for name, fn in py.items():
        t_py = min(timeit.repeat(fn, number=repeat, repeat=3)) / repeat
        t_cy = min(timeit.repeat(cy[name], number=repeat, repeat=3)) / repeat if cy else None
        out.append((name, t_py, t_cy))
    return out


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--rows", type=int, default=64)
    ap.add_argument("--vocab", type=int, nargs="+", default=[15, 512])
    ap.add_argument("--repeat", type=int, default=2000)
    args = ap.parse_args()
    print(f"backends available: {kernels.available_backends()}  (active: {kernels.get_backend()})")
    for V in args.vocab:
        print(f"\nrows={args.rows} vocab={V}")
        print(f"{'kernel':<24} {'python us':>10} {'cython us':>10} {'speedup':>8}")
        for name, t_py, t_cy in bench(args.rows, V, args.repeat):
            cy = f"{t_cy * 1e6:10.2f}" if t_cy is not None else f"{'n/a':>10}"
            sp = f"{t_py / t_cy:7.2f}x" if t_cy else f"{'n/a':>8}"
            print(f"{name:<24} {t_py * 1e6:10.2f} {cy} {sp}")


if __name__ == "__main__":
    main()
