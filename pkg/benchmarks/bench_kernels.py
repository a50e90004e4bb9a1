"""Time the numba and numpy kernel backends on GPT-2-sized inputs.

Each kernel is run on identical inputs under both backends; the report shows
the best-of-N wall time, the speedup and the largest absolute disagreement.
A final row times one forward+backward pass of a random model per backend.

Usage:
    python benchmarks/bench_kernels.py [--rows 1024] [--width 768] [--repeat 5] [--json out.json]
"""

import argparse
import json
import sys
import timeit

import numpy as np

from neural_reserve import autodiff as ad
from neural_reserve import kernels
from neural_reserve.model import Model, ModelConfig, forward


def kernel_cases(rows: int, width: int, n_head: int, seed: int = 0) -> dict:
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(rows, width))
    gamma, beta = rng.normal(size=width), rng.normal(size=width)
    dy = rng.normal(size=(rows, width))
    # Layer-norm statistics come from the forward pass of the backend under test.
    _, mean, rstd = kernels._numpy.layer_norm_fwd(x, gamma, beta, 1e-5)
    scores = rng.normal(size=(rows, rows))
    probs = kernels._numpy.softmax_fwd(scores)
    logits = rng.normal(size=(rows, 4 * width))
    targets = rng.integers(0, 4 * width, size=rows)
    g_attn, g_proj = rng.normal(size=(width, 3 * width)), rng.normal(size=(width, width))
    return {
        "layer_norm_fwd": (x, gamma, beta, 1e-5),
        "layer_norm_bwd": (dy, x, mean, rstd, gamma),
        "gelu_fwd": (x,),
        "gelu_bwd": (x, dy),
        "softmax_fwd": (scores,),
        "softmax_bwd": (probs, scores),
        "nll_rows": (logits, targets),
        "head_grad_scores": (g_attn, g_proj, n_head, 1),
    }


def _flatten(result) -> list:
    if isinstance(result, tuple):
        return [np.asarray(r, dtype=np.float64).ravel() for r in result]
    return [np.asarray(result, dtype=np.float64).ravel()]


def best_time(fn, repeat: int) -> float:
    fn()  # warm-up and JIT compilation
    number = max(1, int(0.2 / max(timeit.timeit(fn, number=1), 1e-6)))
    return min(timeit.repeat(fn, number=number, repeat=repeat)) / number


def model_step(config: ModelConfig, tokens) -> None:
    model = Model.random(config, seed=0).copy(requires_grad=True)
    with ad.Graph() as graph:
        logits = forward(model, tokens)
        loss = ad.cross_entropy_next_token(logits[:-1], tokens[1:])
        graph.backward(loss)


def run(rows: int, width: int, n_head: int, repeat: int) -> list:
    backends = kernels.available_backends()
    if "numba" not in backends:
        sys.exit("numba is not installed; nothing to compare")
    report = []
    for name, args in kernel_cases(rows, width, n_head).items():
        times, outputs = {}, {}
        for backend in ("numpy", "numba"):
            kernels.use_backend(backend)
            fn = getattr(kernels, name)
            outputs[backend] = _flatten(fn(*args))
            times[backend] = best_time(lambda: fn(*args), repeat)
        diff = max(float(np.max(np.abs(a - b))) for a, b in zip(outputs["numpy"], outputs["numba"]))
        report.append({"case": name, "numpy_s": times["numpy"], "numba_s": times["numba"],
                       "speedup": times["numpy"] / times["numba"], "max_abs_diff": diff})
    config = ModelConfig(n_layer=2, n_head=n_head, d_model=width, d_vocab=4 * width,
                         context_length=rows)
    tokens = list(np.random.default_rng(1).integers(0, config.d_vocab, size=min(rows, 256)))
    times = {}
    for backend in ("numpy", "numba"):
        kernels.use_backend(backend)
        times[backend] = best_time(lambda: model_step(config, tokens), max(1, repeat // 2))
    report.append({"case": "forward+backward (2 layers)", "numpy_s": times["numpy"],
                   "numba_s": times["numba"], "speedup": times["numpy"] / times["numba"],
                   "max_abs_diff": None})
    return report


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--rows", type=int, default=1024, help="sequence positions")
    parser.add_argument("--width", type=int, default=768, help="model width")
    parser.add_argument("--heads", type=int, default=12)
    parser.add_argument("--repeat", type=int, default=5)
    parser.add_argument("--json", help="also write the report to this file")
    args = parser.parse_args(argv)
    report = run(args.rows, args.width, args.heads, args.repeat)
    print(f"{'case':<28} {'numpy ms':>10} {'numba ms':>10} {'speedup':>8} {'max |diff|':>11}")
    for r in report:
        diff = "" if r["max_abs_diff"] is None else f"{r['max_abs_diff']:.1e}"
        print(f"{r['case']:<28} {1e3 * r['numpy_s']:>10.3f} {1e3 * r['numba_s']:>10.3f} "
              f"{r['speedup']:>8.2f} {diff:>11}")
    if args.json:
        with open(args.json, "w", encoding="utf-8") as fh:
            json.dump(report, fh, indent=1)
    return 0


if __name__ == "__main__":
    sys.exit(main())
