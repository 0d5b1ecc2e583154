"""Compiled vs numpy Adam kernel, alone and inside a full training step.

    python3 benchmarks/bench_kernels.py [--sizes 65536,1048576] [--repeat 20]
"""
import argparse
import timeit

import numpy as np

from widthlab.empirics import ModelShape, init_model, synth_batch
from widthlab.optim import LearningRateSchedule, OptimizerConfig, init_state, step
from widthlab.optim._kernels import BACKENDS
from widthlab.params import preset


def bench_kernel(fn, size, repeat, use_atan2=False):
    rng = np.random.default_rng(0)
    g = rng.standard_normal(size)
    m = np.zeros(size)
    v = np.zeros(size)
    out = np.empty(size)
    call = lambda: fn(g, m, v, 0.9, 0.999, 0.1, 0.001, 1e-8, use_atan2, 1.0, 1.0, out, True)  # noqa: E731
    call()
    return min(timeit.repeat(call, number=1, repeat=repeat))


def bench_step(fn, n, repeat):
    model = init_model(preset("mup"), ModelShape(n=n), 0)
    x, y = synth_batch(32, 32, 0)
    cfg = OptimizerConfig(update_clip_rms=1.0)
    sched = LearningRateSchedule(base_lr=1e-3)
    state = init_state(model.weights, cfg, model.init_stds)
    _, grads, _ = model.loss_and_grads(x, y)

    def once():
        step(model.weights, grads, state, cfg, sched, n, model.shape.roles, kernel=fn)

    once()
    return min(timeit.repeat(once, number=1, repeat=repeat))


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--sizes", default="4096,65536,1048576")
    ap.add_argument("--widths", default="512,2048")
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args()
    names = sorted(BACKENDS)
    if "cython" not in BACKENDS:
        print("compiled kernel not built; timing the numpy fallback only")

    print(f"{'case':<28}" + "".join(f"{n:>12}" for n in names) + ("     speedup" if len(names) > 1 else ""))
    rows = []
    for size in map(int, args.sizes.split(",")):
        for atan in (False, True):
            rows.append((f"kernel {'atan2' if atan else 'adam'} n={size}",
                         [bench_kernel(BACKENDS[k], size, args.repeat, atan) for k in names]))
    for n in map(int, args.widths.split(",")):
        rows.append((f"optimizer step width={n}", [bench_step(BACKENDS[k], n, args.repeat) for k in names]))
    for label, ts in rows:
        line = f"{label:<28}" + "".join(f"{t * 1e3:>10.3f}ms" for t in ts)
        if len(ts) > 1:
            line += f"{ts[names.index('numpy')] / ts[names.index('cython')]:>11.2f}x"
        print(line)


if __name__ == "__main__":
    main()
