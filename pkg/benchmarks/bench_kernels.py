"""Time the numpy and compiled kernel backends on the training hot path.

Usage: python3 benchmarks/bench_kernels.py [--trunk 64 64 64] [--batch 100]
"""
import argparse
import timeit

import numpy as np

from taxdqn import _pycore, nn

try:
    from taxdqn import _core
except ImportError:
    _core = None


def cases(k, net, tgt, batch):
    rng = np.random.default_rng(0)
    dim = net.spec.input_dim
    obs = rng.random((batch, dim)) - 0.5
    nobs = rng.random((batch, dim)) - 0.5
    a1 = rng.integers(0, 101, batch)
    a2 = rng.integers(0, 2, batch)
    util = rng.normal(size=batch)
    noff = rng.random(batch) < 0.5
    x = obs[0].copy()
    flat = net.flat.copy()
    grad, m, v = np.empty_like(flat), np.zeros_like(flat), np.zeros_like(flat)
    _, _, acts = _pycore.forward(flat, net.layout, obs)
    g1, g2 = rng.normal(size=(batch, 101)), rng.normal(size=(batch, 2))
    state = {"t": 0}

    def step():
        _, state["t"] = k.train_step(flat, tgt.flat, grad, m, v, state["t"], 1e-4, 0.9, 0.999, 1e-8,
                                     net.layout, obs, a1, a2, util, nobs, noff, 0.97)

    return {
        "greedy (1 obs)": lambda: k.greedy(flat, net.layout, x, True),
        f"forward ({batch})": lambda: k.forward(flat, net.layout, obs),
        f"ddqn_targets ({batch})": lambda: k.ddqn_targets(flat, tgt.flat, net.layout, util, nobs, noff, 0.97),
        f"backward ({batch})": lambda: k.backward(flat, net.layout, acts, g1, g2, grad),
        f"train_step ({batch})": step,
    }


def best_time(fn, repeat=5):
    n, _ = timeit.Timer(fn).autorange()
    return min(timeit.Timer(fn).repeat(repeat, n)) / n


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--trunk", type=int, nargs="+", default=[64, 64, 64])
    ap.add_argument("--batch", type=int, default=100)
    args = ap.parse_args()
    spec = nn.NetworkSpec(21, tuple(args.trunk))
    net = nn.Network.init(spec, np.random.default_rng(1))
    tgt = nn.Network.init(spec, np.random.default_rng(2))
    backends = [_pycore] + ([_core] if _core else [])
    results = {k.NAME: {name: best_time(fn) for name, fn in cases(k, net, tgt, args.batch).items()}
               for k in backends}
    names = list(next(iter(results.values())))
    print(f"trunk {args.trunk}, {spec.n_params} parameters")
    print(f"{'kernel':<22}" + "".join(f"{b:>14}" for b in results) + ("   speedup" if _core else ""))
    for name in names:
        row = [results[b][name] for b in results]
        line = f"{name:<22}" + "".join(f"{1e6 * t:>11.1f} us" for t in row)
        if _core:
            line += f"   {row[0] / row[1]:6.2f}x"
        print(line)
    if _core is None:
        print("compiled extension not built; only the numpy backend was timed")


if __name__ == "__main__":
    main()
