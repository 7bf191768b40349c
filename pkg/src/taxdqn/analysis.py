"""Post-training analytics: lambda sweeps, calibration, constant-policy
comparison, decision histograms and shallow regression trees."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy import stats

from . import nn
from .dqn import DecisionSamples, EvalResult, TrainConfig, constant_policy, evaluate_policy, network_policy, train
from .env import HISTORY_LEN, N_LEVELS, N_STATUS, TaxParams

log = logging.getLogger(__name__)

EVAL_EPISODES = 100
EVAL_STEPS = 250

# (params, config, spec) -> trained network; lets callers cache or parallelise training
Trainer = Callable[[TaxParams, TrainConfig, Optional[nn.NetworkSpec]], nn.Network]


def default_trainer(params: TaxParams, config: TrainConfig,
                    spec: Optional[nn.NetworkSpec] = None) -> nn.Network:
    return train(params, config, spec).net


def eval_seed(config: TrainConfig) -> int:
    """Seed for post-training evaluation rollouts, distinct from the training streams."""
    return int(np.random.SeedSequence([config.seed, 1]).generate_state(1)[0])


# --- lambda sweep ---------------------------------------------------------

@dataclass
class SweepRow:
    lam: float
    mean_u1: float = float("nan")
    std_u1: float = float("nan")
    discounted_utility: float = float("nan")
    error: str = ""

    @property
    def ok(self) -> bool:
        return not self.error


def probe(lam: float, params: TaxParams, config: TrainConfig, spec: Optional[nn.NetworkSpec] = None,
          trainer: Trainer = default_trainer) -> tuple[SweepRow, Optional[EvalResult]]:
    """Train at risk aversion ``lam`` and evaluate greedily; failures are reported, not raised."""
    p = params.with_(risk_aversion=float(lam))
    try:
        net = trainer(p, config, spec)
        ev = evaluate_policy(net, p, EVAL_EPISODES, EVAL_STEPS, seed=eval_seed(config))
    except (FloatingPointError, ValueError, RuntimeError, OSError) as exc:
        log.warning("lambda=%g failed: %s", lam, exc)
        return SweepRow(float(lam), error=f"{type(exc).__name__}: {exc}"), None
    return SweepRow(float(lam), ev.mean_u1, ev.std_u1, ev.discounted_utility), ev


def sweep_lambda(lams: Sequence[float], params: TaxParams, config: TrainConfig,
                 spec: Optional[nn.NetworkSpec] = None,
                 trainer: Trainer = default_trainer) -> list[SweepRow]:
    """One trained policy per lambda; mean and std of the evasion level over 100x250 rollouts."""
    return [probe(lam, params, config, spec, trainer)[0] for lam in lams]


def spearman_trend(rows: Sequence[SweepRow]) -> float:
    """Spearman correlation of lambda against mean u1 over successful rows.

    NaN when fewer than two rows succeeded or either variable is constant.
    """
    good = [r for r in rows if r.ok]
    if len(good) < 2:
        return float("nan")
    lam = np.array([r.lam for r in good])
    u = np.array([r.mean_u1 for r in good])
    if np.ptp(lam) == 0 or np.ptp(u) == 0:
        return float("nan")
    return float(stats.spearmanr(lam, u).statistic)


# --- calibration ------------------------------------------------------------

class BracketError(ValueError):
    def __init__(self, target: float, lo: SweepRow, hi: SweepRow):
        super().__init__(f"target {target} not bracketed: mean u1 {lo.mean_u1:.4f} at "
                         f"lambda={lo.lam}, {hi.mean_u1:.4f} at lambda={hi.lam}")
        self.lo, self.hi = lo, hi


@dataclass
class Calibration:
    lam: float
    mean_u1: float
    converged: bool
    probes: list = field(default_factory=list)


def calibrate_lambda(target: float, params: TaxParams, config: TrainConfig,
                     spec: Optional[nn.NetworkSpec] = None, lo: float = 0.0, hi: float = 7.0,
                     tolerance: float = 0.03, max_probes: int = 12,
                     trainer: Trainer = default_trainer) -> Calibration:
    """Bisect on lambda until the trained policy's mean u1 is within ``tolerance`` of ``target``.

    Mean u1 is assumed to fall with lambda.  Both endpoints are probed first;
    an endpoint already within tolerance is returned directly.
    """
    if not 0.0 < target <= 1.0:
        raise ValueError("target must lie in (0, 1]")
    if not lo < hi:
        raise ValueError("need lo < hi")
    probes: list[SweepRow] = []

    def run(lam):
        row = probe(lam, params, config, spec, trainer)[0]
        if not row.ok:
            raise RuntimeError(f"probe at lambda={lam} failed: {row.error}")
        probes.append(row)
        log.info("probe lambda=%.4f mean_u1=%.4f", lam, row.mean_u1)
        return row

    r_lo, r_hi = run(lo), run(hi)
    for r in (r_lo, r_hi):
        if abs(r.mean_u1 - target) <= tolerance:
            return Calibration(r.lam, r.mean_u1, True, probes)
    if not r_lo.mean_u1 > target > r_hi.mean_u1:
        raise BracketError(target, r_lo, r_hi)
    a, b = lo, hi
    best = min((r_lo, r_hi), key=lambda r: abs(r.mean_u1 - target))
    while len(probes) < max_probes:
        mid = 0.5 * (a + b)
        r = run(mid)
        if abs(r.mean_u1 - target) < abs(best.mean_u1 - target):
            best = r
        if abs(r.mean_u1 - target) <= tolerance:
            return Calibration(mid, r.mean_u1, True, probes)
        if r.mean_u1 > target:
            a = mid
        else:
            b = mid
    return Calibration(best.lam, best.mean_u1, False, probes)


# --- constant-policy comparison --------------------------------------------

@dataclass
class ConstantComparison:
    best_level: int
    best_utility: float
    trained_utility: float
    utilities: np.ndarray  # per constant level 0..100
    trained_mean_u1: float

    @property
    def best_u1(self) -> float:
        return self.best_level / 100.0

    @property
    def margin(self) -> float:
        return self.trained_utility - self.best_utility


def compare_constant_policy(net: nn.Network, params: TaxParams, episodes: int = EVAL_EPISODES,
                            steps: int = EVAL_STEPS, seed: int = 0) -> ConstantComparison:
    """Trained policy against every constant evasion level on common random numbers.

    Constant policies keep the trained network's closure decisions.
    """
    rule = network_policy(net)
    trained = evaluate_policy(rule, params, episodes, steps, seed=seed, keep_samples=False)
    utils = np.array([
        evaluate_policy(constant_policy(level, rule), params, episodes, steps, seed=seed,
                        keep_samples=False).discounted_utility
        for level in range(N_LEVELS)])
    best = int(np.argmax(utils))
    return ConstantComparison(best, float(utils[best]), trained.discounted_utility, utils, trained.mean_u1)


# --- histograms -------------------------------------------------------------

def _levels(samples: DecisionSamples) -> np.ndarray:
    return np.rint(np.asarray(samples.u1) * 100).astype(np.int64)


def histogram_u1(samples: DecisionSamples) -> np.ndarray:
    """Counts per evasion level 0..100."""
    if len(samples) == 0:
        raise ValueError("no samples")
    return np.bincount(_levels(samples), minlength=N_LEVELS)


def histogram_by_status(samples: DecisionSamples) -> np.ndarray:
    """Counts indexed ``[level, status - 1]`` (101 x 15)."""
    if len(samples) == 0:
        raise ValueError("no samples")
    out = np.zeros((N_LEVELS, N_STATUS), dtype=np.int64)
    np.add.at(out, (_levels(samples), np.asarray(samples.status) - 1), 1)
    return out


def histogram_by_hidden_sum(samples: DecisionSamples, bins: int = 25) -> tuple[np.ndarray, np.ndarray]:
    """Counts indexed ``[level, bin]`` over the history sum in [0, 5]; returns ``(counts, edges)``."""
    if len(samples) == 0:
        raise ValueError("no samples")
    if bins <= 0:
        raise ValueError("bins must be positive")
    edges = np.linspace(0.0, float(HISTORY_LEN), bins + 1)
    # integer-level sums avoid float drift at bin edges
    s = np.rint(np.asarray(samples.history) * 100).astype(np.int64).sum(axis=1)
    col = np.minimum((s * bins) // (100 * HISTORY_LEN), bins - 1)
    out = np.zeros((N_LEVELS, bins), dtype=np.int64)
    np.add.at(out, (_levels(samples), col), 1)
    return out, edges


# --- regression tree ----------------------------------------------------------

def feature_names(periodic: bool = False) -> list[str]:
    names = [f"status_{s}" for s in range(1, N_STATUS + 1)] + ["closure"]
    names += [f"hist_{k}" for k in range(1, HISTORY_LEN + 1)]  # hist_5 = most recent
    if periodic:
        names.append("phase")
    return names


def sample_features(samples: DecisionSamples, periodic: bool = False) -> np.ndarray:
    """Status indicators, closure flag, raw history fractions (and phase)."""
    n = len(samples)
    X = np.zeros((n, N_STATUS + 1 + HISTORY_LEN + int(periodic)))
    X[np.arange(n), np.asarray(samples.status) - 1] = 1.0
    X[:, N_STATUS] = np.asarray(samples.closure_offered, dtype=float)
    X[:, N_STATUS + 1:N_STATUS + 1 + HISTORY_LEN] = samples.history
    if periodic:
        X[:, -1] = samples.phase
    return X


@dataclass
class TreeNode:
    mean: float
    count: int
    feature: int = -1
    threshold: float = 0.0
    left: Optional["TreeNode"] = None
    right: Optional["TreeNode"] = None

    @property
    def is_leaf(self) -> bool:
        return self.left is None


@dataclass
class RegressionTree:
    root: TreeNode
    names: list
    max_depth: int
    min_impurity_decrease: float

    def depth(self, node: Optional[TreeNode] = None) -> int:
        node = node or self.root
        if node.is_leaf:
            return 0
        return 1 + max(self.depth(node.left), self.depth(node.right))

    def leaves(self) -> list[TreeNode]:
        out, stack = [], [self.root]
        while stack:
            n = stack.pop()
            if n.is_leaf:
                out.append(n)
            else:
                stack += [n.right, n.left]
        return out

    def predict(self, X: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(X)
        out = np.empty(len(X))
        for i, x in enumerate(X):
            n = self.root
            while not n.is_leaf:
                n = n.left if x[n.feature] <= n.threshold else n.right
            out[i] = n.mean
        return out

    def to_text(self) -> str:
        lines = []

        def walk(n: TreeNode, indent: int):
            pad = "  " * indent
            if n.is_leaf:
                lines.append(f"{pad}leaf: u1={n.mean:.4f} n={n.count}")
                return
            name = self.names[n.feature]
            lines.append(f"{pad}{name} <= {n.threshold:g}  (u1={n.mean:.4f} n={n.count})")
            walk(n.left, indent + 1)
            lines.append(f"{pad}{name} > {n.threshold:g}")
            walk(n.right, indent + 1)

        walk(self.root, 0)
        return "\n".join(lines) + "\n"

    def to_dot(self) -> str:
        lines = ["digraph tree {", "  node [shape=box];"]
        counter = [0]

        def walk(n: TreeNode) -> int:
            me = counter[0]
            counter[0] += 1
            if n.is_leaf:
                lines.append(f'  n{me} [label="u1={n.mean:.4f}\\nn={n.count}"];')
            else:
                lines.append(f'  n{me} [label="{self.names[n.feature]} <= {n.threshold:g}\\n'
                             f'n={n.count}"];')
                lo = walk(n.left)
                hi = walk(n.right)
                lines.append(f'  n{me} -> n{lo} [label="yes"];')
                lines.append(f'  n{me} -> n{hi} [label="no"];')
            return me

        walk(self.root)
        lines.append("}")
        return "\n".join(lines) + "\n"


def _best_split(X: np.ndarray, y: np.ndarray):
    """``(gain_in_sse, feature, threshold)`` of the best axis split, or None."""
    n = len(y)
    total_sse = float(((y - y.mean()) ** 2).sum())
    best = None
    for f in range(X.shape[1]):
        order = np.argsort(X[:, f], kind="stable")
        xs, ys = X[order, f], y[order]
        cut = np.nonzero(xs[1:] > xs[:-1])[0]  # split after these positions
        if len(cut) == 0:
            continue
        cs, cs2 = np.cumsum(ys), np.cumsum(ys * ys)
        nl = cut + 1.0
        nr = n - nl
        sl, sl2 = cs[cut], cs2[cut]
        sr, sr2 = cs[-1] - sl, cs2[-1] - sl2
        sse = (sl2 - sl * sl / nl) + (sr2 - sr * sr / nr)
        gain = total_sse - sse
        j = int(np.argmax(gain))  # first maximum = lowest threshold
        g = float(gain[j])
        if best is None or g > best[0] * (1 + 1e-12) + 1e-15:
            best = (g, f, 0.5 * (xs[cut[j]] + xs[cut[j] + 1]))
    return best


def fit_decision_tree(samples: DecisionSamples | tuple, max_depth: int = 3,
                      min_impurity_decrease: float = 1e-4, periodic: Optional[bool] = None) -> RegressionTree:
    """Greedy CART regression tree on the evasion level.

    A node splits only if the weighted variance decrease
    ``(SSE_parent - SSE_children) / N_total`` exceeds ``min_impurity_decrease``.
    Ties go to the lowest feature index, then the lowest threshold.
    ``samples`` may also be an ``(X, y)`` pair with feature names generated
    from the column count.
    """
    if isinstance(samples, tuple):
        X, y = (np.asarray(a, dtype=float) for a in samples)
        names = [f"x{i}" for i in range(X.shape[1])]
    else:
        if periodic is None:
            periodic = bool(np.any(np.asarray(samples.phase) != 0))
        X = sample_features(samples, periodic)
        y = np.asarray(samples.u1, dtype=float)
        names = feature_names(periodic)
    if len(y) < 2:
        raise ValueError("need at least two samples")
    if max_depth < 0:
        raise ValueError("max_depth must be non-negative")
    N = len(y)

    def grow(idx: np.ndarray, depth: int) -> TreeNode:
        ys = y[idx]
        node = TreeNode(float(ys.mean()), int(len(idx)))
        if depth >= max_depth or len(idx) < 2:
            return node
        split = _best_split(X[idx], ys)
        if split is None or split[0] / N <= min_impurity_decrease:
            return node
        _, f, thr = split
        mask = X[idx, f] <= thr
        node.feature, node.threshold = f, float(thr)
        node.left = grow(idx[mask], depth + 1)
        node.right = grow(idx[~mask], depth + 1)
        return node

    return RegressionTree(grow(np.arange(N), 0), names, max_depth, min_impurity_decrease)
