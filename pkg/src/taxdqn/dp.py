"""Exact value iteration on a discretised history grid.

The history window is restricted to a small evasion grid (``{0, 1}`` by
default) which is exact for a risk-neutral firm, whose optimal evasion is
bang-bang.  Finer grids re-check that property instead of assuming it.
"""
from __future__ import annotations

import csv
import itertools
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .env import (
    BERNOULLI,
    HISTORY_LEN,
    N_STATUS,
    PERIOD,
    START_STATUS,
    FirmAction,
    FirmState,
    TaxParams,
    TransitionModel,
    builtin_transition_model,
    clipped_utility,
    reward_table,
)

log = logging.getLogger(__name__)

DEFAULT_GRID = (0.0, 1.0)
NEVER_REFERENCE_VALUE = 3254.6


class ConvergenceError(RuntimeError):
    pass


class StateSpace:
    """Enumeration of (status, offered, history-on-grid, phase)."""

    def __init__(self, grid: Sequence[float], periodic: bool = False):
        if len(grid) == 0:
            raise ValueError("evasion grid is empty")
        self.grid = np.asarray(sorted(grid), dtype=float)
        self.g = len(self.grid)
        self.n_hist = self.g ** HISTORY_LEN
        self.n_phase = PERIOD if periodic else 1
        self.periodic = periodic
        self.shape = (N_STATUS, 2, self.n_hist, self.n_phase)
        # digits[h, i]: grid index of history element i (0 = oldest)
        self.digits = np.array(
            list(itertools.product(range(self.g), repeat=HISTORY_LEN)), dtype=np.int64
        )

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))

    def encode(self, status: int, offered: bool, hist_idx: Sequence[int], phase: int = 0) -> int:
        h = 0
        for d in hist_idx:
            h = h * self.g + int(d)
        return int(np.ravel_multi_index((status - 1, int(offered), h, phase), self.shape))

    def decode(self, index: int) -> tuple:
        s, c, h, p = np.unravel_index(index, self.shape)
        return int(s) + 1, bool(c), tuple(int(d) for d in self.digits[h]), int(p)

    def history_index(self, history: Sequence[float]) -> int:
        h = 0
        for x in history:
            k = int(np.argmin(np.abs(self.grid - x)))
            if abs(self.grid[k] - x) > 1e-9:
                raise ValueError(f"history value {x} is not on the grid")
            h = h * self.g + k
        return h

    def next_history(self) -> np.ndarray:
        """``[h, u]`` -> history index after appending grid level ``u``."""
        tail = np.arange(self.n_hist) % (self.g ** (HISTORY_LEN - 1))
        return tail[:, None] * self.g + np.arange(self.g)[None, :]


@dataclass
class ValueTable:
    space: StateSpace
    values: np.ndarray  # shape space.shape
    policy_u1: np.ndarray  # grid index, shape space.shape
    policy_u2: np.ndarray  # bool, shape space.shape
    iterations: int = 0
    residual: float = np.inf

    def action(self, state: FirmState) -> FirmAction:
        s = state.status - 1
        h = self.space.history_index(state.history)
        p = state.phase or 0
        c = int(state.closure_offered)
        u = self.space.grid[self.policy_u1[s, c, h, p]]
        return FirmAction(int(round(u * 100)), bool(self.policy_u2[s, c, h, p]) and state.closure_offered)

    def value(self, state: FirmState) -> float:
        h = self.space.history_index(state.history)
        return float(self.values[state.status - 1, int(state.closure_offered), h, state.phase or 0])

    def start_value(self, params: TaxParams) -> float:
        return start_value(self, params)

    def batch_policy(self):
        """Greedy policy on encoded observations, for :func:`taxdqn.dqn.evaluate_policy`.

        Histories off the grid are snapped to the nearest grid point.
        """
        sp = self.space
        weights = sp.g ** np.arange(HISTORY_LEN - 1, -1, -1)

        def act(obs, offered):
            status = np.argmax(obs[:, :N_STATUS], axis=1)
            c = np.asarray(offered, dtype=np.int64)
            hist = obs[:, 16:16 + HISTORY_LEN] + 0.5
            digits = np.abs(hist[:, :, None] - sp.grid[None, None, :]).argmin(axis=2)
            h = digits @ weights
            phase = np.rint((obs[:, 21] + 0.5) * (PERIOD - 1)).astype(np.int64) if sp.periodic else 0
            u1 = self.policy_u1[status, c, h, phase]
            u2 = self.policy_u2[status, c, h, phase] & (c == 1)
            return np.rint(sp.grid[u1] * 100).astype(np.int64), u2

        return act


def start_value(table: ValueTable, params: TaxParams) -> float:
    """Value at status 15 with a clean history, averaged over the initial offer."""
    s = START_STATUS - 1
    h0 = 0
    sc = params.scenario
    v = table.values
    if sc.periodic:
        return float(v[s, 1, h0, 0])
    p = sc.offer_probability(None) if sc.kind != BERNOULLI else sc.p_offer
    return float(p * v[s, 1, h0, 0] + (1 - p) * v[s, 0, h0, 0])


class Backup:
    """Precomputed pieces of the Bellman operator for one parameter set."""

    def __init__(self, params: TaxParams, grid: Sequence[float] = DEFAULT_GRID,
                 model: Optional[TransitionModel] = None):
        self.params = params
        self.model = model or builtin_transition_model()
        sc = params.scenario
        self.space = sp = StateSpace(grid, sc.periodic)
        self.gamma = params.discount
        self.nh = sp.next_history()  # (n_hist, g)
        hist_vals = sp.grid[sp.digits]  # (n_hist, 5)
        self.raw = raw = reward_table(params, hist_vals, sp.grid)  # (15, H, g)
        lam = params.risk_aversion
        self.util = raw if lam == 0 else clipped_utility(raw, lam, params.utility_floor)
        # offer law for the next year, per current phase
        if sc.periodic:
            self.next_phase = (np.arange(PERIOD) + 1) % PERIOD
            self.p_next = np.array([1.0 if p == 0 else 0.0 for p in self.next_phase])
        else:
            self.next_phase = np.zeros(1, dtype=np.int64)
            self.p_next = np.array([sc.offer_probability(None) if sc.kind != BERNOULLI else sc.p_offer])

    def q_values(self, values: np.ndarray) -> np.ndarray:
        """Q[s, c, h, phase, u1, u2]; invalid (c=0, u2=1) entries are -inf."""
        sp = self.space
        # expected next value over the offer flag: W[j, h', phase_now]
        vn = values[:, :, :, self.next_phase]  # (15, 2, H, P)
        w = self.p_next * vn[:, 1] + (1 - self.p_next) * vn[:, 0]  # (15, H, P)
        wf = w.reshape(N_STATUS, -1)
        m = self.model
        # continuation per matrix: C[s, h', phase] = sum_j M[j, s] W[j, h', phase]
        cont = {k: (mat.T @ wf).reshape(N_STATUS, sp.n_hist, sp.n_phase)
                for k, mat in (("no", m.no_offer), ("a", m.accepted), ("d", m.declined))}
        # gather next history: G[s, h, u, phase]
        def gathered(c):
            return c[:, self.nh, :]  # (15, H, g, P)
        q = np.full(sp.shape + (sp.g, 2), -np.inf)
        imm = self.util[:, :, :, None]  # (15, H, g, 1)
        no = imm + self.gamma * gathered(cont["no"])
        a = imm + self.gamma * gathered(cont["a"])
        d = imm + self.gamma * gathered(cont["d"])
        # move u axis after phase: (15, H, P, g)
        q[:, 0, :, :, :, 0] = np.moveaxis(no, 2, 3)
        q[:, 1, :, :, :, 0] = np.moveaxis(d, 2, 3)
        q[:, 1, :, :, :, 1] = np.moveaxis(a, 2, 3)
        return q

    def __call__(self, values: np.ndarray) -> np.ndarray:
        q = self.q_values(values)
        return q.reshape(q.shape[:4] + (-1,)).max(axis=-1)


def _greedy(q: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    flat = q.reshape(q.shape[:4] + (-1,))
    # ties go to the largest evasion level, then to using closure
    rev = flat[..., ::-1]
    best = flat.shape[-1] - 1 - rev.argmax(axis=-1)
    return best // 2, (best % 2).astype(bool)


def bellman_backup(table: ValueTable, params: TaxParams, grid: Sequence[float] = DEFAULT_GRID,
                   backup: Optional[Backup] = None) -> tuple[ValueTable, float]:
    """One synchronous sweep; returns the new table and the sup-norm change."""
    backup = backup or Backup(params, grid)
    q = backup.q_values(table.values)
    new = q.reshape(q.shape[:4] + (-1,)).max(axis=-1)
    u1, u2 = _greedy(q)
    res = float(np.abs(new - table.values).max())
    return ValueTable(backup.space, new, u1, u2, table.iterations + 1, res), res


def empty_table(space: StateSpace) -> ValueTable:
    return ValueTable(space, np.zeros(space.shape), np.zeros(space.shape, dtype=np.int64),
                      np.zeros(space.shape, dtype=bool))


def solve(params: TaxParams, grid: Sequence[float] = DEFAULT_GRID, tolerance: float = 1e-9,
          max_iter: int = 1_000_000, model: Optional[TransitionModel] = None) -> ValueTable:
    """Value iteration until the sup-norm change drops to ``tolerance``."""
    if tolerance <= 0:
        raise ValueError("tolerance must be positive")
    backup = Backup(params, grid, model)
    v = np.zeros(backup.space.shape)
    res = np.inf
    for it in range(1, max_iter + 1):
        nv = backup(v)
        res = float(np.abs(nv - v).max())
        v = nv
        if res <= tolerance:
            break
    else:
        raise ConvergenceError(f"no convergence after {max_iter} sweeps (residual {res:g})")
    q = backup.q_values(v)
    u1, u2 = _greedy(q)
    log.debug("value iteration converged in %d sweeps, residual %.3g", it, res)
    return ValueTable(backup.space, v, u1, u2, it, res)


def calibrate_discount(params: TaxParams, target: float = NEVER_REFERENCE_VALUE,
                       lo: float = 0.9, hi: float = 0.999, rel_tol: float = 1e-9,
                       grid: Sequence[float] = DEFAULT_GRID) -> float:
    """Bisection on the discount factor so that the start value hits ``target``."""
    def f(g):
        return start_value(solve(params.with_(discount=g), grid, tolerance=1e-8), params) - target

    flo, fhi = f(lo), f(hi)
    if flo * fhi > 0:
        raise ValueError(f"target {target} not bracketed: f({lo})={flo:+.3f}, f({hi})={fhi:+.3f}")
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        fm = f(mid)
        if abs(fm) <= rel_tol * target or hi - lo < 1e-15:
            return mid
        if (fm < 0) == (flo < 0):
            lo, flo = mid, fm
        else:
            hi = mid
    return 0.5 * (lo + hi)


def export_csv(table: ValueTable, path: str | Path) -> Path:
    """One row per enumerated state: decoded key, value and greedy action."""
    sp = table.space
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["status", "closure_offered"] + [f"h{i}" for i in range(1, HISTORY_LEN + 1)]
                   + ["phase", "value", "u1", "u2"])
        for idx in range(sp.size):
            s, c, digits, p = sp.decode(idx)
            flat = np.unravel_index(idx, sp.shape)
            w.writerow([s, int(c)] + [repr(float(sp.grid[d])) for d in digits]
                       + [p, repr(float(table.values[flat])),
                          repr(float(sp.grid[table.policy_u1[flat]])),
                          int(table.policy_u2[flat] and c)])
    return path
