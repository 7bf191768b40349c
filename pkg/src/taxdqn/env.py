"""Markov tax environment for a single firm.

Tax statuses are integers 1..15:

* 1..5   audited, the audit covering ``status`` past filings;
* 6..10  closure used, ``status - 5`` years since the last audit or closure;
* 11..15 unaudited for ``status - 10`` years.

Transition matrices are column-stochastic: ``M[i, j]`` is the probability of
moving to status ``i + 1`` from status ``j + 1``.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import NamedTuple, Optional, Sequence

import numpy as np

N_STATUS = 15
HISTORY_LEN = 5
N_LEVELS = 101
START_STATUS = 15

NEVER = "never"
BERNOULLI = "bernoulli"
ALWAYS = "always"
PERIODIC = "periodic"
SCENARIO_KINDS = (NEVER, BERNOULLI, ALWAYS, PERIODIC)
PERIOD = 5


def _audit_matrix(p_short: float, p_long: float) -> np.ndarray:
    m = np.zeros((N_STATUS, N_STATUS))
    # audited (1..5) -> audited 1 year / unaudited 1 year
    for j in range(0, 5):
        m[0, j] = p_short
        m[10, j] = 1.0 - p_short
    # closure (6..10) and unaudited 1 year (11) -> 2 / 12
    for j in range(5, 11):
        m[1, j] = p_short
        m[11, j] = 1.0 - p_short
    m[2, 11] = p_short
    m[12, 11] = 1.0 - p_short
    m[3, 12] = p_short
    m[13, 12] = 1.0 - p_short
    for j in (13, 14):
        m[4, j] = p_long
        m[14, j] = 1.0 - p_long
    return m


def _closure_matrix() -> np.ndarray:
    m = np.zeros((N_STATUS, N_STATUS))
    m[5, 0:11] = 1.0
    for j, i in zip(range(11, 15), range(6, 10)):
        m[i, j] = 1.0
    return m


class TransitionModel(NamedTuple):
    """Status transition matrices: no offer, offer accepted, offer declined."""

    no_offer: np.ndarray
    accepted: np.ndarray
    declined: np.ndarray

    def select(self, closure_offered: bool, use_closure: bool) -> np.ndarray:
        if not closure_offered:
            return self.no_offer
        return self.accepted if use_closure else self.declined

    def check(self, tol: float = 1e-12) -> None:
        for name, m in zip(self._fields, self):
            if m.shape != (N_STATUS, N_STATUS):
                raise ValueError(f"{name}: shape {m.shape}")
            if np.any(m < 0) or np.any(m > 1):
                raise ValueError(f"{name}: entries outside [0, 1]")
            err = np.abs(m.sum(axis=0) - 1.0).max()
            if err > tol:
                raise ValueError(f"{name}: column sums off by {err:g}")
        if not np.all((self.accepted == 0) | (self.accepted == 1)):
            raise ValueError("accepted: closure transition must be deterministic")


def builtin_transition_model() -> TransitionModel:
    """The three transition matrices of the reference tax system."""
    return TransitionModel(
        no_offer=_audit_matrix(0.0025, 0.04),
        accepted=_closure_matrix(),
        declined=_audit_matrix(0.0075, 0.12),
    )


def export_transition_csv(model: TransitionModel, directory: str | Path) -> list[Path]:
    """Write each matrix as a 15x15 CSV (row = next status, column = current)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for name, m in zip(model._fields, model):
        path = directory / f"transition_{name}.csv"
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["next_status"] + [f"from_{j}" for j in range(1, N_STATUS + 1)])
            for i in range(N_STATUS):
                w.writerow([i + 1] + [repr(float(v)) for v in m[i]])
        paths.append(path)
    return paths


@dataclass(frozen=True)
class ClosureScenario:
    """Law governing whether the closure option is offered each year."""

    kind: str = NEVER
    p_offer: float = 0.0

    def __post_init__(self):
        if self.kind not in SCENARIO_KINDS:
            raise ValueError(f"unknown closure scenario {self.kind!r}")
        if self.kind == BERNOULLI and not 0.0 <= self.p_offer <= 1.0:
            raise ValueError("p_offer must lie in [0, 1]")

    @classmethod
    def parse(cls, label: str) -> "ClosureScenario":
        """Parse ``never``, ``always``, ``periodic`` or ``bernoulli:0.2``."""
        kind, _, arg = label.strip().lower().partition(":")
        if kind == BERNOULLI:
            return cls(BERNOULLI, float(arg or 0.2))
        return cls(kind)

    @property
    def label(self) -> str:
        if self.kind == BERNOULLI:
            return f"{BERNOULLI}:{self.p_offer:g}"
        return self.kind

    @property
    def periodic(self) -> bool:
        return self.kind == PERIODIC

    def offer_probability(self, phase: Optional[int] = None) -> float:
        """Probability that the option is offered in a year with the given phase."""
        if self.kind == NEVER:
            return 0.0
        if self.kind == ALWAYS:
            return 1.0
        if self.kind == BERNOULLI:
            return self.p_offer
        return 1.0 if phase % PERIOD == 0 else 0.0


@dataclass(frozen=True)
class TaxParams:
    tax_rate: float = 0.24
    penalty: float = 0.24
    prompt_discount: float = 0.6
    closure_cost: float = 0.023
    revenue: float = 100.0
    discount: float = 0.97
    risk_aversion: float = 0.0
    scenario: ClosureScenario = field(default_factory=ClosureScenario)
    utility_floor: float = -1.0

    def __post_init__(self):
        if not 0.0 < self.discount < 1.0:
            raise ValueError("discount must lie in (0, 1)")
        for name in ("tax_rate", "penalty", "prompt_discount", "closure_cost"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")
        if self.revenue <= 0:
            raise ValueError("revenue must be positive")
        if self.risk_aversion < 0:
            raise ValueError("risk_aversion must be nonnegative")

    def with_(self, **kw) -> "TaxParams":
        return replace(self, **kw)


class FirmState(NamedTuple):
    status: int
    closure_offered: bool
    history: tuple  # 5 fractions, last element = most recent decision
    phase: Optional[int] = None


class FirmAction(NamedTuple):
    evasion_level: int  # 0..100
    use_closure: bool = False

    @property
    def u1(self) -> float:
        return self.evasion_level / 100.0


def validate_action(state: FirmState, action: FirmAction) -> None:
    if not 0 <= action.evasion_level < N_LEVELS:
        raise ValueError(f"evasion level {action.evasion_level} outside 0..100")
    if action.use_closure and not state.closure_offered:
        raise ValueError("closure used while not offered")


def reward_value(status: int, history: Sequence[float], u1: float, params: TaxParams) -> float:
    """Yearly after-tax revenue for raw numbers; may be negative after deep audits."""
    r = params.tax_rate
    base = 1.0 - r + r * u1
    if 11 <= status <= 15:
        return params.revenue * base
    if 6 <= status <= 10:
        return params.revenue * (base - params.closure_cost * (status - 5))
    if 1 <= status <= 5:
        back = 0.0
        weighted = 0.0
        for i in range(1, status + 1):
            h = history[HISTORY_LEN - i]
            back += h
            weighted += i * h
        return params.revenue * (
            base - r * back - r * params.prompt_discount * params.penalty * weighted
        )
    raise ValueError(f"invalid tax status {status}")


def audit_weights(params: TaxParams) -> np.ndarray:
    """``W[s-1, i]``: back tax plus penalty charged per unit of history element ``i`` in status ``s``."""
    r = params.tax_rate
    w = np.zeros((N_STATUS, HISTORY_LEN))
    for s in range(1, 6):
        for i in range(1, s + 1):
            w[s - 1, HISTORY_LEN - i] = r + r * params.prompt_discount * params.penalty * i
    return w


def closure_charges(params: TaxParams) -> np.ndarray:
    c = np.zeros(N_STATUS)
    c[5:10] = params.closure_cost * np.arange(1, 6)
    return c


def reward_table(params: TaxParams, histories: np.ndarray, levels: np.ndarray) -> np.ndarray:
    """Raw rewards ``[status-1, history row, level]`` for every combination (vectorised)."""
    histories = np.atleast_2d(np.asarray(histories, dtype=float))
    u = np.asarray(levels, dtype=float)
    r = params.tax_rate
    audit = audit_weights(params) @ histories.T  # (15, H)
    base = 1.0 - r + r * u  # (g,)
    return params.revenue * (base[None, None, :] - closure_charges(params)[:, None, None]
                             - audit[:, :, None])


def reward(state: FirmState, action: FirmAction, params: TaxParams) -> float:
    validate_action(state, action)
    return reward_value(state.status, state.history, action.u1, params)


def utility(z, lam: float):
    """CRRA utility; the logarithm is used within 1e-9 of ``lam == 1``."""
    if lam == 0:
        return z
    if np.any(np.asarray(z) <= 0):
        raise ValueError("CRRA utility needs a positive argument; clip first")
    if abs(lam - 1.0) < 1e-9:
        return np.log(z)
    return np.power(z, 1.0 - lam) / (1.0 - lam)


def clip_threshold(lam: float, floor: float = -1.0) -> float:
    """Smallest argument passed to the utility.

    For ``lam > 1`` this solves ``U(z) = floor``; at the log limit it is
    ``exp(floor)``.  For ``0 < lam < 1`` the utility is bounded below by 0 so
    only the domain boundary is enforced.
    """
    if lam == 0:
        return -math.inf
    if abs(lam - 1.0) < 1e-9:
        return math.exp(floor)
    if lam < 1.0:
        return 0.0
    return (floor * (1.0 - lam)) ** (1.0 / (1.0 - lam))


def clipped_utility(z, lam: float, floor: float = -1.0):
    """Utility with its argument clipped below at :func:`clip_threshold`."""
    if lam == 0:
        return z
    thresh = clip_threshold(lam, floor)
    arr = np.maximum(np.asarray(z, dtype=float), thresh)
    if 0 < lam < 1 - 1e-9:
        out = np.power(arr, 1.0 - lam) / (1.0 - lam)
    elif abs(lam - 1.0) < 1e-9:
        out = np.log(arr)
    else:
        out = np.power(arr, 1.0 - lam) / (1.0 - lam)
        # exact floor at and below the threshold
        out = np.where(arr <= thresh, floor, out)
    return float(out) if np.ndim(out) == 0 else out


def initial_state(params: TaxParams, rng: Optional[np.random.Generator] = None) -> FirmState:
    """Status 15, clean history; the offer flag follows the scenario at year 0."""
    sc = params.scenario
    phase = 0 if sc.periodic else None
    if sc.kind == BERNOULLI:
        if rng is None:
            raise ValueError("a generator is needed to draw the initial offer")
        offered = bool(rng.random() < sc.p_offer)
    else:
        offered = sc.offer_probability(phase) == 1.0
    return FirmState(START_STATUS, offered, (0.0,) * HISTORY_LEN, phase)


class TaxEnv:
    """Environment bound to one parameter set, with cached sampling tables."""

    def __init__(self, params: TaxParams, model: Optional[TransitionModel] = None):
        self.params = params
        self.model = model or builtin_transition_model()
        self.model.check()
        self.lam = params.risk_aversion
        self._thresh = clip_threshold(self.lam, params.utility_floor)
        self.obs_dim = 22 if params.scenario.periodic else 21
        # per (matrix, column): next statuses and cumulative probabilities
        self._tables = []
        for m in self.model:
            cols = []
            for j in range(N_STATUS):
                nz = np.flatnonzero(m[:, j])
                cols.append(((nz + 1).tolist(), np.cumsum(m[nz, j]).tolist()))
            self._tables.append(cols)

    def reset(self, rng: np.random.Generator) -> FirmState:
        return initial_state(self.params, rng)

    def _next_status(self, status: int, offered: bool, use: bool, rng) -> int:
        k = 0 if not offered else (1 if use else 2)
        nexts, cum = self._tables[k][status - 1]
        if len(nexts) == 1:
            return nexts[0]
        x = rng.random()
        for s, c in zip(nexts, cum):
            if x < c:
                return s
        return nexts[-1]

    def _next_offer(self, phase: Optional[int], rng) -> tuple[bool, Optional[int]]:
        sc = self.params.scenario
        if sc.kind == NEVER:
            return False, None
        if sc.kind == ALWAYS:
            return True, None
        if sc.kind == BERNOULLI:
            return bool(rng.random() < sc.p_offer), None
        phase = (phase + 1) % PERIOD
        return phase == 0, phase

    def step(self, state: FirmState, action: FirmAction, rng):
        """Advance one year.  Returns ``(next_state, clipped_utility, raw_reward)``."""
        validate_action(state, action)
        u1 = action.evasion_level / 100.0
        raw = reward_value(state.status, state.history, u1, self.params)
        util = self.shape_reward(raw)
        status = self._next_status(state.status, state.closure_offered, action.use_closure, rng)
        offered, phase = self._next_offer(state.phase, rng)
        history = state.history[1:] + (u1,)
        return FirmState(status, offered, history, phase), util, raw

    def shape_reward(self, raw: float) -> float:
        lam = self.lam
        if lam == 0:
            return raw
        floor = self.params.utility_floor
        z = max(raw, self._thresh)
        if abs(lam - 1.0) < 1e-9:
            return math.log(z)
        if lam > 1.0 and z <= self._thresh:
            return floor
        return z ** (1.0 - lam) / (1.0 - lam)

    def encode(self, state: FirmState, out: Optional[np.ndarray] = None) -> np.ndarray:
        return encode_observation(state, self.params, out)


def encode_observation(state: FirmState, params: TaxParams, out: Optional[np.ndarray] = None) -> np.ndarray:
    """One-hot status, offer flag, history (and phase/4), all shifted by -0.5."""
    dim = 22 if params.scenario.periodic else 21
    if out is None:
        out = np.empty(dim)
    out.fill(-0.5)
    out[state.status - 1] = 0.5
    if state.closure_offered:
        out[15] = 0.5
    for i, h in enumerate(state.history):
        out[16 + i] = h - 0.5
    if dim == 22:
        out[21] = state.phase / (PERIOD - 1) - 0.5
    return out


def step(state: FirmState, action: FirmAction, params: TaxParams, rng):
    """Functional form of :meth:`TaxEnv.step` (builds a throwaway env)."""
    return TaxEnv(params).step(state, action, rng)


class BatchEnv:
    """Lock-step rollouts of ``n`` independent firms.

    Every step draws exactly ``2n`` uniforms whatever the actions are, so two
    policies run from the same generator state see common random numbers.
    """

    def __init__(self, params: TaxParams, n: int, model: Optional[TransitionModel] = None):
        self.params = params
        self.n = n
        model = model or builtin_transition_model()
        model.check()
        # cum[k, j, :] cumulative distribution of the next status from status j+1
        self.cum = np.cumsum(np.stack([m.T for m in model]), axis=2)
        self.cum[:, :, -1] = 1.0
        self.obs_dim = 22 if params.scenario.periodic else 21
        self._audit_w = audit_weights(params)
        self._closure = closure_charges(params)
        self._R = params.revenue
        self._r = params.tax_rate

    def reset(self, rng: np.random.Generator):
        sc = self.params.scenario
        n = self.n
        self.status = np.full(n, START_STATUS, dtype=np.int64)
        self.history = np.zeros((n, HISTORY_LEN), dtype=np.int64)  # evasion levels 0..100
        self.phase = np.zeros(n, dtype=np.int64)
        u = rng.random(n)
        if sc.kind == BERNOULLI:
            self.offered = u < sc.p_offer
        else:
            self.offered = np.full(n, sc.offer_probability(0) == 1.0)
        return self

    def rewards(self, levels: np.ndarray) -> np.ndarray:
        s = self.status - 1
        h = self.history / 100.0
        base = 1.0 - self._r + self._r * levels / 100.0
        audit = np.einsum("ij,ij->i", self._audit_w[s], h)
        return self._R * (base - self._closure[s] - audit)

    def observations(self, out: Optional[np.ndarray] = None) -> np.ndarray:
        n = self.n
        if out is None:
            out = np.empty((n, self.obs_dim))
        out.fill(-0.5)
        out[np.arange(n), self.status - 1] = 0.5
        out[:, 15] = self.offered - 0.5
        out[:, 16:21] = self.history / 100.0 - 0.5
        if self.obs_dim == 22:
            out[:, 21] = self.phase / (PERIOD - 1) - 0.5
        return out

    def step(self, levels: np.ndarray, use_closure: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        """Apply actions in place and return the raw rewards."""
        levels = np.asarray(levels, dtype=np.int64)
        use_closure = np.asarray(use_closure, dtype=bool)
        if np.any(use_closure & ~self.offered):
            raise ValueError("closure used while not offered")
        raw = self.rewards(levels)
        k = np.where(self.offered, np.where(use_closure, 1, 2), 0)
        u = rng.random(self.n)
        cum = self.cum[k, self.status - 1]
        self.status = (u[:, None] >= cum).sum(axis=1) + 1
        sc = self.params.scenario
        v = rng.random(self.n)
        if sc.kind == BERNOULLI:
            self.offered = v < sc.p_offer
        elif sc.periodic:
            self.phase = (self.phase + 1) % PERIOD
            self.offered = self.phase == 0
        else:
            self.offered = np.full(self.n, sc.kind == ALWAYS)
        self.history[:, :-1] = self.history[:, 1:]
        self.history[:, -1] = levels
        return raw
