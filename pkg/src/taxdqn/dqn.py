"""Double DQN with two independently trained heads.

Head 1 scores the 101 evasion levels, head 2 the closure decision.  Both
heads bootstrap from the same shaped reward; each head's double-Q target
picks the next action with the online network and scores it with the target
network.
"""
from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional

import numpy as np

from . import nn
from .env import (
    HISTORY_LEN,
    N_LEVELS,
    N_STATUS,
    PERIOD,
    BatchEnv,
    FirmAction,
    FirmState,
    TaxEnv,
    TaxParams,
    clipped_utility,
)

log = logging.getLogger(__name__)

STREAMS = ("init", "env", "explore", "replay", "eval")


def rng_streams(seed: int) -> dict[str, np.random.Generator]:
    """Independent named generators derived from one seed."""
    children = np.random.SeedSequence(seed).spawn(len(STREAMS))
    return {name: np.random.default_rng(ss) for name, ss in zip(STREAMS, children)}


@dataclass(frozen=True)
class EpsilonSchedule:
    start: float = 0.5
    end: float = 0.1
    anneal: int = 5000

    def __post_init__(self):
        if self.start < self.end:
            raise ValueError("epsilon must not increase")
        if self.anneal <= 0:
            raise ValueError("anneal span must be positive")

    def __call__(self, episode: int) -> float:
        f = min(episode / self.anneal, 1.0)
        return (1.0 - f) * self.start + f * self.end


@dataclass(frozen=True)
class TrainConfig:
    episodes: int = 50_000
    steps: int = 250
    batch_size: int = 100
    target_sync: int = 10
    eps_start: float = 0.5
    eps_end: float = 0.1
    eps_anneal: int = 5000
    eval_interval: int = 100
    eval_episodes: int = 100
    replay_capacity: int = 1_000_000
    lr: float = 1e-4
    seed: int = 0

    def __post_init__(self):
        for name in ("episodes", "steps", "batch_size", "target_sync", "eps_anneal",
                     "eval_interval", "eval_episodes", "replay_capacity"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.eps_start < self.eps_end:
            raise ValueError("eps_start must be >= eps_end")

    @property
    def schedule(self) -> EpsilonSchedule:
        return EpsilonSchedule(self.eps_start, self.eps_end, self.eps_anneal)


DESK = TrainConfig(episodes=2000, eval_interval=50)
DESK_TRUNK = (64, 64, 64)


class ReplayBuffer:
    """Ring buffer of transitions stored as compact integer states.

    The next history is not stored: it is the current history shifted left
    with the taken evasion level appended.
    """

    def __init__(self, capacity: int, periodic: bool = False):
        if capacity <= 0:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self.periodic = periodic
        self.dim = 22 if periodic else 21
        self.status = np.zeros(capacity, dtype=np.int8)
        self.offered = np.zeros(capacity, dtype=bool)
        self.hist = np.zeros((capacity, HISTORY_LEN), dtype=np.int8)
        self.phase = np.zeros(capacity, dtype=np.int8)
        self.a1 = np.zeros(capacity, dtype=np.int64)
        self.a2 = np.zeros(capacity, dtype=np.int64)
        self.util = np.zeros(capacity)
        self.next_status = np.zeros(capacity, dtype=np.int8)
        self.next_offered = np.zeros(capacity, dtype=bool)
        self.next_phase = np.zeros(capacity, dtype=np.int8)
        self.size = 0
        self._pos = 0

    def __len__(self) -> int:
        return self.size

    def add(self, state: FirmState, levels: tuple, action: FirmAction, util: float,
            next_state: FirmState) -> None:
        if action.use_closure and not state.closure_offered:
            raise ValueError("stored action uses closure while not offered")
        i = self._pos
        self.status[i] = state.status
        self.offered[i] = state.closure_offered
        self.hist[i] = levels
        self.phase[i] = state.phase or 0
        self.a1[i] = action.evasion_level
        self.a2[i] = int(action.use_closure)
        self.util[i] = util
        self.next_status[i] = next_state.status
        self.next_offered[i] = next_state.closure_offered
        self.next_phase[i] = next_state.phase or 0
        self._pos = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def sample_indices(self, n: int, rng: np.random.Generator) -> np.ndarray:
        if self.size == 0:
            raise ValueError("cannot sample from an empty replay buffer")
        return rng.integers(0, self.size, n)

    def batch(self, idx: np.ndarray):
        """``(obs, a1, a2, util, next_obs, next_offered)`` for the given rows."""
        hist = self.hist[idx]
        obs = encode_batch(self.status[idx], self.offered[idx], hist, self.phase[idx], self.dim)
        nhist = np.empty_like(hist)
        nhist[:, :-1] = hist[:, 1:]
        nhist[:, -1] = self.a1[idx]
        nxt = encode_batch(self.next_status[idx], self.next_offered[idx], nhist,
                           self.next_phase[idx], self.dim)
        return obs, self.a1[idx], self.a2[idx], self.util[idx], nxt, self.next_offered[idx]


def encode_batch(status, offered, hist_levels, phase, dim: int) -> np.ndarray:
    n = len(status)
    out = np.full((n, dim), -0.5)
    out[np.arange(n), status.astype(np.int64) - 1] = 0.5
    out[:, 15] = offered - 0.5
    out[:, 16:21] = hist_levels / 100.0 - 0.5
    if dim == 22:
        out[:, 21] = phase / (PERIOD - 1) - 0.5
    return out


def select_action(net: nn.Network, observation: np.ndarray, closure_offered: bool,
                  epsilon: float, rng: np.random.Generator, kernels=None) -> FirmAction:
    """Epsilon-greedy per head; closure is never chosen when not offered."""
    explore1 = rng.random() < epsilon
    explore2 = rng.random() < epsilon
    if explore1 and explore2:
        g1 = g2 = 0
    else:
        k = kernels or nn.backend
        g1, g2 = k.greedy(net.flat, net.layout, observation, closure_offered)
    a1 = int(rng.integers(N_LEVELS)) if explore1 else g1
    a2 = int(rng.integers(2)) if explore2 else g2
    return FirmAction(a1, bool(a2) and closure_offered)


def ddqn_targets(online: nn.Network, target: nn.Network, batch, gamma: float):
    """Per-head double-Q targets for ``batch`` as returned by :meth:`ReplayBuffer.batch`."""
    _, _, _, util, next_obs, next_offered = batch
    if len(util) == 0:
        raise ValueError("empty batch")
    return nn._pycore.ddqn_targets(online.flat, target.flat, online.layout, np.asarray(util, float),
                                   np.asarray(next_obs, float), np.asarray(next_offered, bool), gamma)


@dataclass
class Learner:
    """Online/target networks plus optimizer state."""

    online: nn.Network
    target: nn.Network
    adam: nn.AdamState
    kernels: object = field(default=None, repr=False)

    def __post_init__(self):
        self.kernels = self.kernels or nn.backend
        self._grad = np.zeros_like(self.online.flat)

    @classmethod
    def create(cls, spec: nn.NetworkSpec, rng: np.random.Generator, lr: float = 1e-4,
               kernels=None) -> "Learner":
        online = nn.Network.init(spec, rng)
        return cls(online, online.clone(), nn.AdamState.zeros(spec.n_params, lr), kernels)

    def sync(self) -> None:
        self.target.copy_from(self.online)

    def step(self, batch, gamma: float) -> float:
        obs, a1, a2, util, nxt, noff = batch
        a = self.adam
        loss, a.t = self.kernels.train_step(
            self.online.flat, self.target.flat, self._grad, a.m, a.v, a.t, a.lr, a.beta1, a.beta2,
            a.eps, self.online.layout, obs, a1, a2, util, nxt, noff, gamma)
        if not np.isfinite(loss):
            raise FloatingPointError(f"non-finite loss {loss}")
        return loss


def train_step(learner: Learner, buffer: ReplayBuffer, config: TrainConfig, gamma: float,
               rng: np.random.Generator) -> float:
    """Sample a minibatch and apply one Adam step; returns the minibatch loss."""
    if len(buffer) < config.batch_size:
        raise ValueError("replay buffer holds fewer transitions than one minibatch")
    idx = buffer.sample_indices(config.batch_size, rng)
    return learner.step(buffer.batch(idx), gamma)


@dataclass
class EvalResult:
    discounted_utility: float
    discounted_revenue: float
    mean_reward: float
    mean_u1: float
    std_u1: float
    samples: Optional["DecisionSamples"] = None
    episode_utilities: Optional[np.ndarray] = None


@dataclass
class DecisionSamples:
    status: np.ndarray
    closure_offered: np.ndarray
    history: np.ndarray  # (n, 5) fractions
    phase: np.ndarray
    u1: np.ndarray
    u2: np.ndarray

    def __len__(self) -> int:
        return len(self.u1)

    @property
    def sum_history(self) -> np.ndarray:
        return self.history.sum(axis=1)


Policy = Callable[[np.ndarray, np.ndarray], tuple]


def network_policy(net: nn.Network) -> Policy:
    """Greedy batched policy of a trained network."""
    def act(obs, offered):
        q1, q2, _ = nn._pycore.forward(net.flat, net.layout, obs)
        return q1.argmax(axis=1), offered & (q2[:, 1] > q2[:, 0])
    return act


def constant_policy(level: int, closure_rule: Optional[Policy] = None) -> Policy:
    """Fixed evasion level; closure taken per ``closure_rule`` (never if None)."""
    def act(obs, offered):
        levels = np.full(len(offered), level, dtype=np.int64)
        if closure_rule is None:
            return levels, np.zeros(len(offered), dtype=bool)
        return levels, closure_rule(obs, offered)[1]
    return act


def evaluate_policy(policy, params: TaxParams, episodes: int = 100, steps: int = 250,
                    rng: Optional[np.random.Generator] = None, seed: Optional[int] = None,
                    keep_samples: bool = True) -> EvalResult:
    """Greedy lock-step rollouts from the start state.

    ``policy`` is a :class:`~taxdqn.nn.Network` or a batched policy callable.
    Pass ``seed`` (rather than ``rng``) to evaluate several policies on common
    random numbers.
    """
    if episodes <= 0 or steps <= 0:
        raise ValueError("episodes and steps must be positive")
    if isinstance(policy, nn.Network):
        policy = network_policy(policy)
    if rng is None:
        rng = np.random.default_rng(seed)
    env = BatchEnv(params, episodes).reset(rng)
    lam = params.risk_aversion
    gamma = params.discount
    disc_u = np.zeros(episodes)
    disc_r = np.zeros(episodes)
    total_r = 0.0
    n = episodes * steps
    u1 = np.empty((steps, episodes), dtype=np.int64)
    if keep_samples:
        st = np.empty((steps, episodes), dtype=np.int64)
        off = np.empty((steps, episodes), dtype=bool)
        hist = np.empty((steps, episodes, HISTORY_LEN), dtype=np.int64)
        ph = np.empty((steps, episodes), dtype=np.int64)
        u2 = np.empty((steps, episodes), dtype=bool)
    obs = np.empty((episodes, env.obs_dim))
    g = 1.0
    for k in range(steps):
        env.observations(obs)
        levels, use = policy(obs, env.offered)
        levels = np.asarray(levels, dtype=np.int64)
        use = np.asarray(use, dtype=bool) & env.offered
        if keep_samples:
            st[k] = env.status
            off[k] = env.offered
            hist[k] = env.history
            ph[k] = env.phase
            u2[k] = use
        u1[k] = levels
        raw = env.step(levels, use, rng)
        util = raw if lam == 0 else clipped_utility(raw, lam, params.utility_floor)
        disc_u += g * util
        disc_r += g * raw
        total_r += raw.sum()
        g *= gamma
    frac = u1 / 100.0
    samples = None
    if keep_samples:
        # episode-major sample order
        samples = DecisionSamples(
            st.T.reshape(n), off.T.reshape(n), hist.transpose(1, 0, 2).reshape(n, HISTORY_LEN) / 100.0,
            ph.T.reshape(n), frac.T.reshape(n), u2.T.reshape(n))
    return EvalResult(float(disc_u.mean()), float(disc_r.mean()), total_r / n,
                      float(frac.mean()), float(frac.std()), samples, disc_u)


@dataclass
class LogRecord:
    episode: int
    epsilon: float
    mean_loss: float
    eval_discounted_utility: float
    eval_mean_u1: float


@dataclass
class TrainResult:
    learner: Learner
    log: list
    config: TrainConfig
    params: TaxParams
    seconds: float = 0.0

    @property
    def net(self) -> nn.Network:
        return self.learner.online


def train(params: TaxParams, config: TrainConfig, spec: Optional[nn.NetworkSpec] = None,
          kernels=None, progress: Optional[Callable[[LogRecord], None]] = None) -> TrainResult:
    """Run the double-DQN loop and return the final network and its log."""
    env = TaxEnv(params)
    if spec is None:
        spec = nn.NetworkSpec(input_dim=env.obs_dim)
    if spec.input_dim != env.obs_dim:
        raise ValueError(f"network takes {spec.input_dim} inputs, scenario produces {env.obs_dim}")
    kernels = kernels or nn.backend
    rngs = rng_streams(config.seed)
    learner = Learner.create(spec, rngs["init"], config.lr, kernels)
    capacity = min(config.replay_capacity, config.episodes * config.steps)
    buffer = ReplayBuffer(capacity, params.scenario.periodic)
    schedule = config.schedule
    gamma = params.discount
    r_env, r_explore, r_replay = rngs["env"], rngs["explore"], rngs["replay"]
    x = np.empty(env.obs_dim)
    records = []
    loss_sum, loss_n = 0.0, 0
    t0 = time.perf_counter()
    for episode in range(config.episodes):
        eps = schedule(episode)
        state = env.reset(r_env)
        levels = (0,) * HISTORY_LEN
        for _ in range(config.steps):
            env.encode(state, x)
            action = select_action(learner.online, x, state.closure_offered, eps, r_explore, kernels)
            nxt, util, _ = env.step(state, action, r_env)
            buffer.add(state, levels, action, util, nxt)
            levels = levels[1:] + (action.evasion_level,)
            state = nxt
            if len(buffer) >= config.batch_size:
                loss_sum += train_step(learner, buffer, config, gamma, r_replay)
                loss_n += 1
        done = episode + 1
        if done % config.target_sync == 0:
            if not learner.online.all_finite():
                raise FloatingPointError(f"non-finite parameters after episode {done}")
            learner.sync()
        if done % config.eval_interval == 0:
            ev = evaluate_policy(learner.online, params, config.eval_episodes, config.steps,
                                 rng=rngs["eval"], keep_samples=False)
            rec = LogRecord(done, schedule(done), loss_sum / loss_n if loss_n else float("nan"),
                            ev.discounted_utility, ev.mean_u1)
            records.append(rec)
            loss_sum, loss_n = 0.0, 0
            log.info("episode %d eps %.3f loss %.4g eval %.6g mean_u1 %.3f",
                     rec.episode, rec.epsilon, rec.mean_loss, rec.eval_discounted_utility, rec.eval_mean_u1)
            if progress:
                progress(rec)
    return TrainResult(learner, records, config, params, time.perf_counter() - t0)
