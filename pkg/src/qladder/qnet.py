"""Deep Q-network: numpy MLP with hand-written backprop and Adam, replay
memory, epsilon-greedy exploration, target network and the training loop."""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from .domain import ConfigSpace, RewardWeights, check_metric
from .reward import FIXED, NormBounds, PenaltyPolicy, reward

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "qladder-dqn-checkpoint"
CHECKPOINT_VERSION = 1
STATE_DIM = 4


class InvariantError(RuntimeError):
    """An internal consistency check failed."""


# -- network ------------------------------------------------------------------

class MLP:
    """Fully connected ReLU network with a linear output layer."""

    def __init__(self, sizes: Sequence[int], rng: Optional[np.random.Generator] = None):
        self._layout(sizes)
        rng = rng if rng is not None else np.random.default_rng(0)
        # He/Kaiming fan-in init, zero biases
        for w in self.weights:
            w[...] = rng.standard_normal(w.shape) * np.sqrt(2.0 / w.shape[0])

    def _layout(self, sizes, flat: Optional[np.ndarray] = None) -> None:
        # every weight and bias is a view into one flat vector so the
        # optimizer and target syncs work on a single array
        self.sizes = tuple(int(s) for s in sizes)
        if len(self.sizes) < 2:
            raise ValueError("need at least input and output sizes")
        pairs = list(zip(self.sizes[:-1], self.sizes[1:]))
        n = sum(a * b + b for a, b in pairs)
        self.flat = np.zeros(n) if flat is None else flat
        self.weights, self.biases = [], []
        at = 0
        for a, b in pairs:
            self.weights.append(self.flat[at:at + a * b].reshape(a, b))
            at += a * b
            self.biases.append(self.flat[at:at + b])
            at += b

    @classmethod
    def zeros(cls, sizes: Sequence[int]) -> "MLP":
        net = cls(sizes)
        for w in net.weights:
            w[...] = 0.0
        return net

    @property
    def params(self) -> list:
        return [p for pair in zip(self.weights, self.biases) for p in pair]

    def forward(self, x: np.ndarray) -> np.ndarray:
        h = x
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ w + b
            if i < last:
                h = np.maximum(h, 0.0)
        return h

    def forward_cache(self, x: np.ndarray):
        acts = [x]
        h = x
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ w + b
            if i < last:
                h = np.maximum(h, 0.0)
                acts.append(h)
        return h, acts

    def backward(self, acts: list, grad_out: np.ndarray) -> list:
        """Gradients in :attr:`params` order given dLoss/dOutput."""
        grads = [None] * (2 * len(self.weights))
        g = grad_out
        for i in range(len(self.weights) - 1, -1, -1):
            a = acts[i]
            grads[2 * i] = a.T @ g
            grads[2 * i + 1] = g.sum(axis=0)
            if i > 0:
                g = (g @ self.weights[i].T) * (a > 0)
        return grads

    def copy(self) -> "MLP":
        net = MLP.__new__(MLP)
        net._layout(self.sizes, self.flat.copy())
        return net

    def load_from(self, other: "MLP") -> None:
        self.flat[...] = other.flat

    def to_dict(self) -> dict:
        return {"sizes": list(self.sizes), "weights": [w.tolist() for w in self.weights],
                "biases": [b.tolist() for b in self.biases]}

    @classmethod
    def from_dict(cls, d: dict) -> "MLP":
        net = cls.__new__(cls)
        net._layout(d["sizes"])
        for dst, w in zip(net.weights, d["weights"]):
            dst[...] = np.array(w, dtype=float).reshape(dst.shape)
        for dst, b in zip(net.biases, d["biases"]):
            dst[...] = np.array(b, dtype=float)
        return net


def forward(net: MLP, state) -> np.ndarray:
    x = np.asarray(state, dtype=float)
    if not np.all(np.isfinite(x)):
        raise ValueError("state contains non-finite values")
    return net.forward(x)


class Adam:
    """Adam over a single flat parameter vector, updated in place."""

    def __init__(self, flat: np.ndarray, lr: float = 0.005, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.flat = flat
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = np.zeros_like(flat)
        self.v = np.zeros_like(flat)
        self.t = 0
        self._buf = np.empty_like(flat)

    def step(self, grads) -> None:
        g = np.concatenate([x.ravel() for x in grads]) if isinstance(grads, list) else grads
        self.t += 1
        buf = self._buf
        self.m *= self.beta1
        np.multiply(g, 1.0 - self.beta1, out=buf)
        self.m += buf
        self.v *= self.beta2
        np.multiply(g, g, out=buf)
        buf *= 1.0 - self.beta2
        self.v += buf
        step = self.lr / (1.0 - self.beta1 ** self.t)
        np.divide(self.v, 1.0 - self.beta2 ** self.t, out=buf)
        np.sqrt(buf, out=buf)
        buf += self.eps
        np.divide(self.m, buf, out=buf)
        buf *= step
        self.flat -= buf


# -- replay memory --------------------------------------------------------------

@dataclass
class Batch:
    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_states: np.ndarray
    dones: np.ndarray

    def __len__(self):
        return len(self.actions)


class ReplayMemory:
    """Fixed-capacity ring buffer; the oldest transition is evicted first."""

    def __init__(self, capacity: int = 10_000, state_dim: int = STATE_DIM):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self.states = np.zeros((capacity, state_dim))
        self.next_states = np.zeros((capacity, state_dim))
        self.actions = np.zeros(capacity, dtype=np.int64)
        self.rewards = np.zeros(capacity)
        self.dones = np.zeros(capacity, dtype=bool)
        self._next = 0
        self._size = 0

    def __len__(self):
        return self._size

    def push(self, state, action: int, reward_: float, next_state, done: bool) -> None:
        i = self._next
        self.states[i] = state
        self.actions[i] = action
        self.rewards[i] = reward_
        self.next_states[i] = next_state
        self.dones[i] = done
        self._next = (i + 1) % self.capacity
        self._size = min(self._size + 1, self.capacity)

    def _order(self) -> np.ndarray:
        if self._size < self.capacity:
            return np.arange(self._size)
        return (np.arange(self.capacity) + self._next) % self.capacity

    def transitions(self) -> Batch:
        """Stored transitions, oldest first."""
        return self._gather(self._order())

    def sample(self, n: int, rng: np.random.Generator) -> Batch:
        if self._size == 0:
            raise ValueError("cannot sample from an empty memory")
        return self._gather(rng.integers(0, self._size, n))

    def _gather(self, idx) -> Batch:
        return Batch(self.states[idx], self.actions[idx], self.rewards[idx],
                     self.next_states[idx], self.dones[idx])


# -- configuration and exploration -------------------------------------------------

@dataclass(frozen=True)
class DqnConfig:
    learning_rate: float = 0.005
    gamma: float = 0.7
    batch_size: int = 128
    memory_capacity: int = 10_000
    target_sync: int = 10
    eps_start: float = 0.8
    eps_end: float = 0.05
    episodes: int = 2000
    hidden: tuple = (256, 128, 64)
    infeasible_penalty: float = 1.0
    # "transition": C counts environment steps; "episode": C counts episodes
    sync_unit: str = "transition"
    # abort when memory is still below batch_size after this many transitions
    warmup_limit: Optional[int] = None

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if not 0 <= self.gamma < 1:
            raise ValueError("gamma must lie in [0, 1)")
        if not 0 < self.eps_end <= self.eps_start <= 1:
            raise ValueError("need 0 < eps_end <= eps_start <= 1")
        if not 1 <= self.batch_size <= self.memory_capacity:
            raise ValueError("need 1 <= batch_size <= memory_capacity")
        if self.target_sync < 1:
            raise ValueError("target_sync must be >= 1")
        if self.episodes < 1:
            raise ValueError("episodes must be >= 1")
        if self.sync_unit not in ("transition", "episode"):
            raise ValueError("sync_unit must be 'transition' or 'episode'")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")


def decay_epsilon(e: int, config: DqnConfig = DqnConfig()) -> float:
    """Linear decay from eps_start at e=0 to eps_end at e=episodes, floored."""
    if e < 0:
        raise ValueError("episode index must be >= 0")
    f = min(1.0, e / config.episodes)
    # convex-combination form hits both endpoints exactly in floating point
    return max(config.eps_end, (1.0 - f) * config.eps_start + f * config.eps_end)


def _allowed_indices(allowed, n: int) -> np.ndarray:
    if allowed is None:
        return np.arange(n)
    allowed = np.asarray(allowed)
    if allowed.dtype == bool:
        allowed = np.flatnonzero(allowed)
    return np.unique(allowed.astype(np.int64))


def greedy_action(q_values: np.ndarray, allowed=None) -> int:
    """Argmax over the allowed actions; ties go to the lowest index."""
    idx = _allowed_indices(allowed, len(q_values))
    if idx.size == 0:
        raise ValueError("no allowed actions")
    return int(idx[np.argmax(q_values[idx])])


def select_action(net: MLP, state, eps: float, allowed, rng: np.random.Generator) -> int:
    """Epsilon-greedy choice restricted to ``allowed`` (indices or boolean mask; None = all)."""
    idx = _allowed_indices(allowed, net.sizes[-1])
    if idx.size == 0:
        raise ValueError("no allowed actions")
    if rng.random() < eps:
        return int(idx[rng.integers(idx.size)])
    return greedy_action(forward(net, state), idx)


def sync_target(net: MLP, target_net: MLP, step: int, C: int) -> bool:
    if C < 1:
        raise ValueError("C must be >= 1")
    if step % C == 0:
        target_net.load_from(net)
        return True
    return False


# -- temporal-difference update -------------------------------------------------------

def td_targets(target_net: MLP, batch: Batch, gamma: float) -> np.ndarray:
    """Reward plus discounted max target-network value; reward alone on terminal steps."""
    nxt = target_net.forward(batch.next_states).max(axis=1)
    return batch.rewards + gamma * np.where(batch.dones, 0.0, nxt)


def loss_and_grads(net: MLP, target_net: MLP, batch: Batch, gamma: float):
    if len(batch) == 0:
        raise ValueError("empty batch")
    y = td_targets(target_net, batch, gamma)
    q, acts = net.forward_cache(batch.states)
    rows = np.arange(len(batch))
    diff = q[rows, batch.actions] - y
    loss = float(np.mean(diff * diff))
    grad_q = np.zeros_like(q)
    grad_q[rows, batch.actions] = 2.0 * diff / len(batch)
    return loss, net.backward(acts, grad_q), y


def td_update(net: MLP, target_net: MLP, batch: Batch, config: DqnConfig, optimizer: Adam) -> float:
    """One Adam step on the mean squared TD error; the target network is not touched."""
    loss, grads, _ = loss_and_grads(net, target_net, batch, config.gamma)
    optimizer.step(grads)
    return loss


# -- state normalization -------------------------------------------------------------

@dataclass(frozen=True)
class StateNormalizer:
    """Min-max scaling of (tb, prev_bitrate, prev_quality, prev_dec_time) into [0, 1].

    Bitrate dimensions are scaled on a log axis since they span several decades.
    """
    lo: tuple
    hi: tuple
    log_dims: tuple = (True, True, False, False)

    def _raw(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return np.where(self.log_dims, np.log(np.maximum(x, 1e-12)), x)

    def transform(self, state, clip: bool = True) -> np.ndarray:
        lo = self._raw(np.array(self.lo))
        hi = self._raw(np.array(self.hi))
        span = np.where(hi > lo, hi - lo, 1.0)
        z = (self._raw(state) - lo) / span
        return np.clip(z, 0.0, 1.0) if clip else z

    @property
    def sentinel(self) -> tuple:
        """Previous-rung values for the first rung: the corpus minima."""
        return tuple(self.lo[1:])

    @classmethod
    def from_bounds(cls, space: ConfigSpace, bounds: dict) -> "StateNormalizer":
        return cls((min(space.target_bitrates), bounds["b_min"], bounds["q_min"], bounds["t_min"]),
                   (max(space.target_bitrates), bounds["b_max"], bounds["q_max"], bounds["t_max"]))


def grid_bounds(grids, metric: str) -> dict:
    b = np.concatenate([g.bitrate for g in grids])
    q = np.concatenate([g.quality(metric) for g in grids])
    t = np.concatenate([g.dec_time for g in grids])
    return {"b_min": float(b.min()), "b_max": float(b.max()), "q_min": float(q.min()),
            "q_max": float(q.max()), "t_min": float(t.min()), "t_max": float(t.max())}


# -- agent bundle and checkpoints ----------------------------------------------------------

@dataclass
class Agent:
    net: MLP
    normalizer: StateNormalizer
    space: ConfigSpace
    metric: str = "xpsnr"
    config: DqnConfig = field(default_factory=DqnConfig)
    weights: RewardWeights = field(default_factory=RewardWeights)
    policy: PenaltyPolicy = FIXED
    reward_bounds: Optional[dict] = None
    seed: int = 0

    def q_values(self, raw_state) -> np.ndarray:
        return forward(self.net, self.normalizer.transform(raw_state))

    def to_dict(self) -> dict:
        return {
            "format": CHECKPOINT_FORMAT, "version": CHECKPOINT_VERSION,
            "metric": self.metric, "seed": self.seed,
            "space": self.space.to_dict(),
            "normalizer": {"lo": list(self.normalizer.lo), "hi": list(self.normalizer.hi),
                           "log_dims": list(self.normalizer.log_dims)},
            "reward_bounds": self.reward_bounds,
            "config": asdict(self.config),
            "weights": list(self.weights.as_tuple()),
            "policy": asdict(self.policy),
            "network": self.net.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Agent":
        if d.get("format") != CHECKPOINT_FORMAT or d.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint (format={d.get('format')!r}, version={d.get('version')!r})")
        n = d["normalizer"]
        cfg = dict(d["config"])
        cfg["hidden"] = tuple(cfg["hidden"])
        return cls(MLP.from_dict(d["network"]),
                   StateNormalizer(tuple(n["lo"]), tuple(n["hi"]), tuple(n["log_dims"])),
                   ConfigSpace.from_dict(d["space"]), check_metric(d["metric"]),
                   DqnConfig(**cfg), RewardWeights(*d["weights"]), PenaltyPolicy(**d["policy"]),
                   d["reward_bounds"], d["seed"])

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), separators=(",", ":"))

    @classmethod
    def from_json(cls, text: str) -> "Agent":
        return cls.from_dict(json.loads(text))


# -- training loop ---------------------------------------------------------------------

@dataclass(frozen=True)
class EpisodeStats:
    episode: int
    cum_reward: float
    quality_term: float
    dectime_penalty: float
    switch_penalty: float
    violations: int
    epsilon: float


@dataclass
class TrainingResult:
    agent: Agent
    trace: list
    memory: ReplayMemory
    warmup_steps: Optional[int]
    steps: int


def train(env, segments: Sequence, space: ConfigSpace, weights: RewardWeights = RewardWeights(),
          config: DqnConfig = DqnConfig(), seed: int = 0, policy: PenaltyPolicy = FIXED,
          metric: str = "xpsnr", bounds: Optional[dict] = None) -> TrainingResult:
    """Train a Q-network against measured outcomes.

    Each episode walks every segment through every target bitrate: observe,
    act epsilon-greedily, measure, score, store, learn from a replay batch and
    periodically sync the target network. Actions breaking the rate cap or
    quality monotonicity on measured values lose ``config.infeasible_penalty``
    on top of the weighted reward.

    ``bounds`` (corpus-wide min/max of bitrate, quality, decoding time) default
    to the extremes of the training grids and serve both state normalization
    and reward normalization.
    """
    check_metric(metric)
    if not segments:
        raise ValueError("no training segments")
    grids = [env.grid(s) for s in segments]  # pre-measure every grid point
    bounds = bounds or grid_bounds(grids, metric)
    normalizer = StateNormalizer.from_bounds(space, bounds)
    rbounds = NormBounds(bounds["q_min"], bounds["q_max"], bounds["t_min"], bounds["t_max"])

    rng = np.random.default_rng(seed)
    n_actions = space.n_actions
    net = MLP((STATE_DIM, *config.hidden, n_actions), rng)
    target = net.copy()
    opt = Adam(net.flat, lr=config.learning_rate)
    memory = ReplayMemory(config.memory_capacity)
    action_res = space.action_resolutions()
    targets = space.target_bitrates
    n_tb = len(targets)
    tb_norm = [normalizer.transform((tb, *normalizer.sentinel))[0] for tb in targets]
    per_seg = []
    for g in grids:
        b, q, t = g.bitrate, g.quality(metric), g.dec_time
        z = normalizer.transform(np.column_stack([np.full_like(b, targets[0]), b, q, t]), clip=False)
        if z.min() < 0 or z.max() > 1:
            raise InvariantError("measured outcomes fall outside the normalization bounds")
        per_seg.append((b, q, t, z[:, 1:]))
    first_prev = normalizer.transform((targets[0], *normalizer.sentinel))[1:]

    trace = []
    step = 0
    warmup = None
    for e in range(config.episodes):
        eps = decay_epsilon(e, config)
        cum = qterm = tterm = sterm = 0.0
        violations = 0
        for b, q, t, zprev in per_seg:
            prev = first_prev
            prev_q = None
            history = []
            for i in range(n_tb):
                state = np.array([tb_norm[i], *prev])
                if state.min() < 0 or state.max() > 1:
                    raise InvariantError(f"state {state} outside [0, 1]")
                a = select_action(net, state, eps, None, rng)
                r = float(action_res[a])
                rb = reward(q[a], t[a], r, history[-1] if history else None, rbounds,
                            weights, policy, history)
                bad = b[a] > targets[i] or (prev_q is not None and q[a] < prev_q)
                total = rb.total - (config.infeasible_penalty if bad else 0.0)
                done = i == n_tb - 1
                nxt = np.zeros(STATE_DIM) if done else np.array([tb_norm[i + 1], *zprev[a]])
                memory.push(state, a, total, nxt, done)
                if len(memory) >= config.batch_size:
                    if warmup is None:
                        warmup = step + 1
                        log.info("replay warmup finished after %d transitions", warmup)
                    td_update(net, target, memory.sample(config.batch_size, rng), config, opt)
                elif config.warmup_limit is not None and step + 1 >= config.warmup_limit:
                    raise RuntimeError(f"replay memory below batch size after {step + 1} transitions")
                step += 1
                if config.sync_unit == "transition":
                    sync_target(net, target, step, config.target_sync)
                cum += total
                qterm += rb.q_norm
                tterm += rb.t_norm
                sterm += rb.delta
                violations += int(bad)
                prev = zprev[a]
                prev_q = q[a]
                history.append(r)
        if config.sync_unit == "episode":
            sync_target(net, target, e + 1, config.target_sync)
        trace.append(EpisodeStats(e, cum, qterm, tterm, sterm, violations, eps))

    agent = Agent(net, normalizer, space, metric, config, weights, policy,
                  {"q_min": rbounds.q_min, "q_max": rbounds.q_max,
                   "t_min": rbounds.t_min, "t_max": rbounds.t_max}, seed)
    return TrainingResult(agent, trace, memory, warmup, step)


TRACE_HEADER = ["episode", "cum_reward", "quality_term", "dectime_penalty", "switch_penalty"]


def trace_csv(trace: Sequence[EpisodeStats]) -> str:
    lines = [",".join(TRACE_HEADER)]
    for s in trace:
        lines.append(f"{s.episode},{s.cum_reward!r},{s.quality_term!r},{s.dectime_penalty!r},{s.switch_penalty!r}")
    return "\n".join(lines) + "\n"
