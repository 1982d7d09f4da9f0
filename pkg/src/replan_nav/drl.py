"""DQN for the replan-or-not decision.

The Q-network is a small numpy MLP; replay is proportional prioritized
replay over a sum tree with three priority modes.
"""
from __future__ import annotations

import csv
import logging
import math
import struct
from dataclasses import asdict, dataclass
from enum import Enum
from pathlib import Path

import numpy as np

from .errors import BufferUnderfull, ConfigError, InitialPlanFailed, ModelFormatError
from .replan_env import Action, ReplanEnv, StepResult

log = logging.getLogger(__name__)

LAYER_SIZES = (62, 128, 128, 2)
P_MIN = 1e-3
OBS_SCALE = 0.1  # observations are in meters, mostly within +-10
MAGIC = b"RPNQNET\x01"


class PriorityMode(str, Enum):
    UNIFORM = "uniform"
    TD_ERROR = "td_error"
    Q_DIFF = "q_diff"


# --------------------------------------------------------------------------- network

class QNetwork:
    """Fully connected ReLU network; ``weights[k]`` has shape ``(in, out)``."""

    def __init__(self, weights: list[np.ndarray], biases: list[np.ndarray]):
        self.weights = weights
        self.biases = biases

    @classmethod
    def create(cls, rng: np.random.Generator, sizes=LAYER_SIZES, dtype=np.float32) -> "QNetwork":
        ws, bs = [], []
        for n_in, n_out in zip(sizes[:-1], sizes[1:]):
            bound = 1.0 / math.sqrt(n_in)
            ws.append(rng.uniform(-bound, bound, (n_in, n_out)).astype(dtype))
            bs.append(rng.uniform(-bound, bound, n_out).astype(dtype))
        return cls(ws, bs)

    @classmethod
    def zeros(cls, sizes=LAYER_SIZES, dtype=np.float32) -> "QNetwork":
        return cls([np.zeros((a, b), dtype) for a, b in zip(sizes[:-1], sizes[1:])],
                   [np.zeros(b, dtype) for b in sizes[1:]])

    @property
    def sizes(self) -> tuple[int, ...]:
        return (self.weights[0].shape[0],) + tuple(w.shape[1] for w in self.weights)

    @property
    def dtype(self):
        return self.weights[0].dtype

    @property
    def n_params(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def params(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def get_flat(self) -> np.ndarray:
        return np.concatenate([p.ravel() for p in self.params()])

    def set_flat(self, flat: np.ndarray) -> None:
        i = 0
        for p in self.params():
            p[...] = flat[i:i + p.size].reshape(p.shape)
            i += p.size

    def copy(self) -> "QNetwork":
        return QNetwork([w.copy() for w in self.weights], [b.copy() for b in self.biases])

    def forward(self, x: np.ndarray, keep: bool = False):
        """Q-values ``(N, 2)`` for a batch ``(N, 62)``; with ``keep`` also the layer activations."""
        h = np.asarray(x, dtype=self.dtype)
        acts = [h]
        last = len(self.weights) - 1
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ w + b
            if k < last:
                h = np.maximum(h, 0)
            acts.append(h)
        return (h, acts) if keep else h

    def backward(self, acts: list[np.ndarray], grad_out: np.ndarray) -> list[np.ndarray]:
        """Gradients in ``params()`` order given dLoss/dQ."""
        g = np.asarray(grad_out, dtype=self.dtype)
        grads = []
        for k in range(len(self.weights) - 1, -1, -1):
            grads.append(g.sum(axis=0))
            grads.append(acts[k].T @ g)
            if k > 0:
                g = (g @ self.weights[k].T) * (acts[k] > 0)
        return grads[::-1]

    def q_values(self, obs: np.ndarray) -> tuple[float, float]:
        q = self.forward(np.asarray(obs)[None])[0]
        return float(q[0]), float(q[1])


def forward(net: QNetwork, obs: np.ndarray) -> tuple[float, float]:
    return net.q_values(obs)


def save_weights(net: QNetwork, path) -> None:
    """Little-endian: magic, layer count, layer sizes (uint32), float32 parameters."""
    sizes = net.sizes
    blob = MAGIC + struct.pack(f"<I{len(sizes)}I", len(sizes), *sizes)
    blob += b"".join(p.astype("<f4").tobytes() for p in net.params())
    Path(path).write_bytes(blob)


def load_weights(path, expected_sizes=LAYER_SIZES) -> QNetwork:
    data = Path(path).read_bytes()
    if data[: len(MAGIC)] != MAGIC:
        raise ModelFormatError(f"{path}: bad magic")
    off = len(MAGIC)
    try:
        (n,) = struct.unpack_from("<I", data, off)
        if not 2 <= n <= 16:
            raise ModelFormatError(f"{path}: implausible layer count {n}")
        sizes = struct.unpack_from(f"<{n}I", data, off + 4)
    except struct.error as e:
        raise ModelFormatError(f"{path}: truncated header") from e
    if expected_sizes is not None and tuple(sizes) != tuple(expected_sizes):
        raise ModelFormatError(f"{path}: layer sizes {sizes}, expected {tuple(expected_sizes)}")
    net = QNetwork.zeros(sizes)
    body = data[off + 4 + 4 * n:]
    if len(body) != 4 * net.n_params:
        raise ModelFormatError(f"{path}: {len(body)} parameter bytes, expected {4 * net.n_params}")
    net.set_flat(np.frombuffer(body, dtype="<f4").astype(np.float32))
    return net


class Adam:
    def __init__(self, params: list[np.ndarray], lr: float = 1e-4, b1: float = 0.9, b2: float = 0.999,
                 eps: float = 1e-8):
        self.params = params
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, grads: list[np.ndarray]) -> None:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p -= (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.dtype)


# --------------------------------------------------------------------------- acting and priorities

def act(net: QNetwork, obs: np.ndarray, epsilon: float, rng: np.random.Generator) -> Action:
    """Epsilon-greedy; greedy ties go to not replanning."""
    if not 0.0 <= epsilon <= 1.0:
        raise ConfigError("epsilon must lie in [0, 1]")
    if rng.random() < epsilon:
        return Action(int(rng.integers(2)))
    q_not, q_rep = net.q_values(obs)
    return Action.REPLAN if q_rep > q_not else Action.NO_REPLAN


@dataclass
class PrioritizedTransition:
    obs: np.ndarray
    action: int
    reward: float
    next_obs: np.ndarray
    terminated: bool
    truncated: bool
    priority: float = 1.0


def td_targets(target: QNetwork, reward, next_obs, terminated, gamma: float) -> np.ndarray:
    """``r + gamma * max_a Q'(s', a)``; truncated transitions bootstrap, terminated ones do not."""
    q_next = target.forward(next_obs).max(axis=1).astype(np.float64)
    return np.asarray(reward, dtype=np.float64) + gamma * (1.0 - np.asarray(terminated, dtype=np.float64)) * q_next


def priorities(net: QNetwork, target: QNetwork | None, obs, action, reward, next_obs, terminated,
               mode: PriorityMode, gamma: float = 0.99) -> np.ndarray:
    mode = PriorityMode(mode)
    obs = np.atleast_2d(obs)
    if mode is PriorityMode.UNIFORM:
        return np.ones(len(obs))
    q = net.forward(obs).astype(np.float64)
    if mode is PriorityMode.Q_DIFF:
        return np.abs(q[:, 1] - q[:, 0]) + P_MIN
    y = td_targets(target if target is not None else net, reward, np.atleast_2d(next_obs), terminated, gamma)
    q_sa = q[np.arange(len(q)), np.asarray(action, dtype=int).reshape(-1)]
    return np.abs(q_sa - y) + P_MIN


def compute_priority(net: QNetwork, t: PrioritizedTransition, mode: PriorityMode,
                     target: QNetwork | None = None, gamma: float = 0.99) -> float:
    return float(priorities(net, target, t.obs, [t.action], [t.reward], t.next_obs, [t.terminated],
                            mode, gamma)[0])


# --------------------------------------------------------------------------- replay

class SumTree:
    """Binary sum tree over ``capacity`` leaves (rounded up to a power of two)."""

    def __init__(self, capacity: int):
        self.capacity = capacity
        self.size = 1 << max(0, (capacity - 1).bit_length())
        self.tree = np.zeros(2 * self.size)

    @property
    def total(self) -> float:
        return float(self.tree[1])

    def update(self, idx, values) -> None:
        idx = np.atleast_1d(np.asarray(idx, dtype=int))
        values = np.broadcast_to(np.asarray(values, dtype=float), idx.shape)
        for i, v in zip(idx, values):  # sequential so repeated indices keep the last value
            j = i + self.size
            delta = v - self.tree[j]
            while j >= 1:
                self.tree[j] += delta
                j >>= 1

    def leaves(self, idx) -> np.ndarray:
        return self.tree[np.asarray(idx) + self.size]

    def find(self, u: np.ndarray) -> np.ndarray:
        """Leaf index whose cumulative range contains each ``u`` in ``[0, total)``."""
        u = np.array(u, dtype=float)
        j = np.ones(len(u), dtype=int)
        while j[0] < self.size:
            left = 2 * j
            lv = self.tree[left]
            go_right = u >= lv
            u = np.where(go_right, u - lv, u)
            j = np.where(go_right, left + 1, left)
        idx = j - self.size
        # guard against float round-off landing on an empty leaf
        bad = self.tree[j] <= 0
        if bad.any():
            idx[bad] = self._last_nonzero_before(idx[bad])
        return idx

    def _last_nonzero_before(self, idx: np.ndarray) -> np.ndarray:
        nz = np.flatnonzero(self.tree[self.size:self.size + self.capacity] > 0)
        pos = np.searchsorted(nz, idx, side="right") - 1
        return nz[np.clip(pos, 0, len(nz) - 1)]


class PrioritizedReplay:
    """Ring buffer with sampling probability proportional to ``priority ** alpha``."""

    def __init__(self, capacity: int, obs_dim: int, alpha: float = 0.6):
        self.capacity = capacity
        self.alpha = alpha
        self.obs = np.zeros((capacity, obs_dim), np.float32)
        self.next_obs = np.zeros((capacity, obs_dim), np.float32)
        self.action = np.zeros(capacity, np.int64)
        self.reward = np.zeros(capacity)
        self.terminated = np.zeros(capacity, bool)
        self.truncated = np.zeros(capacity, bool)
        self.priority = np.zeros(capacity)
        self.tree = SumTree(capacity)
        self.n = 0
        self.head = 0

    def __len__(self) -> int:
        return self.n

    def add(self, t: PrioritizedTransition) -> int:
        i = self.head
        self.obs[i] = t.obs
        self.next_obs[i] = t.next_obs
        self.action[i] = t.action
        self.reward[i] = t.reward
        self.terminated[i] = t.terminated
        self.truncated[i] = t.truncated
        self.set_priority([i], [t.priority])
        self.head = (i + 1) % self.capacity
        self.n = min(self.n + 1, self.capacity)
        return i

    def set_priority(self, idx, p) -> None:
        p = np.asarray(p, dtype=float)
        if np.any(p <= 0):
            raise ValueError("priorities must be positive")
        self.priority[np.asarray(idx)] = p
        self.tree.update(idx, p ** self.alpha)

    def probabilities(self, idx) -> np.ndarray:
        return self.tree.leaves(idx) / self.tree.total

    def sample(self, batch: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
        """Independent proportional draws; returns indices and their probabilities."""
        if self.n == 0:
            raise BufferUnderfull("replay buffer is empty")
        idx = self.tree.find(rng.random(batch) * self.tree.total)
        return idx, self.probabilities(idx)


# --------------------------------------------------------------------------- training

@dataclass
class TrainerConfig:
    lr: float = 1e-4
    batch: int = 128
    buffer_capacity: int = 100_000
    gamma: float = 0.99
    total_steps: int = 100_000
    warmup_steps: int = 1000
    train_every: int = 1
    target_sync_every: int = 1000
    eps_start: float = 1.0
    eps_end: float = 0.05
    eps_decay_steps: int = 20_000
    per_alpha: float = 0.6
    per_beta_start: float = 0.4
    per_beta_end: float = 1.0
    priority_mode: str = PriorityMode.Q_DIFF.value
    importance_sampling: bool = True
    obs_scale: float = OBS_SCALE
    seed: int = 0
    checkpoint_every: int = 10_000
    log_every: int = 1000

    def __post_init__(self):
        PriorityMode(self.priority_mode)
        if self.batch < 1 or self.total_steps < 1 or self.buffer_capacity < self.batch:
            raise ConfigError("need batch >= 1, total_steps >= 1 and buffer_capacity >= batch")
        if self.warmup_steps < self.batch:
            raise ConfigError("warmup_steps must cover at least one batch")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainerConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown trainer keys: {sorted(unknown)}")
        return cls(**d)

    def epsilon(self, step: int) -> float:
        frac = min(step / self.eps_decay_steps, 1.0) if self.eps_decay_steps > 0 else 1.0
        return self.eps_start + frac * (self.eps_end - self.eps_start)

    def beta(self, step: int) -> float:
        frac = min(step / self.total_steps, 1.0)
        return self.per_beta_start + frac * (self.per_beta_end - self.per_beta_start)


LOG_FIELDS = ("step", "episode", "epsilon", "loss", "episode_return", "episode_sgt", "nr")


class DQNTrainer:
    """Single-environment DQN loop; one decision step is one timestep."""

    def __init__(self, env: ReplanEnv, cfg: TrainerConfig | None = None):
        self.env = env
        self.cfg = cfg or TrainerConfig()
        self.mode = PriorityMode(self.cfg.priority_mode)
        self.rng = np.random.default_rng(self.cfg.seed)
        self.net = QNetwork.create(self.rng)
        self.target = self.net.copy()
        self.opt = Adam(self.net.params(), self.cfg.lr)
        self.buffer = PrioritizedReplay(self.cfg.buffer_capacity, env.cfg.obs_dim, self.cfg.per_alpha)
        self.step_count = 0
        self.updates = 0
        self.episode = 0
        self.rows: list[dict] = []

    def scaled(self, obs: np.ndarray) -> np.ndarray:
        return (np.asarray(obs) * self.cfg.obs_scale).astype(np.float32)

    def next_episode_seed(self) -> int:
        # training seeds live far above evaluation seeds
        return 1_000_000 + int(self.rng.integers(0, 2**30))

    def reset_env(self) -> np.ndarray:
        while True:
            seed = self.next_episode_seed()
            try:
                return self.env.reset(seed)
            except InitialPlanFailed:
                log.warning("training seed %d has no initial path; drawing another", seed)

    def train_step(self) -> float:
        cfg = self.cfg
        if len(self.buffer) < max(cfg.warmup_steps, cfg.batch):
            raise BufferUnderfull(f"{len(self.buffer)} transitions stored, need {cfg.warmup_steps}")
        b = self.buffer
        idx, prob = b.sample(cfg.batch, self.rng)
        if cfg.importance_sampling:
            w = (len(b) * prob) ** (-cfg.beta(self.step_count))
            w = w / w.max()
        else:
            w = np.ones(len(idx))
        obs, act_ = b.obs[idx], b.action[idx]
        q, acts = self.net.forward(obs, keep=True)
        y = td_targets(self.target, b.reward[idx], b.next_obs[idx], b.terminated[idx], cfg.gamma)
        rows = np.arange(len(idx))
        delta = q[rows, act_].astype(np.float64) - y
        loss = float(np.mean(w * delta ** 2))
        grad = np.zeros_like(q)
        grad[rows, act_] = 2.0 * w * delta / len(idx)
        self.opt.step(self.net.backward(acts, grad))
        self.updates += 1

        # refresh from the online values of this update
        if self.mode is PriorityMode.Q_DIFF:
            qd = q.astype(np.float64)
            b.set_priority(idx, np.abs(qd[:, 1] - qd[:, 0]) + P_MIN)
        elif self.mode is PriorityMode.TD_ERROR:
            b.set_priority(idx, np.abs(delta) + P_MIN)
        if self.updates % cfg.target_sync_every == 0:
            self.target = self.net.copy()
        return loss

    def store(self, obs_s: np.ndarray, a: int, res: StepResult) -> None:
        nxt = self.scaled(res.observation)
        p = priorities(self.net, self.target, obs_s, [a], [res.reward], nxt, [res.terminated],
                       self.mode, self.cfg.gamma)[0]
        self.buffer.add(PrioritizedTransition(obs_s, a, res.reward, nxt, res.terminated, res.truncated, p))

    def train(self, log_path=None, checkpoint_dir=None, progress=None) -> list[dict]:
        """Run ``total_steps`` decision steps; returns the per-episode log rows."""
        cfg = self.cfg
        writer = fh = None
        if log_path is not None:
            fh = open(log_path, "w", newline="")
            writer = csv.DictWriter(fh, fieldnames=LOG_FIELDS)
            writer.writeheader()
        try:
            obs = self.reset_env()
            ep_return, losses = 0.0, []
            for step in range(1, cfg.total_steps + 1):
                self.step_count = step
                eps = cfg.epsilon(step - 1)
                obs_s = self.scaled(obs)
                a = int(act(self.net, obs_s, eps, self.rng))
                res = self.env.step(a)
                self.store(obs_s, a, res)
                ep_return += res.reward
                if len(self.buffer) >= cfg.warmup_steps and step % cfg.train_every == 0:
                    losses.append(self.train_step())
                obs = res.observation
                if res.terminated or res.truncated:
                    row = {"step": step, "episode": self.episode, "epsilon": eps,
                           "loss": float(np.mean(losses)) if losses else float("nan"),
                           "episode_return": ep_return, "episode_sgt": self.env.reward_total,
                           "nr": self.env.n_replans}
                    self.rows.append(row)
                    if writer:
                        writer.writerow(row)
                        fh.flush()
                    self.episode += 1
                    ep_return, losses = 0.0, []
                    obs = self.reset_env()
                if checkpoint_dir is not None and step % cfg.checkpoint_every == 0:
                    save_weights(self.net, Path(checkpoint_dir) / f"checkpoint_{step:07d}.bin")
                if progress is not None and step % cfg.log_every == 0:
                    progress(self.summary(step))
        finally:
            if fh:
                fh.close()
        return self.rows

    def summary(self, step: int) -> str:
        recent = self.rows[-20:]
        sr = np.mean([r["episode_sgt"] > 0 for r in recent]) * 100 if recent else float("nan")
        return (f"step {step}/{self.cfg.total_steps} episodes {self.episode} eps {self.cfg.epsilon(step):.3f} "
                f"updates {self.updates} recent SR {sr:.0f}%")

    def config_dict(self) -> dict:
        return asdict(self.cfg)


class DRLPolicy:
    """Greedy policy over a trained network, with the strategy interface."""

    kind = "drl"

    def __init__(self, net: QNetwork, obs_scale: float = OBS_SCALE):
        self.net = net
        self.obs_scale = obs_scale
        self._greedy = np.random.default_rng(0)  # unused at epsilon 0

    def reset(self, env) -> None:
        pass

    def act(self, obs, env) -> Action:
        return act(self.net, (np.asarray(obs) * self.obs_scale).astype(np.float32), 0.0, self._greedy)

    def observe(self, result: StepResult) -> None:
        pass
