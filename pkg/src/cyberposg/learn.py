"""Actor-critic best-response learner: numpy MLP critic, replay buffer, TD and soft updates."""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .actions import ActionSpace, JointAction
from .beam import beam_search
from .env import CyberEnv, EnvConfig
from .model import DefenderAction, Role
from .policies import Policy, random_action
from .rollout import derive_seeds

log = logging.getLogger(__name__)


class LearnError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    actor_lr: float = 0.001
    critic_lr: float = 0.003  # nominal 0.01 was unstable across seeds here
    tau: float = 0.01
    noise_std: float = 0.1
    reward_scale: float = 0.1
    max_grad_norm: float = 0.5
    gamma: float = 0.99
    hidden: tuple[int, ...] = (128, 128)
    batch_size: int = 64
    buffer_capacity: int = 100_000
    episodes: int = 200
    warmup_steps: int = 150
    update_every: int = 2
    epsilon: float = 0.1  # uniform-random exploration
    actor_prob: float = 0.2  # share of steps where the actor proposes the action
    beam_k: int = 5
    beam_tau: float = 0.5
    truncate_at_horizon: bool = True
    permute_prob: float = 1.0  # share of replayed samples relabelled by a device permutation


# ---------------------------------------------------------------------------
# Feed-forward network
# ---------------------------------------------------------------------------


@dataclass
class MLP:
    """Rectifier hidden layers, linear (or sigmoid) output."""

    sizes: tuple[int, ...]
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    output: str = "linear"
    seed: int = 0

    @classmethod
    def init(cls, sizes, seed: int = 0, output: str = "linear") -> MLP:
        rng = np.random.default_rng(seed)
        ws, bs = [], []
        for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
            last = i == len(sizes) - 2
            scale = np.sqrt(2.0 / a) * (0.1 if last else 1.0)
            ws.append(rng.normal(0.0, scale, (a, b)))
            bs.append(np.zeros(b))
        return cls(tuple(sizes), ws, bs, output, seed)

    @classmethod
    def zeros(cls, sizes, output: str = "linear") -> MLP:
        return cls(tuple(sizes), [np.zeros((a, b)) for a, b in zip(sizes[:-1], sizes[1:])],
                   [np.zeros(b) for b in sizes[1:]], output)

    def copy(self) -> MLP:
        return MLP(self.sizes, [w.copy() for w in self.weights], [b.copy() for b in self.biases],
                   self.output, self.seed)

    @property
    def params(self) -> list[np.ndarray]:
        return self.weights + self.biases

    def forward(self, x: np.ndarray) -> tuple[np.ndarray, list]:
        x = np.atleast_2d(x)
        if x.shape[1] != self.sizes[0]:
            raise LearnError(f"input width {x.shape[1]} != {self.sizes[0]}")
        acts = [x]
        h = x
        n = len(self.weights)
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            z = h @ w + b
            h = np.maximum(z, 0.0) if i < n - 1 else z
            acts.append(h)
        if self.output == "sigmoid":
            h = 1.0 / (1.0 + np.exp(-h))
        return h, acts

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return self.forward(x)[0]

    def backward(self, acts: list, dout: np.ndarray) -> tuple[list[np.ndarray], np.ndarray]:
        """Gradients of ``sum(dout * out)`` w.r.t. weights, biases and the input."""
        dout = np.asarray(dout, dtype=float).reshape(acts[-1].shape)
        if self.output == "sigmoid":
            s = 1.0 / (1.0 + np.exp(-acts[-1]))
            dout = dout * s * (1.0 - s)
        gw, gb = [None] * len(self.weights), [None] * len(self.biases)
        g = dout
        for i in range(len(self.weights) - 1, -1, -1):
            gw[i] = acts[i].T @ g
            gb[i] = g.sum(axis=0)
            g = g @ self.weights[i].T
            if i > 0:
                g = g * (acts[i] > 0)
        return gw + gb, g


def critic_forward(critic: MLP, obs: np.ndarray, action: np.ndarray) -> np.ndarray:
    obs, action = np.atleast_2d(obs), np.atleast_2d(action)
    if obs.shape[1] + action.shape[1] != critic.sizes[0]:
        raise LearnError("observation + action width does not match the critic input")
    return critic(np.hstack([obs, action]))[:, 0]


def make_critic(obs_width: int, act_width: int, hidden=(128, 128), seed: int = 0) -> MLP:
    return MLP.init((obs_width + act_width, *hidden, 1), seed=seed)


def clip_by_norm(grads: list[np.ndarray], max_norm: float) -> tuple[list[np.ndarray], float]:
    norm = float(np.sqrt(sum(float((g * g).sum()) for g in grads)))
    if max_norm > 0 and norm > max_norm:
        grads = [g * (max_norm / norm) for g in grads]
    return grads, norm


class Adam:
    def __init__(self, params: list[np.ndarray], lr: float, b1: float = 0.9, b2: float = 0.999, eps: float = 1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.k = 0

    def step(self, params: list[np.ndarray], grads: list[np.ndarray]) -> None:
        self.k += 1
        c1, c2 = 1 - self.b1**self.k, 1 - self.b2**self.k
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def soft_update(target: MLP, online: MLP, tau: float = 0.01) -> MLP:
    if target.sizes != online.sizes:
        raise LearnError("soft update between differently shaped networks")
    for t, o in zip(target.params, online.params):
        t *= 1.0 - tau
        t += tau * o
    return target


# ---------------------------------------------------------------------------
# Replay
# ---------------------------------------------------------------------------


class ReplayBuffer:
    """FIFO ring buffer; arrays grow by doubling up to ``capacity``."""

    def __init__(self, capacity: int = 100_000):
        if capacity < 1:
            raise LearnError("buffer capacity must be positive")
        self.capacity = capacity
        self.size = 0
        self.head = 0  # next write position once full
        self.added = 0
        self._data: dict[str, np.ndarray] | None = None

    def __len__(self) -> int:
        return self.size

    def _grow(self, sample: dict[str, np.ndarray]) -> None:
        cap = 256 if self._data is None else min(self.capacity, 2 * self._data["r"].shape[0])
        cap = min(cap, self.capacity)
        new = {k: np.zeros((cap, *np.shape(v)), dtype=np.asarray(v).dtype) for k, v in sample.items()}
        if self._data is not None:
            for k in new:
                new[k][: self.size] = self._data[k][: self.size]
        self._data = new

    def add(self, obs, action, reward, next_obs, done, next_mask=None) -> None:
        item = {
            "obs": np.asarray(obs, dtype=np.float32),
            "act": np.asarray(action, dtype=np.float32),
            "r": np.float64(reward),
            "next_obs": np.asarray(next_obs, dtype=np.float32),
            "done": np.float64(done),
            "mask": np.asarray(next_mask if next_mask is not None else np.zeros(0), dtype=bool),
            "order": np.int64(self.added),
        }
        if self._data is None or (self.size == self._data["r"].shape[0] and self.size < self.capacity):
            self._grow(item)
        pos = self.size if self.size < self.capacity else self.head
        for k, v in item.items():
            self._data[k][pos] = v
        if self.size < self.capacity:
            self.size += 1
        else:
            self.head = (self.head + 1) % self.capacity
        self.added += 1

    def sample(self, n: int, rng: np.random.Generator) -> dict[str, np.ndarray]:
        if self.size == 0:
            raise LearnError("sampling from an empty buffer")
        idx = rng.integers(0, self.size, size=n)
        return {k: v[idx] for k, v in self._data.items()}

    def orders(self) -> np.ndarray:
        return np.sort(self._data["order"][: self.size]) if self._data is not None else np.zeros(0)


# ---------------------------------------------------------------------------
# Greedy targets
# ---------------------------------------------------------------------------


def row_values(critic: MLP, obs: np.ndarray, space: ActionSpace, rows: np.ndarray | None = None) -> tuple[np.ndarray, float]:
    """Critic values of grid candidate rows and of noop for a single observation.

    The first layer is split into observation and action halves so the
    observation product is computed once for all candidates.
    """
    w1, b1 = critic.weights[0], critic.biases[0]
    ow = obs.shape[-1]
    enc = space.grid_encoding if rows is None else space.grid_encoding[rows]
    base = obs @ w1[:ow] + b1
    pre = np.vstack([space.noop_encoding[None, :], enc]) @ w1[ow:] + base
    h = np.maximum(pre, 0.0)
    n = len(critic.weights)
    for i in range(1, n):
        h = h @ critic.weights[i] + critic.biases[i]
        if i < n - 1:
            h = np.maximum(h, 0.0)
    q = h[:, 0]
    return q[1:], float(q[0])


def greedy_targets(target: MLP, next_obs: np.ndarray, masks: np.ndarray, space: ActionSpace) -> np.ndarray:
    """Target-critic value of a greedy merged action at each next state.

    Per device the best valid row is kept if it beats noop; the merged type
    maximises the summed advantage over noop (a separable surrogate of the
    beam-search merge), and the merged joint action is scored exactly.
    Candidate ranking runs in float32; the final merged score in float64.
    """
    B = next_obs.shape[0]
    grid = space.grid
    ow = next_obs.shape[1]
    w32 = [w.astype(np.float32) for w in target.weights]
    b32 = [b.astype(np.float32) for b in target.biases]
    base = next_obs.astype(np.float32) @ w32[0][:ow] + b32[0]  # (B, H)
    act_pre = space.grid_encoding.astype(np.float32) @ w32[0][ow:]  # (R, H)
    noop_pre = space.noop_encoding.astype(np.float32) @ w32[0][ow:]

    def tail(pre):
        h = np.maximum(pre, 0.0)
        n = len(w32)
        for i in range(1, n):
            h = h @ w32[i] + b32[i]
            if i < n - 1:
                h = np.maximum(h, 0.0)
        return h[:, 0]

    q_noop = tail(base + noop_pre)
    bi, ri = np.nonzero(masks)
    merged = np.tile(space.noop_encoding, (B, 1))
    if bi.size:
        q = tail(base[bi] + act_pre[ri])
        dev, typ = grid[ri, 0], grid[ri, 1]
        # best row per (sample, device)
        order = np.lexsort((q, dev, bi))
        bi_o, dev_o = bi[order], dev[order]
        last = np.ones(order.size, dtype=bool)
        last[:-1] = (bi_o[1:] != bi_o[:-1]) | (dev_o[1:] != dev_o[:-1])
        best = order[last]
        gain = q[best] - q_noop[bi[best]]
        keep = best[gain > 0]
        if keep.size:
            gains = np.zeros((B, space.n_types))
            np.add.at(gains, (bi[keep], typ[keep]), q[keep] - q_noop[bi[keep]])
            t_star = np.argmax(gains, axis=1)
            has = gains.max(axis=1) > 0
            sel = keep[has[bi[keep]] & (typ[keep] == t_star[bi[keep]])]
            merged[has] = 0.0
            merged[has, t_star[has]] = 1.0
            T = space.n_types
            np.maximum.at(merged, bi[sel], np.hstack([
                np.zeros((sel.size, T)), space.grid_encoding[ri[sel], T:]
            ]))
    return target(np.hstack([next_obs, merged]))[:, 0]


def permute_devices(
    batch: dict[str, np.ndarray], space: ActionSpace, rng: np.random.Generator, prob: float = 1.0
) -> dict[str, np.ndarray]:
    """Relabel device slots by a random permutation per sample.

    Observations, the action's device block and the next-state candidate
    mask are permuted consistently, so each stored transition stands for
    every relabelling of the same situation.
    """
    B = batch["r"].shape[0]
    n, T = space.n_devices, space.n_types
    perm = np.tile(np.arange(n), (B, 1))
    hit = rng.random(B) < prob
    perm[hit] = np.argsort(rng.random((int(hit.sum()), n)), axis=1)
    rows = np.arange(B)[:, None]
    out = dict(batch)
    for key in ("obs", "next_obs"):
        x = batch[key].reshape(B, n, -1)
        out[key] = x[rows, perm].reshape(B, -1)
    act = batch["act"].copy()
    act[:, T:T + n] = batch["act"][:, T:T + n][rows, perm]
    out["act"] = act
    m = batch["mask"]
    if m.size:
        out["mask"] = m.reshape(B, n, -1)[rows, perm].reshape(B, -1)
    return out


def td_update(
    critic: MLP,
    target: MLP,
    batch: dict[str, np.ndarray],
    cfg: TrainConfig,
    opt: Adam,
    space: ActionSpace | None = None,
) -> float:
    """One clipped gradient step on the mean squared TD error."""
    n = batch["r"].shape[0]
    if n == 0:
        raise LearnError("empty batch")
    obs, act = batch["obs"].astype(float), batch["act"].astype(float)
    if space is None:
        boot = np.zeros(n)
    else:
        boot = greedy_targets(target, batch["next_obs"].astype(float), batch["mask"], space)
    y = cfg.reward_scale * batch["r"] + cfg.gamma * (1.0 - batch["done"]) * boot
    q, acts = critic.forward(np.hstack([obs, act]))
    err = q[:, 0] - y
    loss = float(np.mean(err**2))
    grads, _ = critic.backward(acts, (2.0 / n) * err[:, None])
    grads, _ = clip_by_norm(grads, cfg.max_grad_norm)
    opt.step(critic.params, grads)
    return loss


def td_loss_and_grads(critic: MLP, obs, act, y) -> tuple[float, list[np.ndarray]]:
    q, acts = critic.forward(np.hstack([obs, act]))
    err = q[:, 0] - y
    grads, _ = critic.backward(acts, (2.0 / len(y)) * err[:, None])
    return float(np.mean(err**2)), grads


# ---------------------------------------------------------------------------
# Actor (behaviour prior)
# ---------------------------------------------------------------------------


def decode_proto(proto: np.ndarray, env: CyberEnv, role: Role) -> JointAction:
    """Turn a continuous action encoding into a valid joint action."""
    space = env.action_space(role)
    T, D, E = space.n_types, space.n_devices, space.n_exploits
    mask = env.type_mask(role)
    emask = env.exploit_mask(role)
    scores = np.where(mask.any(axis=0), proto[:T], -np.inf)
    scores[space.pass_type] = proto[space.pass_type]
    t = int(np.argmax(scores))
    if t == space.pass_type:
        return JointAction.noop(role)
    dev_scores = np.where(mask[:, t], proto[T:T + D], -np.inf)
    devs = np.flatnonzero(dev_scores > 0.5)
    if devs.size == 0:
        devs = np.array([int(np.argmax(dev_scores))])
    e = int(np.argmax(np.where(emask, proto[T + D:T + D + E], -np.inf)))
    p = int(np.argmax(proto[T + D + E:]))
    if role is Role.DEFENDER:
        e = 0
        p = p if t == DefenderAction.UPGRADE else 0
    else:
        p = 0
    n = devs.size
    return JointAction(role, t, tuple(int(d) for d in devs), (e,) * n, (p,) * n)


def actor_update(actor: MLP, critic: MLP, obs: np.ndarray, opt: Adam, max_norm: float) -> None:
    """Deterministic policy gradient: ascend ``Q(s, mu(s))`` through the critic."""
    proto, a_acts = actor.forward(obs)
    _, c_acts = critic.forward(np.hstack([obs, proto]))
    _, dx = critic.backward(c_acts, -np.ones((obs.shape[0], 1)) / obs.shape[0])
    grads, _ = actor.backward(a_acts, dx[:, obs.shape[1]:])
    grads, _ = clip_by_norm(grads, max_norm)
    opt.step(actor.params, grads)


# ---------------------------------------------------------------------------
# Learned policy and training loop
# ---------------------------------------------------------------------------


class CriticPolicy(Policy):
    """Stationary policy: beam search over the critic at each observation."""

    def __init__(self, role: Role, critic: MLP, K: int = 5, tau: float = 0.05, name: str = "learned",
                 noise_std: float = 0.0):
        self.role = Role(role)
        self.critic = critic
        self.K, self.tau = K, tau
        self.noise_std = noise_std
        self.name = name
        self.reset()

    def act(self, obs, env) -> JointAction:
        return critic_beam_action(self.critic, obs, env, self.role, self.K, self.tau, self.rng, self.noise_std)


def critic_beam_action(critic, obs, env, role, K, tau, rng, noise_std: float = 0.0) -> JointAction:
    space = env.action_space(role)
    valid = np.flatnonzero(space.row_mask(env.type_mask(role), env.exploit_mask(role)))
    q_rows, q_base = row_values(critic, obs, space, valid)
    if noise_std > 0:
        q_rows = q_rows + rng.normal(0.0, noise_std, q_rows.shape)

    def joint_q(actions):
        return critic_forward(critic, np.tile(obs, (len(actions), 1)), space.encode_many(actions))

    action, _ = beam_search(role, space.grid[valid], q_rows, q_base, joint_q, K, tau, rng)
    return action


@dataclass
class BestResponse:
    role: Role
    critic: MLP
    actor: MLP
    losses: list[float] = field(default_factory=list)
    returns: list[float] = field(default_factory=list)

    def policy(self, K: int = 5, tau: float = 0.05, name: str = "learned") -> CriticPolicy:
        return CriticPolicy(self.role, self.critic.copy(), K, tau, name)


def sample_opponent(opponents: list[Policy], weights: np.ndarray, rng: np.random.Generator) -> Policy:
    return opponents[int(rng.choice(len(opponents), p=weights))]


def train_best_response(
    role: Role,
    opponents: list[Policy],
    weights,
    cfg: EnvConfig,
    episodes: int | None = None,
    seed: int = 0,
    train: TrainConfig = TrainConfig(),
    init: BestResponse | None = None,
) -> BestResponse:
    """Fit a critic against a fixed opponent mixture (resampled each episode)."""
    role = Role(role)
    if not opponents:
        raise LearnError("empty opponent mixture")
    weights = np.asarray(weights, dtype=float)
    if weights.shape != (len(opponents),) or np.any(weights < 0) or abs(weights.sum() - 1) > 1e-9:
        raise LearnError("opponent weights must be a distribution over the opponents")
    weights = weights / weights.sum()
    episodes = train.episodes if episodes is None else episodes
    env = CyberEnv(cfg)
    space = env.action_space(role)
    ow = env.obs_width[role]
    if init is None:
        critic = make_critic(ow, space.width, train.hidden, seed)
        actor = MLP.init((ow, *train.hidden[:1], space.width), seed=seed + 1, output="sigmoid")
    else:
        critic, actor = init.critic.copy(), init.actor.copy()
    target = critic.copy()
    c_opt, a_opt = Adam(critic.params, train.critic_lr), Adam(actor.params, train.actor_lr)
    buf = ReplayBuffer(train.buffer_capacity)
    rng = np.random.default_rng(seed)
    result = BestResponse(role, critic, actor)
    opp_role = Role.DEFENDER if role is Role.ATTACKER else Role.ATTACKER
    steps = 0
    for ep_seed in derive_seeds(seed, episodes, salt=11):
        opp = sample_opponent(opponents, weights, rng)
        if Role(opp.role) is not opp_role:
            raise LearnError(f"opponent {opp.name} does not play the {opp_role.value}")
        obs = dict(zip((Role.ATTACKER, Role.DEFENDER), env.reset(ep_seed)))
        opp.reset(ep_seed + 1)
        total, done = 0.0, False
        while not done:
            mine = obs[role]
            u = rng.random()
            if steps < train.warmup_steps or u < train.epsilon:
                a = random_action(env, role, rng)
            elif u < train.epsilon + train.actor_prob:
                proto = actor(mine[None, :])[0] + rng.normal(0.0, train.noise_std, space.width)
                a = decode_proto(proto, env, role)
            else:
                a = critic_beam_action(critic, mine, env, role, train.beam_k, train.beam_tau, rng)
            b = opp.act(obs[opp_role], env)
            res = env.step(a, b) if role is Role.DEFENDER else env.step(b, a)
            r = res.defender_reward if role is Role.DEFENDER else res.attacker_reward
            total += r
            nxt = {Role.ATTACKER: res.attacker_obs, Role.DEFENDER: res.defender_obs}
            mask = space.row_mask(env.type_mask(role), env.exploit_mask(role))
            # the horizon is a time limit the observation cannot see, so it truncates
            # rather than terminates unless configured otherwise
            terminal = res.done and not train.truncate_at_horizon
            buf.add(mine, space.encode(a), r, nxt[role], terminal, mask)
            obs, done = nxt, res.done
            steps += 1
            if len(buf) >= train.batch_size and steps % train.update_every == 0:
                batch = buf.sample(train.batch_size, rng)
                if train.permute_prob > 0:
                    batch = permute_devices(batch, space, rng, train.permute_prob)
                result.losses.append(td_update(critic, target, batch, train, c_opt, space))
                actor_update(actor, critic, batch["obs"].astype(float), a_opt, train.max_grad_norm)
                soft_update(target, critic, train.tau)
        result.returns.append(total)
    return result


# ---------------------------------------------------------------------------
# Checkpoint files
# ---------------------------------------------------------------------------

MAGIC = b"CPGW"
VERSION = 1


def save_weights(net: MLP, path: str | Path) -> None:
    """Header (magic, version, seed, layer sizes) then little-endian float64 parameters."""
    header = MAGIC + struct.pack("<HqI", VERSION, int(net.seed), len(net.sizes))
    header += struct.pack(f"<{len(net.sizes)}I", *net.sizes)
    out = {"linear": 0, "sigmoid": 1}[net.output]
    header += struct.pack("<B", out)
    flat = np.concatenate([p.ravel() for p in net.weights + net.biases]).astype("<f8")
    Path(path).write_bytes(header + flat.tobytes())


def load_weights(path: str | Path) -> MLP:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise LearnError(f"{path} is not a weight file")
    version, seed, n = struct.unpack_from("<HqI", raw, 4)
    if version != VERSION:
        raise LearnError(f"unsupported weight file version {version}")
    off = 4 + struct.calcsize("<HqI")
    sizes = struct.unpack_from(f"<{n}I", raw, off)
    off += 4 * n
    (out,) = struct.unpack_from("<B", raw, off)
    off += 1
    flat = np.frombuffer(raw[off:], dtype="<f8").astype(float)
    net = MLP.zeros(sizes, output=("linear", "sigmoid")[out])
    net.seed = seed
    expected = sum(p.size for p in net.params)
    if flat.size != expected:
        raise LearnError(f"weight file holds {flat.size} values, expected {expected}")
    k = 0
    for p in net.weights + net.biases:
        p[...] = flat[k:k + p.size].reshape(p.shape)
        k += p.size
    return net
