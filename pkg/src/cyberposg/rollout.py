"""Episode rollouts and seed derivation shared by training, estimation and experiments."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .env import CyberEnv, EnvConfig
from .model import Role
from .policies import Policy


def derive_seeds(master: int, n: int, salt: int = 0) -> list[int]:
    """Pure master-seed to per-rollout seed derivation."""
    ss = np.random.SeedSequence([int(master), int(salt)])
    return [int(s.generate_state(1)[0]) for s in ss.spawn(n)]


@dataclass
class EpisodeResult:
    attacker: float  # undiscounted, shaping excluded
    defender: float
    shaping: float
    metrics: dict
    trajectory: list[dict] = field(default_factory=list)


def play_episode(
    cfg: EnvConfig | CyberEnv,
    attacker: Policy,
    defender: Policy,
    seed: int,
    zero_day_index: int | None = None,
    record: bool = False,
) -> EpisodeResult:
    env = cfg if isinstance(cfg, CyberEnv) else CyberEnv(cfg)
    env.record = record
    obs_a, obs_d = env.reset(seed, zero_day_index=zero_day_index)
    pa, pd = derive_seeds(seed, 2, salt=7)
    attacker.reset(pa)
    defender.reset(pd)
    done = False
    while not done:
        a = attacker.act(obs_a, env)
        d = defender.act(obs_d, env)
        res = env.step(d, a)
        obs_a, obs_d, done = res.attacker_obs, res.defender_obs, res.done
    s = env.summary()
    return EpisodeResult(s["attacker"], s["defender"], env.totals["shaping"], s, list(env.trajectory))


def evaluate(
    cfg: EnvConfig,
    attacker: Policy,
    defender: Policy,
    seeds: list[int],
) -> list[EpisodeResult]:
    """One episode per seed; in zero-day mode ``z`` is drawn inside the env from its prior."""
    env = CyberEnv(cfg)
    return [play_episode(env, attacker, defender, s) for s in seeds]


def policy_role_check(policy: Policy, role: Role) -> None:
    if Role(policy.role) is not Role(role):
        raise ValueError(f"policy {policy.name} plays {policy.role}, expected {role}")
