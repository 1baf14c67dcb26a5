"""Policies: the pass / random / preset baselines and the policy protocol."""

from __future__ import annotations

import numpy as np

from .actions import JointAction
from .model import DefenderAction, Role


class Policy:
    """A stationary policy for one role.

    ``act`` sees the role's observation plus the environment for validity
    masks only; masks are built from information the role already holds.
    """

    name = "policy"
    role: Role

    def reset(self, seed: int | None = None) -> None:
        self.rng = np.random.default_rng(seed)

    def act(self, obs: np.ndarray, env) -> JointAction:
        raise NotImplementedError


class PassPolicy(Policy):
    def __init__(self, role: Role):
        self.role = Role(role)
        self.name = "pass"
        self.reset()

    def act(self, obs, env) -> JointAction:
        return JointAction.noop(self.role)


class RandomPolicy(Policy):
    """Uniform over action types with at least one valid device, then a random valid subset."""

    def __init__(self, role: Role, seed: int | None = None):
        self.role = Role(role)
        self.name = "random"
        self.reset(seed)

    def act(self, obs, env) -> JointAction:
        return random_action(env, self.role, self.rng)


def random_action(env, role: Role, rng: np.random.Generator) -> JointAction:
    space = env.action_space(role)
    mask = env.type_mask(role)
    emask = np.flatnonzero(env.exploit_mask(role))
    types = [t for t in range(space.n_types) if t == space.pass_type or mask[:, t].any()]
    t = int(types[rng.integers(len(types))])
    if t == space.pass_type:
        return JointAction.noop(role)
    valid = np.flatnonzero(mask[:, t])
    pick = valid[rng.random(valid.size) < 0.5]
    if pick.size == 0:
        pick = valid[[rng.integers(valid.size)]]
    exploits = tuple(int(emask[rng.integers(emask.size)]) for _ in pick)
    if role is Role.DEFENDER and t == DefenderAction.UPGRADE:
        apps = tuple(int(rng.integers(space.n_apps)) for _ in pick)
    else:
        apps = (0,) * pick.size
    if role is Role.DEFENDER:
        exploits = (0,) * pick.size
    return JointAction(role, t, tuple(int(d) for d in pick), exploits, apps)


class PresetDefender(Policy):
    """Fixed schedule: checkpoint at step 0, scan every 7 steps, clean alerts, reset at the end.

    Scans fire at steps 7, 14, 21, 28 on every visible device; devices whose
    anomaly score exceeds the threshold are cleaned on the following step;
    the final step restores the step-0 checkpoint (the 30-day reset).
    """

    def __init__(self, period: int = 7, threshold: float = 0.6):
        self.role = Role.DEFENDER
        self.name = "preset"
        self.period = period
        self.threshold = threshold
        self.reset()

    def schedule(self, t: int, steps: int) -> DefenderAction:
        if t == 0:
            return DefenderAction.CHECKPOINT
        if t == steps - 1:
            return DefenderAction.RESTORE
        if t % self.period == 0:
            return DefenderAction.SCAN
        if t % self.period == 1 and t > 1:
            return DefenderAction.CLEAN
        return DefenderAction.PASS

    def act(self, obs, env) -> JointAction:
        kind = self.schedule(env.t, env.cfg.steps)
        mask = env.type_mask(Role.DEFENDER)
        if kind is DefenderAction.PASS:
            return JointAction.noop(Role.DEFENDER)
        visible = np.flatnonzero(mask[:, kind])
        if kind is DefenderAction.CLEAN:
            scores = obs.reshape(env.cfg.max_devices, -1)[:, 3]
            visible = visible[scores[visible] > self.threshold]
        elif kind in (DefenderAction.CHECKPOINT, DefenderAction.RESTORE):
            visible = visible[:1]  # network-wide, one nominal device
        if visible.size == 0:
            return JointAction.noop(Role.DEFENDER)
        n = visible.size
        return JointAction(Role.DEFENDER, int(kind), tuple(int(d) for d in visible), (0,) * n, (0,) * n)


def baseline(kind: str, role: Role, seed: int | None = None) -> Policy:
    role = Role(role)
    if kind == "pass":
        return PassPolicy(role)
    if kind == "random":
        return RandomPolicy(role, seed)
    if kind == "preset" and role is Role.DEFENDER:
        return PresetDefender()
    raise KeyError(f"no {kind!r} baseline for the {role.value}")
