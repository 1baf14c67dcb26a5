"""Joint combinatorial actions, their fixed-width encodings, and candidate grids."""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .model import ACTION_TYPES, AttackerAction, DefenderAction, Role


class InvalidAction(ValueError):
    """A malformed or state-inconsistent action; never silently ignored."""


PASS_TYPE = {Role.DEFENDER: int(DefenderAction.PASS), Role.ATTACKER: int(AttackerAction.PASS)}


@dataclass(frozen=True)
class JointAction:
    role: Role
    type: int
    devices: tuple[int, ...] = ()
    exploits: tuple[int, ...] = ()  # per-device exploit index, aligned with devices
    apps: tuple[int, ...] = ()  # per-device app index, aligned with devices

    def __post_init__(self):
        n = len(self.devices)
        if len(self.exploits) != n or len(self.apps) != n:
            raise InvalidAction("per-device exploit/app assignments must align with devices")
        if len(set(self.devices)) != n:
            raise InvalidAction("duplicate device in action")

    @classmethod
    def noop(cls, role: Role) -> JointAction:
        return cls(Role(role), PASS_TYPE[Role(role)])

    @classmethod
    def single(cls, role: Role, type_: int, device: int, exploit: int = 0, app: int = 0) -> JointAction:
        return cls(Role(role), int(type_), (int(device),), (int(exploit),), (int(app),))

    @property
    def is_pass(self) -> bool:
        return self.type == PASS_TYPE[self.role]

    def assignments(self):
        return zip(self.devices, self.exploits, self.apps)

    def label(self) -> str:
        name = ACTION_TYPES[self.role](self.type).name.lower()
        if not self.devices:
            return name
        return f"{name}:" + ",".join(f"{d}/{e}/{p}" for d, e, p in self.assignments())


@dataclass(frozen=True)
class ActionSpace:
    """Dimensions (types T, devices D, exploits E, apps P) of one role's actions.

    Encoding layout: ``[type one-hot T][device multi-hot D][exploit multi-hot E]
    [app multi-hot P]``; the exploit/app blocks hold the union of the
    per-device assignments.
    """

    role: Role
    n_devices: int
    n_exploits: int
    n_apps: int

    @property
    def n_types(self) -> int:
        return len(ACTION_TYPES[self.role])

    @property
    def width(self) -> int:
        return self.n_types + self.n_devices + self.n_exploits + self.n_apps

    @property
    def pass_type(self) -> int:
        return PASS_TYPE[self.role]

    def encode(self, a: JointAction) -> np.ndarray:
        v = np.zeros(self.width)
        self._fill(v, a)
        return v

    def encode_many(self, actions: list[JointAction]) -> np.ndarray:
        out = np.zeros((len(actions), self.width))
        for row, a in zip(out, actions):
            self._fill(row, a)
        return out

    def _fill(self, v: np.ndarray, a: JointAction) -> None:
        T, D, E = self.n_types, self.n_devices, self.n_exploits
        v[a.type] = 1.0
        for d, e, p in a.assignments():
            v[T + d] = 1.0
            v[T + D + e] = 1.0
            v[T + D + E + p] = 1.0

    # -- per-device candidate grid -----------------------------------------
    @cached_property
    def grid(self) -> np.ndarray:
        """Static single-device candidates as rows ``(device, type, exploit, app)``.

        Only dimensions that matter for a type are expanded: the defender's
        app index for UPGRADE, the attacker's exploit index for ATTACK.
        """
        rows = []
        for d in range(self.n_devices):
            for t in range(self.n_types):
                if t == self.pass_type:
                    continue
                if self.role is Role.DEFENDER and t == DefenderAction.UPGRADE:
                    rows += [(d, t, 0, p) for p in range(self.n_apps)]
                elif self.role is Role.ATTACKER and t == AttackerAction.ATTACK:
                    rows += [(d, t, e, 0) for e in range(self.n_exploits)]
                else:
                    rows.append((d, t, 0, 0))
        return np.array(rows, dtype=np.int64)

    @cached_property
    def grid_encoding(self) -> np.ndarray:
        g = self.grid
        T, D, E = self.n_types, self.n_devices, self.n_exploits
        enc = np.zeros((len(g), self.width))
        r = np.arange(len(g))
        enc[r, g[:, 1]] = 1.0
        enc[r, T + g[:, 0]] = 1.0
        enc[r, T + D + g[:, 2]] = 1.0
        enc[r, T + D + E + g[:, 3]] = 1.0
        return enc

    @cached_property
    def noop_encoding(self) -> np.ndarray:
        return self.encode(JointAction.noop(self.role))

    def row_mask(self, type_mask: np.ndarray, exploit_mask: np.ndarray | None = None) -> np.ndarray:
        """Candidate rows valid under a ``(devices, types)`` mask and exploit mask."""
        g = self.grid
        ok = type_mask[g[:, 0], g[:, 1]]
        if exploit_mask is not None:
            ok = ok & exploit_mask[g[:, 2]]
        return ok

    def row_action(self, r: int) -> JointAction:
        d, t, e, p = (int(v) for v in self.grid[r])
        return JointAction.single(self.role, t, d, e, p)
