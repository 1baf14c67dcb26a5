"""Device state algebra: bit layouts, exploits, probes, updates and utilities.

Every delta/matching function here is pure: it never mutates its inputs and
returns fresh arrays, so states can be shared freely between rollouts.
"""

from __future__ import annotations

import dataclasses
import enum
from dataclasses import dataclass, field

import numpy as np


class UpdateNotApplicable(ValueError):
    """Raised when a software update's configuration requirement is unmet."""


class Role(str, enum.Enum):
    ATTACKER = "attacker"
    DEFENDER = "defender"


class DefenderAction(enum.IntEnum):
    CLEAN = 0
    CHECKPOINT = 1
    RESTORE = 2
    UPGRADE = 3
    SCAN = 4
    BLOCK = 5
    UNBLOCK = 6
    PASS = 7


class AttackerAction(enum.IntEnum):
    ATTACK = 0
    PROBE = 1
    PASS = 2


ACTION_TYPES = {Role.DEFENDER: DefenderAction, Role.ATTACKER: AttackerAction}


# ---------------------------------------------------------------------------
# Bit layouts
# ---------------------------------------------------------------------------

N_VERSIONS = 4  # one-hot version field width


@dataclass(frozen=True)
class BitLayout:
    """Fixed per-scenario layout of the configuration and compromise bits.

    Configuration bits::

        [OS code: 2][OS version: 4 one-hot][(installed + 4-bit version) x apps]
        [open-port flags][zero-day flaw flags]

    Compromise bits::

        [compromised][root access][exploit-id one-hot x exploit_slots]
    """

    n_apps: int = 5
    n_ports: int = 4
    n_flaws: int = 10
    exploit_slots: int = 16

    @property
    def app_width(self) -> int:
        return 1 + N_VERSIONS

    @property
    def config_width(self) -> int:
        return 2 + N_VERSIONS + self.n_apps * self.app_width + self.n_ports + self.n_flaws

    @property
    def compromise_width(self) -> int:
        return 2 + self.exploit_slots

    # config field offsets
    os_code_slice = slice(0, 2)
    os_version_slice = slice(2, 2 + N_VERSIONS)

    def app_installed_index(self, app: int) -> int:
        self._check_app(app)
        return 2 + N_VERSIONS + app * self.app_width

    def app_version_slice(self, app: int) -> slice:
        start = self.app_installed_index(app) + 1
        return slice(start, start + N_VERSIONS)

    def port_index(self, port: int) -> int:
        if not 0 <= port < self.n_ports:
            raise IndexError(f"port {port} outside layout")
        return 2 + N_VERSIONS + self.n_apps * self.app_width + port

    def flaw_index(self, flaw: int) -> int:
        if not 0 <= flaw < self.n_flaws:
            raise IndexError(f"flaw {flaw} outside layout")
        return 2 + N_VERSIONS + self.n_apps * self.app_width + self.n_ports + flaw

    def _check_app(self, app: int) -> None:
        if not 0 <= app < self.n_apps:
            raise IndexError(f"app {app} outside layout")

    # compromise field offsets
    COMPROMISED = 0
    ROOT = 1

    def exploit_index(self, slot: int) -> int:
        if not 0 <= slot < self.exploit_slots:
            raise IndexError(f"exploit slot {slot} outside layout")
        return 2 + slot

    # -- encoding ----------------------------------------------------------
    def encode_config(
        self,
        os_code: int,
        os_version: int,
        apps: dict[int, int] | None = None,
        ports: set[int] | frozenset[int] = frozenset(),
        flaws: set[int] | frozenset[int] = frozenset(),
    ) -> np.ndarray:
        bits = np.zeros(self.config_width, dtype=bool)
        if not 0 <= os_code < 4:
            raise ValueError("OS code must fit in 2 bits")
        bits[0] = bool(os_code & 0b10)
        bits[1] = bool(os_code & 0b01)
        bits[self.os_version_slice.start + _check_version(os_version)] = True
        for app, version in (apps or {}).items():
            bits[self.app_installed_index(app)] = True
            bits[self.app_version_slice(app).start + _check_version(version)] = True
        for port in ports:
            bits[self.port_index(port)] = True
        for flaw in flaws:
            bits[self.flaw_index(flaw)] = True
        return bits

    def os_code(self, config: np.ndarray) -> int:
        return int(config[0]) * 2 + int(config[1])

    def os_version(self, config: np.ndarray) -> int | None:
        return _onehot_value(config[self.os_version_slice])

    def app_version(self, config: np.ndarray, app: int) -> int | None:
        """Installed version of ``app``, or None if the app is not installed."""
        if not config[self.app_installed_index(app)]:
            return None
        return _onehot_value(config[self.app_version_slice(app)])

    def compromise_delta(self, slot: int, root: bool = False) -> np.ndarray:
        delta = np.zeros(self.compromise_width, dtype=bool)
        delta[self.COMPROMISED] = True
        delta[self.ROOT] = root
        delta[self.exploit_index(slot)] = True
        return delta


def _check_version(version: int) -> int:
    if not 0 <= version < N_VERSIONS:
        raise ValueError(f"version {version} outside 0..{N_VERSIONS - 1}")
    return version


def _onehot_value(field_bits: np.ndarray) -> int | None:
    hot = np.flatnonzero(field_bits)
    # a malformed field (0 or >1 hot bits) reads as unknown
    return int(hot[0]) if hot.size == 1 else None


# ---------------------------------------------------------------------------
# Configuration predicates
# ---------------------------------------------------------------------------

AppWindow = tuple[int, int, int]  # (app, min version, max version), inclusive


@dataclass(frozen=True)
class ConfigReq:
    """Conjunction of OS/app/version/port/flaw constraints.

    ``apps`` must all hold; when ``apps_any`` is non-empty at least one of its
    windows must hold as well. The empty requirement matches every device.
    """

    os_codes: frozenset[int] | None = None
    os_versions: tuple[int, int] | None = None
    apps: tuple[AppWindow, ...] = ()
    apps_any: tuple[AppWindow, ...] = ()
    ports: frozenset[int] = frozenset()
    flaws: frozenset[int] = frozenset()

    def to_dict(self) -> dict:
        return {
            "os_codes": None if self.os_codes is None else sorted(self.os_codes),
            "os_versions": None if self.os_versions is None else list(self.os_versions),
            "apps": [list(w) for w in self.apps],
            "apps_any": [list(w) for w in self.apps_any],
            "ports": sorted(self.ports),
            "flaws": sorted(self.flaws),
        }

    @classmethod
    def from_dict(cls, d: dict) -> ConfigReq:
        return cls(
            os_codes=None if d.get("os_codes") is None else frozenset(d["os_codes"]),
            os_versions=None if d.get("os_versions") is None else tuple(d["os_versions"]),
            apps=tuple(tuple(w) for w in d.get("apps", ())),
            apps_any=tuple(tuple(w) for w in d.get("apps_any", ())),
            ports=frozenset(d.get("ports", ())),
            flaws=frozenset(d.get("flaws", ())),
        )


def _window_ok(config: np.ndarray, layout: BitLayout, window: AppWindow) -> bool:
    app, lo, hi = window
    version = layout.app_version(config, app)
    return version is not None and lo <= version <= hi


def config_matches(x: DeviceState, req: ConfigReq, layout: BitLayout) -> bool:
    """True iff every constraint in ``req`` holds for ``x``'s config bits."""
    config = x.config
    if req.os_codes is not None and layout.os_code(config) not in req.os_codes:
        return False
    if req.os_versions is not None:
        version = layout.os_version(config)
        if version is None or not req.os_versions[0] <= version <= req.os_versions[1]:
            return False
    if not all(_window_ok(config, layout, w) for w in req.apps):
        return False
    if req.apps_any and not any(_window_ok(config, layout, w) for w in req.apps_any):
        return False
    if any(not config[layout.port_index(p)] for p in req.ports):
        return False
    return all(config[layout.flaw_index(f)] for f in req.flaws)


# ---------------------------------------------------------------------------
# Device and unit-of-computation tuples
# ---------------------------------------------------------------------------


@dataclass
class DeviceState:
    id: int
    config: np.ndarray
    compromise: np.ndarray
    anomaly_score: float = 0.0
    busy_until: int = 0
    online: bool = True
    attacker_owned: bool = False
    domain_controller: bool = False
    known_to_attacker: bool = False

    @property
    def compromised(self) -> bool:
        return bool(self.compromise[BitLayout.COMPROMISED])

    def busy(self, t: int) -> bool:
        return self.busy_until > t

    def copy(self) -> DeviceState:
        return dataclasses.replace(self, config=self.config.copy(), compromise=self.compromise.copy())


@dataclass(frozen=True)
class Exploit:
    id: int  # compromise-bit exploit slot; doubles as the knowledge-ledger key
    name: str
    req: ConfigReq
    delta: np.ndarray = field(compare=False)
    duration: int = 1
    value: float = 1.0
    success_prob: float = 1.0
    zero_day: bool = False

    def __post_init__(self):
        if not 0.0 <= self.success_prob <= 1.0:
            raise ValueError("success probability must lie in [0, 1]")
        if self.duration < 0:
            raise ValueError("duration must be non-negative")


@dataclass(frozen=True)
class Probe:
    id: int
    req: ConfigReq
    success_prob: float
    revealed: tuple[int, ...]  # config-bit indices disclosed on success
    name: str = "scan"


@dataclass(frozen=True)
class SoftwareUpdate:
    id: int
    req: ConfigReq
    duration: int
    delta: np.ndarray = field(compare=False)


def make_exploit(
    layout: BitLayout,
    slot: int,
    name: str,
    req: ConfigReq,
    success_prob: float,
    value: float = 1.0,
    duration: int = 1,
    zero_day: bool = False,
    root: bool = False,
) -> Exploit:
    return Exploit(
        id=slot,
        name=name,
        req=req,
        delta=layout.compromise_delta(slot, root=root),
        duration=duration,
        value=value,
        success_prob=success_prob,
        zero_day=zero_day,
    )


def version_update(
    layout: BitLayout, app: int | None, old: int, new: int, duration: int = 2, uid: int = 0
) -> SoftwareUpdate:
    """Update moving ``app`` (or the OS when ``app`` is None) from ``old`` to ``new``.

    The XOR mask flips exactly the old- and new-version bits.
    """
    _check_version(old)
    _check_version(new)
    delta = np.zeros(layout.config_width, dtype=bool)
    field_slice = layout.os_version_slice if app is None else layout.app_version_slice(app)
    delta[field_slice.start + old] ^= True
    delta[field_slice.start + new] ^= True
    if app is None:
        req = ConfigReq(os_versions=(old, old))
    else:
        req = ConfigReq(apps=((app, old, old),))
    return SoftwareUpdate(id=uid, req=req, duration=duration, delta=delta)


def apply_exploit_delta(x: DeviceState, e: Exploit) -> DeviceState:
    """OR the exploit's compromise mask into ``x``; the success roll is the caller's."""
    out = x.copy()
    out.compromise = np.logical_or(x.compromise, e.delta)
    return out


def apply_update_delta(x: DeviceState, u: SoftwareUpdate, layout: BitLayout, t: int = 0) -> DeviceState:
    """XOR the update mask into the config bits and mark the device busy."""
    if not config_matches(x, u.req, layout):
        raise UpdateNotApplicable(f"update {u.id} does not apply to device {x.id}")
    out = x.copy()
    out.config = np.logical_xor(x.config, u.delta)
    out.busy_until = max(x.busy_until, t + u.duration)
    return out


# ---------------------------------------------------------------------------
# Immediate utilities
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class UtilityTable:
    clean_compromised: float = 0.30
    clean_clean: float = -0.01
    checkpoint: float = -0.50
    restore: float = -1.00
    upgrade: float = -1.00
    scan: float = -0.50
    block: float = -0.50
    unblock: float = -0.50
    attack_success: float = 1.00
    domain_controller_bonus: float = 10.0
    probe_discovery: float = 0.10
    work_scale: float = 1.0
    comp_scale: float = 30.0
    def_scale: float = 1.0

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


_DEFENDER_ENTRY = {
    DefenderAction.CHECKPOINT: "checkpoint",
    DefenderAction.RESTORE: "restore",
    DefenderAction.UPGRADE: "upgrade",
    DefenderAction.SCAN: "scan",
    DefenderAction.BLOCK: "block",
    DefenderAction.UNBLOCK: "unblock",
}


def _defender_cost(table: UtilityTable, value: float) -> float:
    # def_scale multiplies cost magnitudes only; the clean reward stays nominal
    return value * table.def_scale if value < 0 else value


def immediate_utility(
    table: UtilityTable,
    role: Role,
    action: int,
    *,
    compromised: bool = False,
    discovered: bool = False,
    success: bool = False,
    domain_controller: bool = False,
) -> float:
    """Per-device immediate utility of one action outcome.

    ``compromised`` is the pre-clean state for CLEAN. For ATTACK, ``success``
    marks a new compromise and ``domain_controller`` adds the DC bonus. For
    PROBE, ``discovered`` marks a new discovery.
    """
    role = Role(role)
    if role is Role.DEFENDER:
        action = DefenderAction(action)
        if action is DefenderAction.PASS:
            return 0.0
        if action is DefenderAction.CLEAN:
            value = table.clean_compromised if compromised else table.clean_clean
        else:
            value = getattr(table, _DEFENDER_ENTRY[action])
        return _defender_cost(table, value)
    action = AttackerAction(action)
    if action is AttackerAction.ATTACK:
        if not success:
            return 0.0
        return table.attack_success + (table.domain_controller_bonus if domain_controller else 0.0)
    if action is AttackerAction.PROBE:
        return table.probe_discovery if discovered else 0.0
    return 0.0
