"""The attacker-defender POSG: scenario assembly, action semantics, observations and rewards."""

from __future__ import annotations

import csv
import dataclasses
import functools
import json
import logging
import math
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import detector as det
from .actions import ActionSpace, InvalidAction, JointAction
from .model import (
    N_VERSIONS,
    AttackerAction,
    BitLayout,
    ConfigReq,
    DefenderAction,
    DeviceState,
    Exploit,
    Role,
    UtilityTable,
    apply_exploit_delta,
    apply_update_delta,
    config_matches,
    immediate_utility,
    make_exploit,
    version_update,
)
from .netgraph import ChurnConfig, NetworkGraph, _attach, _preferential_targets, evolve, generate_initial
from .workloads import NoCheckpoint, WorkloadConfig, WorkloadLedger, spawn
from .zeroday import KnowledgeLedger, ZeroDayPrior, sample_zero_day

log = logging.getLogger(__name__)

# Volt scenario vocabulary
VPN, RDP, AD, PASSWORD_MGMT, FORTIOS = range(5)
APP_NAMES = ("vpn", "rdp", "ad", "password_mgmt", "fortios")
WINDOWS_SERVER = 0
ZERO_DAY_SLOT0 = 2  # zero-day candidate k lives in exploit slot 2 + k

DEFENDER_FEATURES = 6
ATTACKER_FEATURES = 4


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ExploitSpec:
    name: str
    slot: int
    req: ConfigReq
    success_prob: float
    value: float = 1.0
    duration: int = 1

    def build(self, layout: BitLayout, zero_day: bool = False) -> Exploit:
        return make_exploit(
            layout, self.slot, self.name, self.req, self.success_prob,
            value=self.value, duration=self.duration, zero_day=zero_day,
        )

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "slot": self.slot,
            "req": self.req.to_dict(),
            "success_prob": self.success_prob,
            "value": self.value,
            "duration": self.duration,
        }

    @classmethod
    def from_dict(cls, d: dict) -> ExploitSpec:
        return cls(
            name=str(d["name"]),
            slot=int(d["slot"]),
            req=ConfigReq.from_dict(d.get("req", {})),
            success_prob=float(d["success_prob"]),
            value=float(d.get("value", 1.0)),
            duration=int(d.get("duration", 1)),
        )


VOLT_EXPLOITS = (
    ExploitSpec("ED3A999C", 0, ConfigReq(apps_any=((VPN, 0, 2), (FORTIOS, 0, 2), (PASSWORD_MGMT, 0, 2))), 0.6),
    ExploitSpec("0A5713AE", 1, ConfigReq(apps_any=((RDP, 0, 2), (AD, 0, 2))), 0.6),
)


@dataclass(frozen=True)
class ZeroDayConfig:
    regime: str = "fixed"  # fixed | submartingale
    n_candidates: int = 1
    known: bool = False
    n_flaws: int = 10  # flaw instances in the fixed regime
    success_prob: float = 0.8
    common_exploit: int = 0  # index into EnvConfig.exploits kept next to z

    def __post_init__(self):
        if self.regime not in ("fixed", "submartingale"):
            raise ConfigError(f"unknown zero-day regime {self.regime!r}")
        if self.n_candidates < 1:
            raise ConfigError("zero-day prior needs at least one candidate")


@dataclass(frozen=True)
class EnvConfig:
    n_devices: int = 10
    max_devices: int = 20
    steps: int = 30
    eta: float = 0.4
    n_attacker_owned: int = 5
    n_domain_controllers: int = 3
    gamma: float = 0.99
    shaping_beta: float = 0.05
    checkpoint_capacity: int = 1
    utilities: UtilityTable = UtilityTable()
    churn: ChurnConfig = ChurnConfig()
    workload: WorkloadConfig = WorkloadConfig()
    detector: DetectorConfig = det.DetectorConfig()
    layout: BitLayout = BitLayout()
    exploits: tuple[ExploitSpec, ...] = VOLT_EXPLOITS
    zero_day: ZeroDayConfig | None = None
    probe_success: float = 0.8
    dc_success_prob: float = 1.0
    app_install_prob: float = 0.6
    versions: tuple[int, int] = (1, 3)
    clean_busy: int = 1
    upgrade_busy: int = 2
    scan_busy: int = 1
    restore_busy: tuple[float, float, float] = (1.0, 2.0, 4.0)
    benign_probe_rate: float = 0.2
    benign_exploit_rate: float = 0.05
    adversarial_rate: float = 1.0
    n_attacker_exploits: int = 4
    n_attacker_apps: int = 4
    n_defender_exploits: int = 5
    detector_seed: int = 0

    def validate(self) -> EnvConfig:
        if not 0.0 <= self.eta <= 1.0:
            raise ConfigError("eta must lie in [0, 1]")
        if self.steps < 1:
            raise ConfigError("episodes need at least one step")
        if self.checkpoint_capacity < 1:
            raise ConfigError("checkpoint capacity must be >= 1")
        if self.n_domain_controllers > self.n_devices:
            raise ConfigError("more domain controllers than devices")
        if self.n_devices + self.n_attacker_owned > self.max_devices:
            raise ConfigError("initial devices plus attacker-owned exceed max_devices")
        if self.n_devices < self.churn.attach_m + 1:
            raise ConfigError("network too small for preferential attachment")
        if len(self.arsenal_specs()) > self.n_attacker_exploits:
            raise ConfigError("attacker arsenal wider than its exploit encoding")
        implant = self.layout.exploit_slots - 1
        for spec in self.exploits:
            if not 0 <= spec.slot < ZERO_DAY_SLOT0:
                raise ConfigError(f"exploit {spec.name} must use slot 0 or 1")
        if self.zero_day is not None:
            zd = self.zero_day
            if zd.n_candidates > self.layout.n_flaws or ZERO_DAY_SLOT0 + zd.n_candidates > implant:
                raise ConfigError("zero-day candidate set exceeds the flaw layout")
            if not 0 <= zd.common_exploit < len(self.exploits):
                raise ConfigError("zero-day common exploit index out of range")
        if self.layout.n_apps != len(APP_NAMES):
            raise ConfigError("the scenario assumes five application slots")
        return self

    def arsenal_specs(self) -> tuple[ExploitSpec, ...]:
        if self.zero_day is None:
            return self.exploits
        return (self.exploits[self.zero_day.common_exploit],)

    # -- convenience overrides used by sweeps --------------------------------
    def with_utilities(self, **kw) -> EnvConfig:
        return dataclasses.replace(self, utilities=dataclasses.replace(self.utilities, **kw))

    # -- JSON ----------------------------------------------------------------
    def to_dict(self) -> dict:
        out = {}
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if f.name == "exploits":
                out[f.name] = [e.to_dict() for e in v]
            elif dataclasses.is_dataclass(v):
                out[f.name] = dataclasses.asdict(v)
            elif isinstance(v, tuple):
                out[f.name] = list(v)
            else:
                out[f.name] = v
        return out

    @classmethod
    def from_dict(cls, d: dict) -> EnvConfig:
        nested = {
            "utilities": UtilityTable,
            "churn": ChurnConfig,
            "workload": WorkloadConfig,
            "detector": det.DetectorConfig,
            "layout": BitLayout,
            "zero_day": ZeroDayConfig,
        }
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        kw = {}
        try:
            for k, v in d.items():
                if k in nested and v is not None:
                    kw[k] = nested[k](**v)
                elif k == "exploits":
                    kw[k] = tuple(ExploitSpec.from_dict(e) for e in v)
                elif isinstance(v, list):
                    kw[k] = tuple(v)
                else:
                    kw[k] = v
            return cls(**kw).validate()
        except (TypeError, KeyError) as exc:
            raise ConfigError(str(exc)) from exc

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))

    @classmethod
    def load(cls, path: str | Path) -> EnvConfig:
        try:
            raw = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read scenario {path}: {exc}") from exc
        return cls.from_dict(raw)


DetectorConfig = det.DetectorConfig


ZERO_DAY_WORK_SCALE = 0.01  # zero-day experiments value work 100x lower


def zero_day_scenario(
    base: EnvConfig | None = None, regime: str = "fixed", n_candidates: int = 1, known: bool = False
) -> EnvConfig:
    """Volt setup with one common exploit plus a private zero-day drawn from ``n_candidates``."""
    base = base or EnvConfig()
    zd = dataclasses.replace(base.zero_day or ZeroDayConfig(), regime=regime, n_candidates=n_candidates, known=known)
    cfg = dataclasses.replace(base.with_utilities(work_scale=ZERO_DAY_WORK_SCALE), zero_day=zd)
    cfg.validate()
    return cfg


def zero_day_prior(cfg: EnvConfig) -> ZeroDayPrior:
    zd = cfg.zero_day
    templates = [
        make_exploit(
            cfg.layout, ZERO_DAY_SLOT0 + k, f"zeroday-{k}", ConfigReq(flaws=frozenset({k})),
            zd.success_prob, zero_day=True,
        )
        for k in range(zd.n_candidates)
    ]
    return ZeroDayPrior(templates)


# ---------------------------------------------------------------------------
# Per-step bookkeeping
# ---------------------------------------------------------------------------


@dataclass
class Checkpoint:
    t: int
    devices: list[DeviceState]
    graph: NetworkGraph
    blocked: dict[int, set[tuple[int, int]]]
    duration: int = 0


@dataclass
class StepInfo:
    t: int
    attacker_action_reward: float = 0.0
    attacker_state_reward: float = 0.0
    defender_action_reward: float = 0.0
    work_value: float = 0.0
    clawback: float = 0.0
    compromised_network: int = 0
    compromised_total: int = 0
    workloads_completed: int = 0
    scans: int = 0
    defense_cost: float = 0.0
    phi: float = 0.0
    successes: int = 0
    discoveries: int = 0
    churn: list = field(default_factory=list)


@dataclass
class StepResult:
    attacker_obs: np.ndarray
    defender_obs: np.ndarray
    attacker_reward: float  # includes shaping
    defender_reward: float
    shaping: float
    done: bool
    info: StepInfo


TRAJECTORY_HEADER = (
    "step", "role", "action_type", "devices", "action_reward", "state_reward", "shaping",
    "work_value", "clawback", "total_reward", "compromised", "workloads_completed",
)


# ---------------------------------------------------------------------------
# Environment
# ---------------------------------------------------------------------------


class CyberEnv:
    """One Volt-style episode at a time; instances share no mutable state."""

    def __init__(self, cfg: EnvConfig | None = None, *, detector_enabled: bool = True):
        self.cfg = (cfg or EnvConfig()).validate()
        self.layout = self.cfg.layout
        self.detector_enabled = detector_enabled
        n = self.cfg.max_devices
        self.spaces = {
            Role.DEFENDER: ActionSpace(Role.DEFENDER, n, self.cfg.n_defender_exploits, self.layout.n_apps),
            Role.ATTACKER: ActionSpace(Role.ATTACKER, n, self.cfg.n_attacker_exploits, self.cfg.n_attacker_apps),
        }
        self.prior = zero_day_prior(self.cfg) if self.cfg.zero_day is not None else None
        self.t = 0
        self.record = False
        self.trajectory: list[dict] = []

    @property
    def obs_width(self) -> dict[Role, int]:
        n = self.cfg.max_devices
        return {Role.DEFENDER: DEFENDER_FEATURES * n, Role.ATTACKER: ATTACKER_FEATURES * n}

    def action_space(self, role: Role) -> ActionSpace:
        return self.spaces[Role(role)]

    # -- reset -----------------------------------------------------------------
    def reset(self, seed: int | None = None, zero_day_index: int | None = None) -> tuple[np.ndarray, np.ndarray]:
        """Assemble the scenario; returns ``(attacker_obs, defender_obs)``."""
        cfg = self.cfg
        streams = np.random.SeedSequence(seed).spawn(8)
        rng_setup, self.rng_churn, self.rng_work, self.rng_traffic, self.rng_attack, self.rng_defend, rng_z, _ = (
            np.random.default_rng(s) for s in streams
        )
        n_net, n_max, layout = cfg.n_devices, cfg.max_devices, self.layout
        self.t = 0
        self.trajectory = []

        graph = generate_initial(n_net, cfg.churn.attach_m, rng_setup, n_slots=n_max, min_size=cfg.churn.min_size)
        dcs = set(range(cfg.n_domain_controllers))
        graph.protected = set(dcs)
        self.devices = [self._fresh_device(i, rng_setup, dc=i in dcs) for i in range(n_max)]
        for i in range(n_max):
            self.devices[i].online = i < n_net

        # attacker-owned infrastructure hooks into the network
        owned = list(range(n_net, n_net + cfg.n_attacker_owned))
        members = list(range(n_net))
        for v in owned:
            graph.online[v] = True
            graph.attacker_owned.add(v)
            targets = _preferential_targets(members, graph.degrees(), cfg.churn.attach_m, rng_setup)
            _attach(graph, v, targets)
            self._make_owned(self.devices[v])
        graph.reconnect_attacker_owned()
        self.graph = graph

        # zero-day flaws, private draw and the defender's knowledge
        self.zero_day: Exploit | None = None
        arsenal = [s.build(layout) for s in cfg.arsenal_specs()]
        if cfg.zero_day is not None:
            self._place_flaws(rng_setup)
            if zero_day_index is None:
                self.zero_day = sample_zero_day(self.prior, rng_z)
            else:
                self.zero_day = self.prior.templates[zero_day_index]
            arsenal.append(self.zero_day)
        self.arsenal = arsenal
        known = {e.id for e in arsenal if not e.zero_day}
        self.ledger = KnowledgeLedger.create(
            all_ids={e.id for e in arsenal},
            known=known,
        )
        if cfg.zero_day is not None and cfg.zero_day.known:
            self.ledger.reveal(self.zero_day.id)

        # initial footholds: floor(eta * N) active hosts
        k = math.floor(cfg.eta * n_net)
        for i in rng_setup.choice(n_net, size=k, replace=False):
            self._implant(self.devices[int(i)])

        self.work = WorkloadLedger(cfg.workload, layout)
        self.checkpoints: deque[Checkpoint] = deque(maxlen=cfg.checkpoint_capacity)
        self.blocked: dict[int, set[tuple[int, int]]] = {}
        self.recent: dict[int, deque] = {i: deque(maxlen=cfg.detector.window) for i in range(n_max)}
        self.forest = burn_in_forest(cfg) if self.detector_enabled else None
        self.phi_prev = self.phi()
        self.phi0 = self.phi_prev
        self.totals = {
            "attacker": 0.0, "defender": 0.0, "shaping": 0.0, "scans": 0, "workloads": 0,
            "defense_cost": 0.0, "phi_sum": 0.0,
        }
        return self.observe(Role.ATTACKER), self.observe(Role.DEFENDER)

    def _fresh_device(self, i: int, rng: np.random.Generator, dc: bool = False) -> DeviceState:
        cfg, layout = self.cfg, self.layout
        lo, hi = cfg.versions
        apps = {}
        for app in range(layout.n_apps):
            if rng.random() < cfg.app_install_prob or (dc and app == AD):
                apps[app] = int(rng.integers(lo, hi + 1))
        ports = {p for p in range(layout.n_ports) if rng.random() < 0.5}
        config = layout.encode_config(WINDOWS_SERVER, int(rng.integers(lo, hi + 1)), apps, ports)
        return DeviceState(
            id=i,
            config=config,
            compromise=np.zeros(layout.compromise_width, dtype=bool),
            domain_controller=dc,
            online=False,
        )

    def _implant(self, dev: DeviceState) -> None:
        dev.compromise = np.logical_or(dev.compromise, self.layout.compromise_delta(self.layout.exploit_slots - 1, root=True))
        dev.known_to_attacker = True

    def _make_owned(self, dev: DeviceState) -> None:
        dev.attacker_owned = True
        dev.online = True
        self._implant(dev)

    def _place_flaws(self, rng: np.random.Generator) -> None:
        zd, n_net = self.cfg.zero_day, self.cfg.n_devices
        placements: list[tuple[int, int]] = []
        if zd.regime == "fixed":
            order = rng.permutation(n_net)
            placements = [(int(order[i % n_net]), i % zd.n_candidates) for i in range(zd.n_flaws)]
        else:
            for k in range(zd.n_candidates):
                hosts = rng.choice(n_net, size=min(zd.n_candidates, n_net), replace=False)
                placements += [(int(h), k) for h in hosts]
        for dev, flaw in placements:
            self.devices[dev].config[self.layout.flaw_index(flaw)] = True

    # -- observations ----------------------------------------------------------
    def in_network(self, i: int) -> bool:
        d = self.devices[i]
        return d.online and not d.attacker_owned

    def observe(self, role: Role) -> np.ndarray:
        role = Role(role)
        layout = self.layout
        if role is Role.DEFENDER:
            obs = np.full((self.cfg.max_devices, DEFENDER_FEATURES), -1.0)
            for d in self.devices:
                if d.online and not d.attacker_owned:
                    obs[d.id] = (layout.os_code(d.config), _num(layout.os_version(d.config)), -1.0,
                                 d.anomaly_score, -1.0, 1.0)
            return obs.ravel()
        obs = np.full((self.cfg.max_devices, ATTACKER_FEATURES), -1.0)
        for d in self.devices:
            if d.online and d.known_to_attacker:
                obs[d.id] = (layout.os_code(d.config), _num(layout.os_version(d.config)),
                             float(d.compromised), float(d.domain_controller))
        return obs.ravel()

    # -- validity --------------------------------------------------------------
    def type_mask(self, role: Role) -> np.ndarray:
        """Boolean ``(max_devices, n_types)`` mask of valid single-device picks."""
        role = Role(role)
        space = self.spaces[role]
        mask = np.zeros((self.cfg.max_devices, space.n_types), dtype=bool)
        if role is Role.DEFENDER:
            visible = np.array([self.in_network(i) for i in range(self.cfg.max_devices)])
            for t in (DefenderAction.CLEAN, DefenderAction.CHECKPOINT, DefenderAction.UPGRADE, DefenderAction.SCAN):
                mask[:, t] = visible
            mask[:, DefenderAction.BLOCK] = visible & (self.graph.degrees() > 0)
            if self.checkpoints:
                mask[:, DefenderAction.RESTORE] = visible
            for i, edges in self.blocked.items():
                mask[i, DefenderAction.UNBLOCK] = bool(edges) and visible[i]
            return mask
        for d in self.devices:
            if d.attacker_owned:
                continue
            mask[d.id, AttackerAction.PROBE] = True
            mask[d.id, AttackerAction.ATTACK] = d.known_to_attacker and d.online
        return mask

    def exploit_mask(self, role: Role) -> np.ndarray:
        space = self.spaces[Role(role)]
        mask = np.zeros(space.n_exploits, dtype=bool)
        if Role(role) is Role.ATTACKER:
            mask[: len(self.arsenal)] = True
        else:
            mask[0] = True
        return mask

    def validate(self, a: JointAction, role: Role) -> None:
        role = Role(role)
        if not isinstance(a, JointAction) or a.role is not role:
            raise InvalidAction(f"expected a {role.value} JointAction, got {a!r}")
        space = self.spaces[role]
        if not 0 <= a.type < space.n_types:
            raise InvalidAction(f"action type {a.type} outside the {role.value} set")
        if a.is_pass:
            if a.devices:
                raise InvalidAction("pass carries no devices")
            return
        if not a.devices:
            raise InvalidAction("non-pass action needs at least one device")
        if role is Role.DEFENDER and a.type == DefenderAction.RESTORE and not self.checkpoints:
            raise NoCheckpoint("restore requested with an empty checkpoint store")
        mask = self.type_mask(role)
        emask = self.exploit_mask(role)
        for d, e, p in a.assignments():
            if not 0 <= d < space.n_devices:
                raise InvalidAction(f"device {d} outside 0..{space.n_devices - 1}")
            if not 0 <= e < space.n_exploits or not 0 <= p < space.n_apps:
                raise InvalidAction(f"exploit/app index ({e}, {p}) out of range")
            if not mask[d, a.type]:
                raise InvalidAction(f"{a.label()} not valid on device {d} at t={self.t}")
            if role is Role.ATTACKER and a.type == AttackerAction.ATTACK and not emask[e]:
                raise InvalidAction(f"exploit index {e} not possessed")

    # -- dynamics --------------------------------------------------------------
    def phi(self) -> float:
        net = [d for d in self.devices if d.online and not d.attacker_owned]
        if not net:
            return 0.0
        return sum(d.compromised for d in net) / len(net)

    def holds_dc(self) -> bool:
        return any(d.domain_controller and d.compromised and d.online for d in self.devices)

    def _source(self, target: int) -> int | None:
        """Lowest-id compromised device with an active edge into ``target``."""
        for i in self.graph.in_neighbors(target):
            if self.devices[i].compromised and self.graph.active(i, target):
                return i
        return None

    def step(self, defender_action: JointAction, attacker_action: JointAction) -> StepResult:
        if self.t >= self.cfg.steps:
            raise RuntimeError("episode already finished; call reset()")
        self.validate(attacker_action, Role.ATTACKER)
        self.validate(defender_action, Role.DEFENDER)
        cfg, t = self.cfg, self.t
        info = StepInfo(t=t)
        traffic = {k: np.zeros(cfg.max_devices) for k in ("probe", "exploit", "fanout")}

        info.attacker_action_reward = self._apply_attacker(attacker_action, info, traffic)
        info.defender_action_reward = self._apply_defender(defender_action, info)
        info.defense_cost = defense_cost(defender_action, info.defender_action_reward, cfg.utilities)

        finished, value = self.work.tick(self.devices, t)
        info.workloads_completed = len(finished)
        info.work_value = value

        info.churn = evolve(self.graph, cfg.churn, self.rng_churn)
        self._sync_churn(info.churn)

        delegated_out = np.zeros(cfg.max_devices)
        for d in self.devices:
            for w in spawn(d, cfg.workload, self.rng_work, self.layout, t):
                host = self.work.place(w, self.graph, self.devices)
                if host is not None and host != w.origin:
                    delegated_out[w.origin] += 1
        self._emit_traffic(traffic, delegated_out)

        # rewards
        net_comp = sum(1 for d in self.devices if d.online and not d.attacker_owned and d.compromised)
        all_comp = sum(1 for d in self.devices if d.online and d.compromised)
        info.compromised_network, info.compromised_total = net_comp, all_comp
        info.attacker_state_reward = float(all_comp)
        phi = self.phi()
        info.phi = phi
        shaping = cfg.shaping_beta * (cfg.gamma * phi - self.phi_prev)
        self.phi_prev = phi
        u = cfg.utilities
        r_att = info.attacker_action_reward + info.attacker_state_reward
        r_def = (u.work_scale * info.work_value - u.comp_scale * net_comp
                 + info.defender_action_reward - u.work_scale * info.clawback)

        tot = self.totals
        tot["attacker"] += r_att
        tot["defender"] += r_def
        tot["shaping"] += shaping
        tot["scans"] += info.scans
        tot["workloads"] += info.workloads_completed
        tot["defense_cost"] += info.defense_cost
        tot["phi_sum"] += phi
        if self.record:
            self._log(attacker_action, defender_action, info, shaping, r_att, r_def)
        self.t += 1
        done = self.t >= cfg.steps
        return StepResult(self.observe(Role.ATTACKER), self.observe(Role.DEFENDER),
                          r_att + shaping, r_def, shaping, done, info)

    # -- attacker --------------------------------------------------------------
    def _apply_attacker(self, a: JointAction, info: StepInfo, traffic: dict) -> float:
        if a.is_pass:
            return 0.0
        table, reward = self.cfg.utilities, 0.0
        dc_guarantee = self.holds_dc()
        for d, e, _ in a.assignments():
            u = self.rng_attack.random()  # drawn for every attempt to keep streams aligned
            target = self.devices[d]
            src = self._source(d)
            if src is not None:
                traffic["fanout"][src] += 1
            if a.type == AttackerAction.ATTACK:
                exploit = self.arsenal[e]
                traffic["exploit"][d] += 1
                if exploit.zero_day:
                    self.ledger.reveal(exploit.id)
                if src is None or not config_matches(target, exploit.req, self.layout):
                    continue
                p = self.cfg.dc_success_prob if dc_guarantee else exploit.success_prob
                if u < p:
                    fresh = not target.compromised
                    self.devices[d] = target = apply_exploit_delta(target, exploit)
                    if fresh:
                        info.successes += 1
                        reward += immediate_utility(table, Role.ATTACKER, AttackerAction.ATTACK, success=True,
                                                    domain_controller=target.domain_controller)
            else:
                traffic["probe"][d] += 1
                if src is None or u >= self.cfg.probe_success:
                    continue
                fresh = not target.known_to_attacker
                target.known_to_attacker = True
                if fresh:
                    info.discoveries += 1
                    reward += immediate_utility(table, Role.ATTACKER, AttackerAction.PROBE, discovered=True)
        return reward

    def defensive_probe(self, target: int) -> dict | None:
        """Defender-side probe of a device outside its own network.

        Reuses the attacker probe path: it needs an in-network device with an
        active edge into ``target`` and succeeds with the probe probability.
        """
        src = next((i for i in self.graph.in_neighbors(target) if self.in_network(i)), None)
        if src is None or self.rng_defend.random() >= self.cfg.probe_success:
            return None
        dev = self.devices[target]
        return {"os_code": self.layout.os_code(dev.config), "os_version": self.layout.os_version(dev.config)}

    # -- defender --------------------------------------------------------------
    def _apply_defender(self, a: JointAction, info: StepInfo) -> float:
        if a.is_pass:
            return 0.0
        cfg, table, t = self.cfg, self.cfg.utilities, self.t
        kind = DefenderAction(a.type)
        total = 0.0
        if kind is DefenderAction.CHECKPOINT:
            self.checkpoint()
            total = immediate_utility(table, Role.DEFENDER, kind)
        elif kind is DefenderAction.RESTORE:
            info.clawback = self.restore()
            total = immediate_utility(table, Role.DEFENDER, kind)
        else:
            scanned = []
            for d, _, p in a.assignments():
                dev = self.devices[d]
                if kind is DefenderAction.CLEAN:
                    total += immediate_utility(table, Role.DEFENDER, kind, compromised=dev.compromised)
                    dev.compromise = np.zeros_like(dev.compromise)
                    dev.anomaly_score = 0.0
                    dev.busy_until = max(dev.busy_until, t + cfg.clean_busy)
                elif kind is DefenderAction.UPGRADE:
                    total += immediate_utility(table, Role.DEFENDER, kind)
                    v = self.layout.app_version(dev.config, p)
                    if v is None or v >= N_VERSIONS - 1:
                        log.debug("upgrade of app %s on device %s has no effect", p, d)
                        continue
                    upd = version_update(self.layout, p, v, v + 1, duration=cfg.upgrade_busy)
                    self.devices[d] = apply_update_delta(dev, upd, self.layout, t)
                elif kind is DefenderAction.SCAN:
                    total += immediate_utility(table, Role.DEFENDER, kind)
                    dev.busy_until = max(dev.busy_until, t + cfg.scan_busy)
                    scanned.append(d)
                elif kind is DefenderAction.BLOCK:
                    total += immediate_utility(table, Role.DEFENDER, kind)
                    self._block(d)
                elif kind is DefenderAction.UNBLOCK:
                    total += immediate_utility(table, Role.DEFENDER, kind)
                    self._unblock(d)
            if scanned:
                self._scan(scanned)
                info.scans = len(scanned)
        return total

    def _scan(self, devices: list[int]) -> None:
        known = self.ledger.known
        pending = []
        for d in devices:
            dev = self.devices[d]
            # a compromise through a defender-known exploit matches a signature
            slots = np.flatnonzero(dev.compromise[2:])
            if dev.compromised and any(int(s) in known for s in slots):
                dev.anomaly_score = 1.0
            else:
                pending.append(d)
        if pending and self.forest is not None:
            recent = {d: list(self.recent[d]) for d in pending}
            for d, (_, score) in det.scan(pending, recent, self.forest).items():
                self.devices[d].anomaly_score = score

    def _block(self, d: int) -> None:
        edges = {e for e in self.graph.edges if d in e}
        if not edges:
            log.warning("block: device %s has no edges", d)
            return
        self.blocked.setdefault(d, set()).update(edges)
        self.graph.edges -= edges
        self.graph.reconnect_attacker_owned()

    def _unblock(self, d: int) -> None:
        edges = self.blocked.pop(d, set())
        if not edges:
            log.warning("unblock: nothing stored for device %s", d)
        self.graph.edges |= edges

    def checkpoint(self) -> Checkpoint:
        chk = Checkpoint(
            t=self.t,
            devices=[d.copy() for d in self.devices],
            graph=self.graph.copy(),
            blocked={k: set(v) for k, v in self.blocked.items()},
        )
        self.checkpoints.append(chk)  # deque(maxlen=K) evicts the oldest
        return chk

    def restore(self) -> float:
        """Roll the organisation's devices back to the newest checkpoint; returns clawed value."""
        if not self.checkpoints:
            raise NoCheckpoint("restore requested with an empty checkpoint store")
        chk = self.checkpoints[-1]
        cfg, t = self.cfg, self.t
        owned = {d.id for d in self.devices if d.attacker_owned}
        clawed = 0.0
        lo, mode, hi = cfg.restore_busy
        for i, saved in enumerate(chk.devices):
            if i in owned:
                continue
            _, value = self.work.drop_for_reset(i, chk.t, t)
            clawed += value
            dev = saved.copy()
            dev.known_to_attacker = self.devices[i].known_to_attacker
            busy = math.ceil(self.rng_defend.triangular(lo, mode, hi)) if lo < hi else math.ceil(lo)
            dev.busy_until = t + busy
            self.devices[i] = dev
        keep = {e for e in self.graph.edges if e[0] in owned or e[1] in owned}
        self.graph.edges = set(chk.graph.edges) | keep
        for i in range(self.graph.n_nodes):
            if i not in owned:
                self.graph.online[i] = chk.graph.online[i]
        self.graph.reconnect_attacker_owned()
        self.blocked = {k: set(v) for k, v in chk.blocked.items()}
        return clawed

    # -- churn / traffic -------------------------------------------------------
    def _sync_churn(self, events) -> None:
        for ev in events:
            if ev.node is None:
                continue
            dev = self.devices[ev.node]
            if ev.kind == "add":
                dev.online = True
                if ev.attacker_owned:
                    self._make_owned(dev)
            elif ev.kind == "remove":
                dev.online = False
                self.work.drop_device(ev.node)

    def _emit_traffic(self, traffic: dict, delegated_out: np.ndarray) -> None:
        cfg, n = self.cfg, self.cfg.max_devices
        probe_noise = self.rng_traffic.poisson(cfg.benign_probe_rate, n)
        exploit_noise = self.rng_traffic.poisson(cfg.benign_exploit_rate, n)
        adversarial = self.rng_traffic.poisson(cfg.adversarial_rate, n)
        load = np.zeros(n)
        for w in self.work.running:
            load[w.host] += 1
        for d in self.devices:
            if not (d.online and not d.attacker_owned):
                continue
            i = d.id
            self.recent[i].append(det.TrafficSample(
                device=i,
                step=self.t,
                workload_traffic=load[i] + (adversarial[i] if d.compromised else 0.0),
                probe_traffic=probe_noise[i] + traffic["probe"][i],
                exploit_traffic=exploit_noise[i] + traffic["exploit"][i],
                fanout=delegated_out[i] + traffic["fanout"][i],
            ))

    # -- logging ---------------------------------------------------------------
    def _log(self, att: JointAction, dfn: JointAction, info: StepInfo, shaping: float, r_att: float, r_def: float):
        u = self.cfg.utilities
        common = {"step": info.t, "compromised": info.compromised_network,
                  "workloads_completed": info.workloads_completed}
        self.trajectory.append({
            **common, "role": "attacker", "action_type": AttackerAction(att.type).name.lower(),
            "devices": " ".join(map(str, att.devices)), "action_reward": info.attacker_action_reward,
            "state_reward": info.attacker_state_reward, "shaping": shaping, "work_value": 0.0,
            "clawback": 0.0, "total_reward": r_att + shaping,
        })
        self.trajectory.append({
            **common, "role": "defender", "action_type": DefenderAction(dfn.type).name.lower(),
            "devices": " ".join(map(str, dfn.devices)), "action_reward": info.defender_action_reward,
            "state_reward": -u.comp_scale * info.compromised_network, "shaping": 0.0,
            "work_value": u.work_scale * info.work_value, "clawback": u.work_scale * info.clawback,
            "total_reward": r_def,
        })

    def summary(self) -> dict:
        tot, steps = self.totals, max(self.t, 1)
        return {
            "attacker": tot["attacker"],
            "defender": tot["defender"],
            "scans_per_step": tot["scans"] / steps,
            "workloads_completed": tot["workloads"],
            "compromise_rate": tot["phi_sum"] / steps,
            "defense_cost": tot["defense_cost"],
        }


def defense_cost(a: JointAction, reward: float, table: UtilityTable) -> float:
    """Magnitude of the defender's action costs (clean rewards are not costs)."""
    if a.type == DefenderAction.CLEAN:
        return len(a.devices) * table.def_scale * -table.clean_clean if reward < 0 else 0.0
    return max(0.0, -reward)


def _num(v: int | None) -> float:
    return -1.0 if v is None else float(v)


def write_trajectory_csv(rows: list[dict], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=TRAJECTORY_HEADER)
        w.writeheader()
        for r in rows:
            w.writerow({k: (f"{v:.10g}" if isinstance(v, float) else v) for k, v in r.items()})


def telescoped_shaping(beta: float, gamma: float, phis: np.ndarray) -> float:
    """Closed form of the discounted shaping sum over potentials ``phi_0..phi_T``."""
    T = len(phis) - 1
    return beta * (gamma**T * phis[-1] - phis[0])


def discounted_shaping(beta: float, gamma: float, phis: np.ndarray) -> float:
    return float(sum(gamma**t * beta * (gamma * phis[t + 1] - phis[t]) for t in range(len(phis) - 1)))


def burn_in_samples(cfg: EnvConfig, seed: int, min_steps: int, min_samples: int) -> np.ndarray:
    """Traffic vectors from attack-free rollouts (no footholds, both players passing)."""
    quiet = dataclasses.replace(cfg, eta=0.0, zero_day=None)
    env = CyberEnv(quiet, detector_enabled=False)
    env.reset(seed=seed)
    samples = []
    steps = 0
    noop_d, noop_a = JointAction.noop(Role.DEFENDER), JointAction.noop(Role.ATTACKER)
    while steps < min_steps or len(samples) < min_samples:
        if env.t >= quiet.steps:
            env.reset(seed=seed + steps + 1)
        env.step(noop_d, noop_a)
        samples += [s[-1].vector() for i, s in env.recent.items() if s and s[-1].step == env.t - 1]
        steps += 1
    return np.stack(samples)


@functools.lru_cache(maxsize=32)
def burn_in_forest(cfg: EnvConfig) -> det.IsolationForest:
    """Fit the detector on an attack-free prefix of the scenario (memoised per config)."""
    samples = burn_in_samples(cfg, cfg.detector_seed, cfg.detector.burn_in,
                               max(cfg.detector.subsample, cfg.detector.burn_in_samples))
    return det.fit(samples, cfg.detector.n_trees, cfg.detector.subsample,
                   seed=cfg.detector_seed, threshold=cfg.detector.threshold)
