"""Workload spawning, delegation, capacity-limited execution and reset clawback."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .model import BitLayout, ConfigReq, DeviceState, config_matches
from .netgraph import NetworkGraph


class NoCheckpoint(RuntimeError):
    pass


@dataclass(frozen=True)
class WorkloadConfig:
    spawn_rate: float = 1.0  # mean workloads per online device per step (Poisson)
    capacity: int = 3
    tri_min: float = 1.0
    tri_mode: float = 2.0
    tri_max: float = 4.0
    value: float = 1.0
    own_os_prob: float = 0.7  # chance the requirement names the origin's OS
    unit: bool = False  # unit special case: duration 1, value 1


@dataclass
class Workload:
    req: ConfigReq
    duration: float
    value: float
    origin: int
    spawned_at: int = 0
    host: int | None = None
    elapsed: float = 0.0

    @property
    def done(self) -> bool:
        return self.elapsed >= self.duration


def triangular_durations(cfg: WorkloadConfig, rng: np.random.Generator, size: int) -> np.ndarray:
    if cfg.tri_min == cfg.tri_max:
        return np.full(size, float(cfg.tri_min))
    return rng.triangular(cfg.tri_min, cfg.tri_mode, cfg.tri_max, size=size)


def spawn(
    device: DeviceState, cfg: WorkloadConfig, rng: np.random.Generator, layout: BitLayout, t: int = 0
) -> list[Workload]:
    """Draw this step's workloads for ``device`` (none for offline or attacker-owned)."""
    if not device.online or device.attacker_owned:
        return []
    count = int(rng.poisson(cfg.spawn_rate))
    if count == 0:
        return []
    if cfg.unit:
        durations = np.ones(count)
    else:
        durations = triangular_durations(cfg, rng, count)
    own_os = layout.os_code(device.config)
    out = []
    for k in range(count):
        os_code = own_os if rng.random() < cfg.own_os_prob else int(rng.integers(4))
        value = 1.0 if cfg.unit else cfg.value
        out.append(
            Workload(
                req=ConfigReq(os_codes=frozenset({os_code})),
                duration=float(durations[k]),
                value=value,
                origin=device.id,
                spawned_at=t,
            )
        )
    return out


@dataclass
class Completion:
    step: int
    origin: int
    host: int
    value: float
    clawed: bool = False


@dataclass
class WorkloadLedger:
    """Running workloads plus a completion log for clawback on reset."""

    cfg: WorkloadConfig
    layout: BitLayout
    running: list[Workload] = field(default_factory=list)
    completions: list[Completion] = field(default_factory=list)
    failed: int = 0
    delegated: int = 0

    def load(self, host: int) -> int:
        return sum(1 for w in self.running if w.host == host)

    def _can_run(self, w: Workload, dev: DeviceState) -> bool:
        # a full device behaves exactly like a configuration mismatch
        return (
            dev.online
            and not dev.attacker_owned
            and self.load(dev.id) < self.cfg.capacity
            and config_matches(dev, w.req, self.layout)
        )

    def place(self, w: Workload, graph: NetworkGraph, devices: list[DeviceState]) -> int | None:
        """Host ``w`` on its origin or the lowest-id matching out-neighbour."""
        origin = devices[w.origin]
        if self._can_run(w, origin):
            w.host = origin.id
        else:
            for j in graph.out_neighbors(origin.id):
                if self._can_run(w, devices[j]):
                    w.host = j
                    self.delegated += 1
                    break
        if w.host is None:
            self.failed += 1
            return None
        self.running.append(w)
        return w.host

    def tick(self, devices: list[DeviceState], t: int) -> tuple[list[Workload], float]:
        """Advance every workload whose host is online and idle; harvest completions."""
        finished: list[Workload] = []
        keep: list[Workload] = []
        for w in self.running:
            host = devices[w.host]
            if host.online and not host.busy(t):
                w.elapsed = min(w.elapsed + 1.0, w.duration)
            if w.done:
                finished.append(w)
                self.completions.append(Completion(t, w.origin, w.host, w.value))
            else:
                keep.append(w)
        self.running = keep
        return finished, float(sum(w.value for w in finished))

    def drop_device(self, device: int) -> int:
        """Drop in-flight workloads hosted on ``device``; partial work earns nothing."""
        before = len(self.running)
        self.running = [w for w in self.running if w.host != device]
        return before - len(self.running)

    def drop_for_reset(self, device: int, since: int | None, now: int) -> tuple[int, float]:
        """Drop in-flight work on ``device`` and claw back its completions since ``since``.

        Returns ``(dropped, clawed_value)``; the caller subtracts the value.
        """
        if since is None:
            raise NoCheckpoint("reset requires a checkpoint")
        dropped = self.drop_device(device)
        clawed = 0.0
        for c in self.completions:
            if c.origin == device and not c.clawed and since <= c.step <= now:
                c.clawed = True
                clawed += c.value
        return dropped, clawed

    def accrued(self) -> float:
        return float(sum(c.value for c in self.completions if not c.clawed))
