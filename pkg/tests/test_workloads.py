import itertools

import numpy as np
import pytest

from cyberposg.model import BitLayout, ConfigReq, DeviceState
from cyberposg.netgraph import NetworkGraph
from cyberposg.workloads import (
    NoCheckpoint,
    Workload,
    WorkloadConfig,
    WorkloadLedger,
    spawn,
    triangular_durations,
)

L = BitLayout()


def dev(i, os_code=0, online=True, busy_until=0, owned=False):
    return DeviceState(i, L.encode_config(os_code, 1), np.zeros(L.compromise_width, dtype=bool),
                       busy_until=busy_until, online=online, attacker_owned=owned)


def job(origin=0, os_code=0, duration=1.0, value=1.0):
    return Workload(ConfigReq(os_codes=frozenset({os_code})), duration, value, origin)


def graph(n, edges):
    g = NetworkGraph(n)
    g.online[:] = True
    g.edges = set(edges)
    return g


def test_triangular_mean():
    d = triangular_durations(WorkloadConfig(), np.random.default_rng(0), 100_000)
    assert abs(d.mean() - 7 / 3) < 0.02
    assert d.min() >= 1 and d.max() <= 4


def test_unit_jobs():
    ws = spawn(dev(0), WorkloadConfig(unit=True, spawn_rate=5), np.random.default_rng(0), L)
    assert ws and all(w.duration == 1 and w.value == 1 for w in ws)


def test_offline_and_owned_devices_spawn_nothing():
    rng = np.random.default_rng(0)
    assert spawn(dev(0, online=False), WorkloadConfig(spawn_rate=10), rng, L) == []
    assert spawn(dev(0, owned=True), WorkloadConfig(spawn_rate=10), rng, L) == []


def test_place_on_origin():
    led = WorkloadLedger(WorkloadConfig(), L)
    assert led.place(job(0), graph(2, [(0, 1)]), [dev(0), dev(1)]) == 0


def test_delegate_to_matching_neighbour():
    led = WorkloadLedger(WorkloadConfig(), L)
    devices = [dev(0, os_code=1), dev(1, os_code=1), dev(2, os_code=0)]
    assert led.place(job(0), graph(3, [(0, 1), (0, 2)]), devices) == 2
    assert led.delegated == 1


def _oracle(origin, devices, edges, loads, capacity):
    # first fit: origin, then out-neighbours by ascending id
    order = [origin] + sorted(j for (i, j) in edges if i == origin)
    for k in order:
        if devices[k] == 0 and loads[k] < capacity:
            return k
    return None


def test_placement_matches_brute_force_oracle():
    # every 4-node graph over a fixed origin, every OS assignment and load pattern, capacity 1
    rng = np.random.default_rng(0)
    pairs = [(0, j) for j in range(1, 4)] + [(1, 0), (2, 1)]
    checked = 0
    for mask in range(1 << len(pairs)):
        edges = [p for k, p in enumerate(pairs) if mask >> k & 1]
        for oses in itertools.product((0, 1), repeat=4):
            loads = rng.integers(0, 2, 4)
            led = WorkloadLedger(WorkloadConfig(capacity=1), L)
            devices = [dev(i, os_code=oses[i]) for i in range(4)]
            for i in range(4):
                if loads[i]:
                    w = job(i, os_code=oses[i])
                    w.host = i
                    led.running.append(w)
            got = led.place(job(0), graph(4, edges), devices)
            assert got == _oracle(0, oses, edges, loads, 1)
            checked += 1
    assert checked == 32 * 16


def test_all_full_fails():
    led = WorkloadLedger(WorkloadConfig(capacity=1), L)
    g = graph(2, [(0, 1)])
    devices = [dev(0), dev(1)]
    assert led.place(job(0), g, devices) == 0
    assert led.place(job(0), g, devices) == 1
    assert led.place(job(0), g, devices) is None
    assert led.failed == 1


def test_busy_host_makes_no_progress():
    led = WorkloadLedger(WorkloadConfig(), L)
    devices = [dev(0, busy_until=5)]
    led.place(job(0), graph(1, []), devices)
    done, value = led.tick(devices, t=2)
    assert done == [] and value == 0 and led.running[0].elapsed == 0


def test_unit_job_completes_in_one_tick():
    led = WorkloadLedger(WorkloadConfig(), L)
    devices = [dev(0)]
    led.place(job(0, value=1.5), graph(1, []), devices)
    done, value = led.tick(devices, t=0)
    assert len(done) == 1 and value == 1.5 and led.running == []


def test_three_concurrent_unit_jobs():
    led = WorkloadLedger(WorkloadConfig(capacity=3), L)
    devices = [dev(0)]
    for _ in range(3):
        assert led.place(job(0), graph(1, []), devices) == 0
    done, value = led.tick(devices, t=0)
    assert len(done) == 3 and value == 3.0


def test_clawback_examples():
    led = WorkloadLedger(WorkloadConfig(), L)
    devices = [dev(0)]
    g = graph(1, [])
    assert led.drop_for_reset(0, since=0, now=0) == (0, 0.0)
    for t in range(2):
        led.place(job(0), g, devices)
        led.tick(devices, t)
    long = job(0, duration=5.0)
    led.place(long, g, devices)
    for t in (2, 3, 4):
        led.tick(devices, t)
    assert long.elapsed == 3
    dropped, clawed = led.drop_for_reset(0, since=0, now=4)
    assert dropped == 1 and clawed == 2.0
    assert led.accrued() == 0.0


def test_reset_without_checkpoint():
    with pytest.raises(NoCheckpoint):
        WorkloadLedger(WorkloadConfig(), L).drop_for_reset(0, None, 3)


def test_random_run_capacity_and_conservation():
    rng = np.random.default_rng(1)
    cfg = WorkloadConfig(capacity=3, spawn_rate=2.0)
    g = graph(6, [(i, (i + 1) % 6) for i in range(6)] + [(i, (i + 2) % 6) for i in range(6)])
    devices = [dev(i, os_code=int(rng.integers(2))) for i in range(6)]
    led = WorkloadLedger(cfg, L)
    earned, clawed_total = 0.0, 0.0
    for t in range(10_000):
        for d in devices:
            d.busy_until = t + 1 if rng.random() < 0.1 else d.busy_until
        before = {id(w): w.elapsed for w in led.running}
        hosts = {id(w): w.host for w in led.running}
        _, v = led.tick(devices, t)
        earned += v
        for w in led.running:
            if id(w) in before and devices[hosts[id(w)]].busy(t):
                assert w.elapsed == before[id(w)]
        for d in devices:
            for w in spawn(d, cfg, rng, L, t):
                led.place(w, g, devices)
        for i in range(6):
            assert led.load(i) <= cfg.capacity
        if t % 500 == 499:
            clawed_total += led.drop_for_reset(int(rng.integers(6)), t - 50, t)[1]
    replay = sum(c.value for c in led.completions)
    assert earned == pytest.approx(replay)
    assert led.accrued() == pytest.approx(replay - clawed_total)
