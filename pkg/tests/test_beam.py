import itertools

import numpy as np
import pytest

from cyberposg.actions import JointAction
from cyberposg.beam import beam_search, exhaustive_best, merge, softmax_sample
from cyberposg.model import AttackerAction, Role

A = Role.ATTACKER
ROWS = np.array(list(itertools.product(range(3), (AttackerAction.ATTACK, AttackerAction.PROBE), range(2), range(2))))


def _separable(w):
    """Joint value = sum of per-device picks; noop is worth 0."""
    def joint_q(actions):
        return np.array([sum(w[d, a.type, e, p] for d, e, p in a.assignments()) for a in actions])
    return joint_q


def _brute_force_optimum(w):
    # independent oracle: every single-type assignment of devices to (exploit, app) or nothing
    best = 0.0
    for t in range(2):
        per_device = [max(0.0, w[d, t].max()) for d in range(3)]
        best = max(best, sum(per_device))
    return best


def test_beam_matches_exhaustive_on_separable_critics():
    rng = np.random.default_rng(0)
    hits = 0
    for _ in range(100):
        w = rng.normal(0, 1, (3, 2, 2, 2))
        jq = _separable(w)
        row_q = np.array([w[d, t, e, p] for d, t, e, p in ROWS])
        action, value = beam_search(A, ROWS, row_q, 0.0, jq, K=len(ROWS) + 1, tau=1e-6, rng=rng)
        _, ex = exhaustive_best(A, ROWS, jq)
        oracle = _brute_force_optimum(w)
        assert ex == pytest.approx(oracle, abs=1e-12)
        hits += abs(value - oracle) <= 1e-12 and abs(jq([action])[0] - oracle) <= 1e-12
    assert hits == 100


def test_noop_wins_when_everything_is_negative():
    w = -np.ones((3, 2, 2, 2))
    row_q = np.array([w[tuple(r)] for r in ROWS])
    action, value = beam_search(A, ROWS, row_q, 0.0, _separable(w), K=3, tau=1e-6, rng=np.random.default_rng(0))
    assert action.is_pass and value == 0.0


def test_empty_candidate_set_returns_noop():
    action, value = beam_search(A, np.zeros((0, 4)), np.zeros(0), 1.5, lambda acts: np.zeros(len(acts)))
    assert action == JointAction.noop(A) and value == 1.5


def test_merge_orders_devices():
    a = merge(A, AttackerAction.ATTACK, {2: (1, 0), 0: (0, 0)})
    assert a.devices == (0, 2) and a.exploits == (0, 1)


def test_softmax_sample_low_temperature_is_argmax():
    rng = np.random.default_rng(0)
    assert all(softmax_sample(np.array([0.1, 0.5, 0.2]), 1e-6, rng) == 1 for _ in range(20))
    with pytest.raises(ValueError):
        softmax_sample(np.array([1.0]), 0.0, rng)


def test_bad_beam_width_rejected():
    with pytest.raises(ValueError):
        beam_search(A, ROWS, np.zeros(len(ROWS)), 0.0, lambda acts: np.zeros(len(acts)), K=0)
