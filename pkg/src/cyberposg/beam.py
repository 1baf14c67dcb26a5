"""Critic-guided coordinate-ascent beam search over combinatorial joint actions."""

from __future__ import annotations

import itertools
from collections.abc import Callable

import numpy as np

from .actions import JointAction
from .model import Role


def softmax_sample(values: np.ndarray, tau: float, rng: np.random.Generator) -> int:
    if tau <= 0:
        raise ValueError("temperature must be positive")
    z = (values - values.max()) / tau
    p = np.exp(z)
    p /= p.sum()
    return int(rng.choice(values.size, p=p))


def merge(role: Role, type_: int, picks: dict[int, tuple[int, int]]) -> JointAction:
    """Joint action of one type over the picked devices ``{device: (exploit, app)}``."""
    devs = sorted(picks)
    return JointAction(Role(role), int(type_), tuple(devs),
                       tuple(picks[d][0] for d in devs), tuple(picks[d][1] for d in devs))


def beam_search(
    role: Role,
    rows: np.ndarray,
    row_q: np.ndarray,
    base_q: float,
    joint_q: Callable[[list[JointAction]], np.ndarray],
    K: int = 5,
    tau: float = 0.5,
    rng: np.random.Generator | None = None,
) -> tuple[JointAction, float]:
    """One coordinate-ascent pass over per-device candidates.

    ``rows`` holds the valid single-device candidates ``(device, type,
    exploit, app)`` and ``row_q`` their critic values; the per-device noop
    scores ``base_q``. Each device keeps its top-``K`` candidates (noop
    included) and samples one by ``softmax(Q/tau)``. Merged joint actions
    are then formed: the sampled picks restricted to one sampled type, and,
    for every type present in any beam, each device's best beam entry of
    that type whenever it beats noop. The returned action is drawn by
    ``softmax(Q/tau)`` over these merges and the noop joint action.
    """
    if K < 1:
        raise ValueError("beam width must be >= 1")
    rng = rng or np.random.default_rng()
    role = Role(role)
    noop = JointAction.noop(role)
    rows = np.asarray(rows, dtype=np.int64).reshape(-1, 4)
    row_q = np.asarray(row_q, dtype=float)
    if rows.shape[0] != row_q.shape[0]:
        raise ValueError("one critic value per candidate row is required")
    if rows.shape[0] == 0:
        return noop, float(base_q)

    picks: dict[int, int] = {}  # device -> sampled row (-1 is noop)
    best_by_type: dict[int, dict[int, tuple[float, int]]] = {}
    for d in np.unique(rows[:, 0]):
        idx = np.flatnonzero(rows[:, 0] == d)
        cand = np.concatenate(([-1], idx))
        vals = np.concatenate(([base_q], row_q[idx]))
        order = np.argsort(-vals, kind="stable")[:K]
        beam, beam_vals = cand[order], vals[order]
        picks[int(d)] = int(beam[softmax_sample(beam_vals, tau, rng)])
        for r, v in zip(beam, beam_vals):
            if r < 0 or v <= base_q:
                continue
            t = int(rows[r, 1])
            cur = best_by_type.setdefault(t, {}).get(int(d))
            if cur is None or v > cur[0]:
                best_by_type[t][int(d)] = (float(v), int(r))

    chosen = {d: r for d, r in picks.items() if r >= 0}
    candidates = [noop]
    if chosen:
        types = sorted({int(rows[r, 1]) for r in chosen.values()})
        t_star = types[int(rng.integers(len(types)))]
        candidates.append(merge(role, t_star, {
            d: (int(rows[r, 2]), int(rows[r, 3])) for d, r in chosen.items() if rows[r, 1] == t_star
        }))
    for t, entries in sorted(best_by_type.items()):
        candidates.append(merge(role, t, {d: (int(rows[r, 2]), int(rows[r, 3])) for d, (_, r) in entries.items()}))
    unique = list(dict.fromkeys(candidates))
    values = np.asarray(joint_q(unique), dtype=float)
    k = softmax_sample(values, tau, rng)
    return unique[k], float(values[k])


def exhaustive_best(
    role: Role,
    rows: np.ndarray,
    joint_q: Callable[[list[JointAction]], np.ndarray],
) -> tuple[JointAction, float]:
    """Brute force over every single-type joint action (small spaces only)."""
    role = Role(role)
    rows = np.asarray(rows, dtype=np.int64).reshape(-1, 4)
    actions = [JointAction.noop(role)]
    for t in np.unique(rows[:, 1]):
        sub = rows[rows[:, 1] == t]
        devices = np.unique(sub[:, 0])
        options = [[None] + [tuple(r[2:]) for r in sub if r[0] == d] for d in devices]
        for combo in itertools.product(*options):
            picks = {int(d): c for d, c in zip(devices, combo) if c is not None}
            if picks:
                actions.append(merge(role, int(t), {d: (int(c[0]), int(c[1])) for d, c in picks.items()}))
    values = np.asarray(joint_q(actions), dtype=float)
    k = int(np.argmax(values))
    return actions[k], float(values[k])
