"""Zero-day asymmetry: the common-knowledge prior, the private draw, and reveal-on-use."""

from __future__ import annotations

import math
from collections.abc import Callable
from dataclasses import dataclass, field

import numpy as np

from .model import Exploit

INFEASIBLE = math.inf  # cost of an exploit the attacker does not possess


class ZeroDayError(ValueError):
    pass


@dataclass(frozen=True)
class ZeroDayPrior:
    templates: list[Exploit]
    weights: tuple[float, ...] | None = None
    n_draws: int = 1

    def __post_init__(self):
        if not self.templates:
            raise ZeroDayError("zero-day prior needs at least one candidate")
        if self.n_draws != 1:
            raise ZeroDayError("only a single private draw is modelled")
        w = self.probs
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-12:
            raise ZeroDayError("prior weights must be a distribution")

    @property
    def probs(self) -> np.ndarray:
        if self.weights is None:
            return np.full(len(self.templates), 1.0 / len(self.templates))
        return np.asarray(self.weights, dtype=float)

    def __len__(self) -> int:
        return len(self.templates)


def sample_index(prior: ZeroDayPrior, seed: int | np.random.Generator | None = None) -> int:
    rng = np.random.default_rng(seed)
    return int(rng.choice(len(prior), p=prior.probs))


def sample_zero_day(prior: ZeroDayPrior, seed: int | np.random.Generator | None = None) -> Exploit:
    return prior.templates[sample_index(prior, seed)]


@dataclass
class KnowledgeLedger:
    """The full attack set A and the defender-known subset A^d (exploit ids)."""

    all_ids: frozenset[int]
    known: set[int] = field(default_factory=set)
    revealed: set[int] = field(default_factory=set)

    @classmethod
    def create(cls, all_ids, known) -> KnowledgeLedger:
        return cls(frozenset(all_ids), set(known))

    @property
    def zero_days(self) -> frozenset[int]:
        return self.all_ids - self.known

    def reveal(self, exploit_id: int) -> KnowledgeLedger:
        """Move ``exploit_id`` into A^d; idempotent and never undone."""
        if exploit_id not in self.known:
            self.known.add(exploit_id)
            self.revealed.add(exploit_id)
        return self

    def is_known(self, exploit_id: int) -> bool:
        return exploit_id in self.known


def reveal_on_use(ledger: KnowledgeLedger, z: Exploit) -> KnowledgeLedger:
    return ledger.reveal(z.id)


def exploit_cost(arsenal: list[Exploit], e: Exploit, z: Exploit | None = None) -> float:
    """Finite cost for possessed exploits, ``INFEASIBLE`` for unpossessed zero-days."""
    if e.zero_day:
        return 0.0 if z is not None and e.id == z.id else INFEASIBLE
    return 0.0 if any(a.id == e.id for a in arsenal) else INFEASIBLE


def ex_ante_utility(
    evaluate: Callable[[int, int], tuple[float, float]],
    prior: ZeroDayPrior,
    rollouts: int,
    seed: int = 0,
    stratified: bool = False,
) -> tuple[float, float, np.ndarray]:
    """Monte Carlo ex-ante utilities over ``z ~ prior``.

    ``evaluate(z_index, rollout_seed)`` plays one rollout with the attacker's
    policy for that ``z`` and returns ``(attacker, defender)``. With
    ``stratified`` every ``z`` gets ``rollouts`` runs and the per-``z`` means
    are weighted by the prior; otherwise ``z`` is drawn per rollout.
    Returns ``(attacker EU, defender EU, per-z attacker means)``.
    """
    if rollouts < 1:
        raise ZeroDayError("need at least one rollout")
    rng = np.random.default_rng(seed)
    probs = prior.probs
    per_z: dict[int, list[tuple[float, float]]] = {k: [] for k in range(len(prior))}
    if stratified:
        for k in range(len(prior)):
            for _ in range(rollouts):
                per_z[k].append(evaluate(k, int(rng.integers(2**31))))
        means = np.array([np.mean(per_z[k], axis=0) for k in range(len(prior))])
        att, dfn = probs @ means[:, 0], probs @ means[:, 1]
    else:
        draws = []
        for _ in range(rollouts):
            k = int(rng.choice(len(prior), p=probs))
            draws.append(evaluate(k, int(rng.integers(2**31))))
            per_z[k].append(draws[-1])
        att, dfn = np.mean(draws, axis=0)
    att_by_z = np.array([np.mean([r[0] for r in per_z[k]]) if per_z[k] else np.nan for k in range(len(prior))])
    return float(att), float(dfn), att_by_z
