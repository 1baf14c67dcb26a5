"""Double oracle with learned better responses over simulation-estimated bimatrix games."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .env import CyberEnv, EnvConfig
from .learn import BestResponse, CriticPolicy, TrainConfig, train_best_response
from .model import Role
from .nash import NashResult, deviation_gap, solve_nash
from .policies import Policy, baseline
from .rollout import derive_seeds, play_episode
from .zeroday import ex_ante_utility

log = logging.getLogger(__name__)

ROLES = (Role.ATTACKER, Role.DEFENDER)
MATRIX_HEADER = ["attacker_id", "defender_id", "attacker_mean", "defender_mean", "std", "n"]
GAP_HEADER = ["round", "role", "incumbent_value", "candidate_value", "admitted"]


class DoarError(ValueError):
    pass


@dataclass
class PoolEntry:
    id: str
    policy: Policy
    provenance: str  # "baseline" or "learned round r"


class StrategyPool:
    """Per-role strategy lists that only grow."""

    def __init__(self):
        self.entries: dict[Role, list[PoolEntry]] = {r: [] for r in ROLES}

    @classmethod
    def baselines(cls, attacker=("pass", "random"), defender=("pass", "random")) -> StrategyPool:
        pool = cls()
        for role, kinds in ((Role.ATTACKER, attacker), (Role.DEFENDER, defender)):
            for kind in kinds:
                pool.add(role, kind, baseline(kind, role), "baseline")
        return pool

    def add(self, role: Role, id_: str, policy: Policy, provenance: str) -> int:
        role = Role(role)
        if Role(policy.role) is not role:
            raise DoarError(f"{id_} plays the {Role(policy.role).value}, not the {role.value}")
        if id_ in self.ids(role) or any(e.policy is policy for e in self.entries[role]):
            raise DoarError(f"duplicate {role.value} strategy {id_}")
        self.entries[role].append(PoolEntry(id_, policy, provenance))
        return len(self.entries[role]) - 1

    def ids(self, role: Role) -> list[str]:
        return [e.id for e in self.entries[Role(role)]]

    def policy(self, role: Role, i: int) -> Policy:
        return self.entries[Role(role)][i].policy

    def size(self, role: Role) -> int:
        return len(self.entries[Role(role)])


@dataclass
class Cell:
    attacker: float
    defender: float
    std: float  # std of the per-rollout attacker and defender payoffs, pooled
    n: int
    attacker_runs: np.ndarray = field(repr=False, default_factory=lambda: np.zeros(0))
    defender_runs: np.ndarray = field(repr=False, default_factory=lambda: np.zeros(0))


class PayoffMatrix:
    """Cells keyed by (attacker index, defender index); rows are attacker strategies."""

    def __init__(self, min_rollouts: int = 1):
        self.cells: dict[tuple[int, int], Cell] = {}
        self.min_rollouts = min_rollouts

    def complete(self, shape: tuple[int, int]) -> bool:
        return all((i, j) in self.cells for i in range(shape[0]) for j in range(shape[1]))

    def arrays(self, shape: tuple[int, int]) -> tuple[np.ndarray, np.ndarray]:
        if not self.complete(shape):
            raise DoarError("payoff matrix has missing cells")
        A = np.array([[self.cells[i, j].attacker for j in range(shape[1])] for i in range(shape[0])])
        B = np.array([[self.cells[i, j].defender for j in range(shape[1])] for i in range(shape[0])])
        return A, B

    def write_csv(self, path, pool: StrategyPool) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(MATRIX_HEADER)
            for (i, j), c in sorted(self.cells.items()):
                w.writerow([pool.ids(Role.ATTACKER)[i], pool.ids(Role.DEFENDER)[j],
                            repr(c.attacker), repr(c.defender), repr(c.std), c.n])


@dataclass
class MixedProfile:
    attacker: np.ndarray
    defender: np.ndarray

    def __post_init__(self):
        for p in (self.attacker, self.defender):
            if np.any(p < 0) or abs(p.sum() - 1.0) > 1e-12:
                raise DoarError("mixture must be non-negative and sum to 1")

    def of(self, role: Role) -> np.ndarray:
        return self.attacker if Role(role) is Role.ATTACKER else self.defender


def _normalise(p: np.ndarray) -> np.ndarray:
    p = np.clip(np.asarray(p, dtype=float), 0.0, None)
    p[p < 1e-15] = 0.0
    p = p / p.sum()
    # push the rounding residue onto the largest weight so the sum is exact to 1e-12
    p[np.argmax(p)] += 1.0 - p.sum()
    return p


def profile_from(result: NashResult) -> MixedProfile:
    return MixedProfile(_normalise(result.row), _normalise(result.col))


# ---------------------------------------------------------------------------
# Payoff estimation
# ---------------------------------------------------------------------------


def cell_seeds(seed: int, rollouts: int) -> list[int]:
    """Common random numbers: every cell replays the same rollout seeds."""
    return derive_seeds(seed, rollouts, salt=23)


def estimate_cell(
    cfg: EnvConfig,
    attacker: Policy,
    defender: Policy,
    rollouts: int,
    seed: int,
    env: CyberEnv | None = None,
) -> Cell:
    """Mean payoffs (shaping excluded) over seeded rollouts.

    With a zero-day prior each rollout draws ``z`` from the prior (ex-ante
    utility); the draws depend only on ``seed``, so cells share them.
    """
    if rollouts < 1:
        raise DoarError("zero rollouts")
    env = env or CyberEnv(cfg)
    if env.prior is None:
        runs = [play_episode(env, attacker, defender, s) for s in cell_seeds(seed, rollouts)]
        att = np.array([r.attacker for r in runs])
        dfn = np.array([r.defender for r in runs])
        return Cell(float(att.mean()), float(dfn.mean()), _pooled_std(att, dfn), rollouts, att, dfn)
    per_z: list[tuple[float, float]] = []

    def run(z: int, s: int) -> tuple[float, float]:
        r = play_episode(env, attacker, defender, s, zero_day_index=z)
        per_z.append((r.attacker, r.defender))
        return r.attacker, r.defender

    a, d, _ = ex_ante_utility(run, env.prior, rollouts, seed=seed)
    arr = np.array(per_z)
    return Cell(a, d, _pooled_std(arr[:, 0], arr[:, 1]), rollouts, arr[:, 0], arr[:, 1])


def _pooled_std(att: np.ndarray, dfn: np.ndarray) -> float:
    if att.size < 2:
        return 0.0
    return float(math.sqrt((att.var(ddof=1) + dfn.var(ddof=1)) / 2))


def estimate_payoffs(
    pool: StrategyPool,
    cfg: EnvConfig,
    rollouts: int,
    seed: int,
    matrix: PayoffMatrix | None = None,
) -> PayoffMatrix:
    """Fill every missing cell of the pool's matrix."""
    if pool.size(Role.ATTACKER) == 0 or pool.size(Role.DEFENDER) == 0:
        raise DoarError("both pools must be non-empty")
    if rollouts < 1:
        raise DoarError("zero rollouts")
    matrix = matrix or PayoffMatrix(rollouts)
    env = CyberEnv(cfg)
    for i in range(pool.size(Role.ATTACKER)):
        for j in range(pool.size(Role.DEFENDER)):
            if (i, j) not in matrix.cells:
                matrix.cells[i, j] = estimate_cell(
                    cfg, pool.policy(Role.ATTACKER, i), pool.policy(Role.DEFENDER, j), rollouts, seed, env)
    return matrix


def solve_matrix(matrix: PayoffMatrix, pool: StrategyPool) -> tuple[MixedProfile, NashResult]:
    shape = (pool.size(Role.ATTACKER), pool.size(Role.DEFENDER))
    res = solve_nash(*matrix.arrays(shape))
    return profile_from(res), res


def value_against(
    role: Role,
    policy: Policy,
    pool: StrategyPool,
    mixture: np.ndarray,
    cfg: EnvConfig,
    rollouts: int,
    seed: int,
) -> tuple[float, dict[int, Cell]]:
    """Payoff of ``policy`` against the opponent mixture, one cell per supported opponent."""
    role = Role(role)
    opp = Role.DEFENDER if role is Role.ATTACKER else Role.ATTACKER
    env = CyberEnv(cfg)
    cells, total = {}, 0.0
    for j, w in enumerate(mixture):
        if w <= 0:
            continue
        o = pool.policy(opp, j)
        c = estimate_cell(cfg, policy, o, rollouts, seed, env) if role is Role.ATTACKER \
            else estimate_cell(cfg, o, policy, rollouts, seed, env)
        cells[j] = c
        total += w * (c.attacker if role is Role.ATTACKER else c.defender)
    return total, cells


# ---------------------------------------------------------------------------
# The outer loop
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DoarConfig:
    max_rounds: int = 15
    epsilon: float | None = None  # None: 2% of the payoff std across the matrix
    epsilon_frac: float = 0.02
    rollouts: int = 30
    episodes: int = 60  # best-response training episodes per round
    stall_rounds: int = 2
    beam_k: int = 5
    beam_tau: float = 0.05
    attacker_baselines: tuple[str, ...] = ("pass", "random")
    defender_baselines: tuple[str, ...] = ("pass", "random")
    train: TrainConfig = TrainConfig()


@dataclass
class GapRecord:
    round: int
    role: str
    incumbent: float
    candidate: float
    admitted: bool

    @property
    def gap(self) -> float:
        return max(0.0, self.candidate - self.incumbent)


@dataclass
class DoarResult:
    pool: StrategyPool
    profile: MixedProfile
    matrix: PayoffMatrix
    trace: list[GapRecord]
    nash: NashResult
    learners: dict[Role, BestResponse]
    rounds: int

    def values(self) -> dict[Role, float]:
        return {Role.ATTACKER: self.nash.row_value, Role.DEFENDER: self.nash.col_value}

    def write(self, out_dir) -> None:
        from .learn import save_weights

        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        self.matrix.write_csv(out / "matrix.csv", self.pool)
        write_gap_trace(self.trace, out / "gap_trace.csv")
        with open(out / "profile.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["role", "strategy_id", "provenance", "probability"])
            for role in ROLES:
                for e, p in zip(self.pool.entries[role], self.profile.of(role)):
                    w.writerow([role.value, e.id, e.provenance, repr(float(p))])
        for role in ROLES:
            for e in self.pool.entries[role]:
                if isinstance(e.policy, CriticPolicy):
                    save_weights(e.policy.critic, out / f"{e.id}.weights")


def write_gap_trace(trace: list[GapRecord], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(GAP_HEADER)
        for g in trace:
            w.writerow([g.round, g.role, repr(g.incumbent), repr(g.candidate), int(g.admitted)])


def matrix_epsilon(matrix: PayoffMatrix, shape: tuple[int, int], frac: float) -> dict[Role, float]:
    A, B = matrix.arrays(shape)
    return {Role.ATTACKER: frac * float(A.std()), Role.DEFENDER: frac * float(B.std())}


def doar_loop(cfg: EnvConfig, dcfg: DoarConfig = DoarConfig(), seed: int = 0) -> DoarResult:
    """Alternate restricted-game solves with learned better responses.

    Each round both roles train against the opponent's current mixture
    (warm-started from their previous learner), the critic is wrapped as a
    beam-search policy and evaluated against that mixture with common random
    numbers, and the candidate joins the pool when it beats the incumbent
    equilibrium value by more than epsilon. The loop stops once neither role
    improves or the round budget runs out.
    """
    if dcfg.epsilon is not None and not dcfg.epsilon > 0:
        raise DoarError("epsilon must be positive")
    pool = StrategyPool.baselines(dcfg.attacker_baselines, dcfg.defender_baselines)
    eval_seed, train_seed = derive_seeds(seed, 2, salt=31)
    matrix = estimate_payoffs(pool, cfg, dcfg.rollouts, eval_seed)
    profile, nash = solve_matrix(matrix, pool)
    trace: list[GapRecord] = []
    learners: dict[Role, BestResponse] = {}
    stalls = {r: 0 for r in ROLES}
    train_seeds = iter(derive_seeds(train_seed, 4 * dcfg.max_rounds + 4, salt=37))
    rounds = 0
    for rnd in range(1, dcfg.max_rounds + 1):
        rounds = rnd
        shape = (pool.size(Role.ATTACKER), pool.size(Role.DEFENDER))
        eps = ({r: dcfg.epsilon for r in ROLES} if dcfg.epsilon is not None
               else matrix_epsilon(matrix, shape, dcfg.epsilon_frac))
        incumbent = {Role.ATTACKER: nash.row_value, Role.DEFENDER: nash.col_value}
        admitted: dict[Role, tuple[Policy, dict[int, Cell]]] = {}
        if all(math.isinf(e) for e in eps.values()):
            for role in ROLES:
                trace.append(GapRecord(rnd, role.value, incumbent[role], incumbent[role], False))
            break
        for role in ROLES:
            opp = Role.DEFENDER if role is Role.ATTACKER else Role.ATTACKER
            mix = profile.of(opp)
            support = [j for j in range(pool.size(opp)) if mix[j] > 0]
            if stalls[role] >= dcfg.stall_rounds:
                log.info("%s stalled for %d rounds; reinitialising its learner", role.value, stalls[role])
                learners.pop(role, None)
                stalls[role] = 0
            br = train_best_response(
                role, [pool.policy(opp, j) for j in support], mix[support], cfg,
                episodes=dcfg.episodes, seed=next(train_seeds), train=dcfg.train, init=learners.get(role))
            learners[role] = br
            cand = br.policy(dcfg.beam_k, dcfg.beam_tau, name=f"{role.value[0].upper()}{rnd}")
            value, cells = value_against(role, cand, pool, mix, cfg, dcfg.rollouts, eval_seed)
            ok = value > incumbent[role] + eps[role]
            trace.append(GapRecord(rnd, role.value, float(incumbent[role]), float(value), bool(ok)))
            log.info("round %d %s: incumbent %.3f candidate %.3f %s", rnd, role.value,
                     incumbent[role], value, "admitted" if ok else "rejected")
            if ok:
                admitted[role] = (cand, cells)
                stalls[role] = 0
            else:
                stalls[role] += 1
        if not admitted:
            break
        for role, (cand, cells) in admitted.items():
            idx = pool.add(role, cand.name, cand, f"learned round {rnd}")
            for j, c in cells.items():
                matrix.cells[(idx, j) if role is Role.ATTACKER else (j, idx)] = c
        matrix = estimate_payoffs(pool, cfg, dcfg.rollouts, eval_seed, matrix)
        profile, nash = solve_matrix(matrix, pool)
    return DoarResult(pool, profile, matrix, trace, nash, learners, rounds)


# ---------------------------------------------------------------------------
# Equilibrium gap
# ---------------------------------------------------------------------------


def equilibrium_gap(
    profile: MixedProfile,
    A: np.ndarray,
    B: np.ndarray,
    extra: dict[Role, list[float]] | None = None,
) -> dict[Role, float]:
    """Lower bound on each role's unilateral deviation gain.

    Deviations are the pool's pure strategies (rows of ``A`` / columns of
    ``B``) plus any extra candidate values already evaluated against the
    opponent's mixture. The true best response is not computable, so this
    only bounds the gap from below.
    """
    x, y = profile.attacker, profile.defender
    A, B = np.asarray(A, float), np.asarray(B, float)
    va, vd = float(x @ A @ y), float(x @ B @ y)
    dev_a = list(A @ y) + list((extra or {}).get(Role.ATTACKER, []))
    dev_d = list(x @ B) + list((extra or {}).get(Role.DEFENDER, []))
    return {Role.ATTACKER: float(max(0.0, max(dev_a) - va)), Role.DEFENDER: float(max(0.0, max(dev_d) - vd))}


def measured_gap(
    result: DoarResult,
    cfg: EnvConfig,
    rollouts: int = 30,
    seed: int = 1,
    dcfg: DoarConfig = DoarConfig(),
) -> dict[str, dict[Role, float]]:
    """Re-evaluate the final profile on fresh seeds and probe it with fresh better responses.

    Returns the equilibrium values, the lower-bound gaps and the gaps as a
    fraction of the absolute equilibrium payoff.
    """
    pool, prof = result.pool, result.profile
    ev_seed, tr_seed = derive_seeds(seed, 2, salt=41)
    matrix = PayoffMatrix(rollouts)
    env = CyberEnv(cfg)
    for i in range(pool.size(Role.ATTACKER)):
        for j in range(pool.size(Role.DEFENDER)):
            if prof.attacker[i] > 0 or prof.defender[j] > 0:
                matrix.cells[i, j] = estimate_cell(
                    cfg, pool.policy(Role.ATTACKER, i), pool.policy(Role.DEFENDER, j), rollouts, ev_seed, env)
    # cells where neither strategy is played never enter a deviation value
    shape = (pool.size(Role.ATTACKER), pool.size(Role.DEFENDER))
    for i in range(shape[0]):
        for j in range(shape[1]):
            matrix.cells.setdefault((i, j), Cell(0.0, 0.0, 0.0, 0))
    A, B = matrix.arrays(shape)
    extra: dict[Role, list[float]] = {}
    for k, role in enumerate(ROLES):
        opp = Role.DEFENDER if role is Role.ATTACKER else Role.ATTACKER
        mix = prof.of(opp)
        support = [j for j in range(pool.size(opp)) if mix[j] > 0]
        init = result.learners.get(role)
        br = train_best_response(role, [pool.policy(opp, j) for j in support], mix[support], cfg,
                                 episodes=dcfg.episodes, seed=tr_seed + k, train=dcfg.train, init=init)
        v, _ = value_against(role, br.policy(dcfg.beam_k, dcfg.beam_tau, "probe"), pool, mix, cfg,
                             rollouts, ev_seed)
        extra[role] = [float(v)]
    gaps = equilibrium_gap(prof, A, B, extra)
    values = {Role.ATTACKER: float(prof.attacker @ A @ prof.defender),
              Role.DEFENDER: float(prof.attacker @ B @ prof.defender)}
    rel = {r: gaps[r] / max(abs(values[r]), 1e-12) for r in ROLES}
    return {"value": values, "gap_lower_bound": gaps, "relative": rel}


def pure_gap(A, B, i: int, j: int) -> float:
    """Deviation gain at the pure profile (i, j) of a bimatrix game."""
    A, B = np.asarray(A, float), np.asarray(B, float)
    x, y = np.eye(A.shape[0])[i], np.eye(A.shape[1])[j]
    return deviation_gap(A, B, x, y)
