"""Scenario assembly, payoff cross-tables, parameter sweeps and report emission."""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import stats

from .doar import ROLES, DoarConfig, DoarResult, doar_loop
from .env import ConfigError, CyberEnv, EnvConfig, zero_day_scenario
from .learn import CriticPolicy, TrainConfig, load_weights
from .model import Role
from .policies import Policy, baseline
from .rollout import derive_seeds, play_episode
from .zeroday import sample_index

log = logging.getLogger(__name__)

METRICS = ("attacker", "defender", "scans_per_step", "workloads_completed", "compromise_rate", "defense_cost")
SWEEP_HEADER = ["parameter", "value", "regime", "known", "seed", *METRICS]
SWEEP_PARAMETERS = ("work_scale", "defense_cost", "network_size", "zero_day_candidates")
CROSS_ATTACKER = ("doar", "random", "pass")
CROSS_DEFENDER = ("doar", "random", "preset", "pass")


class ExperimentError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# Scenario files
# ---------------------------------------------------------------------------


@dataclass
class Scenario:
    env: EnvConfig = field(default_factory=EnvConfig)
    doar: DoarConfig = field(default_factory=DoarConfig)
    nvd: dict | None = None  # {"feed": path, "sample": n, "seed": s}
    cross_runs: int = 10

    @classmethod
    def from_dict(cls, d: dict, base_dir: Path | None = None) -> Scenario:
        unknown = set(d) - {"env", "doar", "nvd", "cross_runs"}
        if unknown:
            raise ConfigError(f"unknown scenario keys {sorted(unknown)}")
        env = EnvConfig.from_dict(d.get("env", {}))
        doar = doar_config_from_dict(d.get("doar", {}))
        nvd = d.get("nvd")
        if nvd is not None:
            if "feed" not in nvd:
                raise ConfigError("nvd section needs a feed path")
            from .nvd import NvdError, ingest_nvd

            feed = Path(nvd["feed"])
            if base_dir is not None and not feed.is_absolute():
                feed = base_dir / feed
            try:
                rep = ingest_nvd(feed, int(nvd.get("sample", 2)), int(nvd.get("seed", 0)))
            except (OSError, NvdError) as exc:
                raise ConfigError(str(exc)) from exc
            env = dataclasses.replace(env, exploits=tuple(rep.exploits))
            env.validate()
        return cls(env, doar, nvd, int(d.get("cross_runs", 10)))

    @classmethod
    def load(cls, path) -> Scenario:
        path = Path(path)
        try:
            data = json.loads(path.read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read scenario {path}: {exc}") from exc
        return cls.from_dict(data, path.parent)

    def to_dict(self) -> dict:
        out = {"env": self.env.to_dict(), "doar": doar_config_to_dict(self.doar), "cross_runs": self.cross_runs}
        if self.nvd is not None:
            out["nvd"] = self.nvd
        return out


def doar_config_from_dict(d: dict) -> DoarConfig:
    names = {f.name for f in dataclasses.fields(DoarConfig)}
    unknown = set(d) - names
    if unknown:
        raise ConfigError(f"unknown doar keys {sorted(unknown)}")
    kw = dict(d)
    if "train" in kw:
        tnames = {f.name for f in dataclasses.fields(TrainConfig)}
        if set(kw["train"]) - tnames:
            raise ConfigError(f"unknown train keys {sorted(set(kw['train']) - tnames)}")
        t = dict(kw["train"])
        if "hidden" in t:
            t["hidden"] = tuple(t["hidden"])
        kw["train"] = TrainConfig(**t)
    for key in ("attacker_baselines", "defender_baselines"):
        if key in kw:
            kw[key] = tuple(kw[key])
    return DoarConfig(**kw)


def doar_config_to_dict(c: DoarConfig) -> dict:
    d = dataclasses.asdict(c)
    d["attacker_baselines"] = list(c.attacker_baselines)
    d["defender_baselines"] = list(c.defender_baselines)
    d["train"]["hidden"] = list(c.train.hidden)
    return d


# ---------------------------------------------------------------------------
# Strategies: weighted mixtures of pure policies
# ---------------------------------------------------------------------------


@dataclass
class Strategy:
    id: str
    role: Role
    components: list[tuple[float, Policy]]


def pure(id_: str, policy: Policy) -> Strategy:
    return Strategy(id_, Role(policy.role), [(1.0, policy)])


def doar_strategies(result: DoarResult) -> dict[Role, Strategy]:
    out = {}
    for role in ROLES:
        comps = [(float(w), e.policy) for w, e in zip(result.profile.of(role), result.pool.entries[role]) if w > 0]
        out[role] = Strategy("doar", role, comps)
    return out


def save_solution(result: DoarResult, scenario: Scenario, out_dir) -> None:
    out = Path(out_dir)
    result.write(out)
    (out / "scenario.json").write_text(json.dumps(scenario.to_dict(), indent=2, sort_keys=True))


def load_solution(out_dir) -> tuple[dict[Role, Strategy], Scenario]:
    """DOAR mixtures from a ``solve`` output directory."""
    out = Path(out_dir)
    prof = out / "profile.csv"
    if not prof.exists():
        raise ExperimentError(f"no solver output in {out}")
    scenario = Scenario.load(out / "scenario.json")
    comps: dict[Role, list[tuple[float, Policy]]] = {r: [] for r in ROLES}
    with open(prof, newline="") as fh:
        for row in csv.DictReader(fh):
            w, role = float(row["probability"]), Role(row["role"])
            if w <= 0:
                continue
            sid = row["strategy_id"]
            if row["provenance"] == "baseline":
                pol = baseline(sid, role)
            else:
                pol = CriticPolicy(role, load_weights(out / f"{sid}.weights"),
                                   scenario.doar.beam_k, scenario.doar.beam_tau, sid)
            comps[role].append((w, pol))
    return {r: Strategy("doar", r, comps[r]) for r in ROLES}, scenario


def resolve(ids, role: Role, solution: dict[Role, Strategy] | None = None) -> list[Strategy]:
    out = []
    for sid in ids:
        if sid == "doar":
            if solution is None:
                raise ExperimentError("the doar strategy needs solver output")
            out.append(solution[Role(role)])
        else:
            try:
                out.append(pure(sid, baseline(sid, role)))
            except KeyError as exc:
                raise ExperimentError(str(exc)) from exc
    return out


def rollout_metrics(env: CyberEnv, attacker: Policy, defender: Policy, seed: int) -> np.ndarray:
    z = None
    if env.prior is not None:
        # same z for every pairing at this seed
        z = sample_index(env.prior, np.random.default_rng([seed, 99]))
    r = play_episode(env, attacker, defender, seed, zero_day_index=z)
    return np.array([r.metrics[m] for m in METRICS])


def pairing_metrics(cfg: EnvConfig, a: Strategy, d: Strategy, seeds: list[int],
                    env: CyberEnv | None = None) -> np.ndarray:
    """Per-seed mixture-expected metrics, shape (len(seeds), len(METRICS))."""
    env = env or CyberEnv(cfg)
    out = np.zeros((len(seeds), len(METRICS)))
    for wa, pa in a.components:
        for wd, pd in d.components:
            out += wa * wd * np.array([rollout_metrics(env, pa, pd, s) for s in seeds])
    return out


# ---------------------------------------------------------------------------
# Cross-tables
# ---------------------------------------------------------------------------


@dataclass
class CrossTable:
    attacker_ids: list[str]
    defender_ids: list[str]
    runs: dict[tuple[str, str], np.ndarray]  # per-seed metrics

    def mean(self, a: str, d: str, role: Role) -> float:
        return float(self.runs[a, d][:, METRICS.index(Role(role).value)].mean())

    def std(self, a: str, d: str, role: Role) -> float:
        col = self.runs[a, d][:, METRICS.index(Role(role).value)]
        return float(col.std(ddof=1)) if col.size > 1 else 0.0

    def payoffs(self, a: str, d: str, role: Role) -> np.ndarray:
        return self.runs[a, d][:, METRICS.index(Role(role).value)]

    def write(self, out_dir) -> list[Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        paths = []
        for role in ROLES:
            p = out / f"cross_table_{role.value}.csv"
            with open(p, "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(["attacker \\ defender", *self.defender_ids])
                for a in self.attacker_ids:
                    w.writerow([a, *(f"{self.mean(a, d, role):.3f} ± {self.std(a, d, role):.3f}"
                                     for d in self.defender_ids)])
            paths.append(p)
        return paths


def run_cross_table(cfg: EnvConfig, attackers: list[Strategy], defenders: list[Strategy],
                    runs: int, seed: int) -> CrossTable:
    if runs < 1:
        raise ExperimentError("need at least one run per cell")
    seeds = derive_seeds(seed, runs, salt=53)
    env = CyberEnv(cfg)
    table = {(a.id, d.id): pairing_metrics(cfg, a, d, seeds, env) for a in attackers for d in defenders}
    return CrossTable([a.id for a in attackers], [d.id for d in defenders], table)


def at_least(mine: np.ndarray, other: np.ndarray, alpha: float = 0.1) -> tuple[bool, float]:
    """``mine >= other`` unless a paired one-sided signed-rank test says otherwise at ``alpha``."""
    mine, other = np.asarray(mine, float), np.asarray(other, float)
    if mine.mean() >= other.mean():
        return True, 1.0
    diff = mine - other
    if np.all(diff == 0):
        return True, 1.0
    p = float(stats.wilcoxon(mine, other, alternative="less").pvalue)
    return p >= alpha, p


# ---------------------------------------------------------------------------
# Sweeps
# ---------------------------------------------------------------------------


@dataclass
class SweepSpec:
    parameter: str
    values: tuple[float, ...]
    regime: str = "fixed"
    known: bool = False
    runs: int = 10
    seeds: tuple[int, ...] = (0,)
    scenario: Scenario = field(default_factory=Scenario)

    def __post_init__(self):
        if self.parameter not in SWEEP_PARAMETERS:
            raise ConfigError(f"unknown sweep parameter {self.parameter!r}; use one of {SWEEP_PARAMETERS}")
        if not self.values:
            raise ConfigError("empty sweep grid")
        if self.runs < 1:
            raise ConfigError("need at least one run per grid point")

    @classmethod
    def from_dict(cls, d: dict, base_dir: Path | None = None) -> SweepSpec:
        unknown = set(d) - {"parameter", "values", "regime", "known", "runs", "seeds", "scenario"}
        if unknown:
            raise ConfigError(f"unknown sweep keys {sorted(unknown)}")
        try:
            return cls(str(d["parameter"]), tuple(float(v) for v in d["values"]), str(d.get("regime", "fixed")),
                       bool(d.get("known", False)), int(d.get("runs", 10)),
                       tuple(int(s) for s in d.get("seeds", (0,))),
                       Scenario.from_dict(d.get("scenario", {}), base_dir))
        except KeyError as exc:
            raise ConfigError(f"sweep spec missing {exc}") from exc

    @classmethod
    def load(cls, path) -> SweepSpec:
        path = Path(path)
        try:
            return cls.from_dict(json.loads(path.read_text()), path.parent)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read sweep spec {path}: {exc}") from exc


def point_config(base: EnvConfig, parameter: str, value: float, regime: str = "fixed",
                 known: bool = False) -> EnvConfig:
    if parameter == "work_scale":
        return base.with_utilities(work_scale=float(value))
    if parameter == "defense_cost":
        return base.with_utilities(def_scale=float(value))
    if parameter == "network_size":
        n = int(value)
        cfg = dataclasses.replace(base, n_devices=n, max_devices=max(base.max_devices, 2 * n))
        cfg.validate()
        return cfg
    if parameter == "zero_day_candidates":
        if base.zero_day is None:
            return zero_day_scenario(base, regime, int(value), known)
        zd = dataclasses.replace(base.zero_day, regime=regime, n_candidates=int(value), known=known)
        cfg = dataclasses.replace(base, zero_day=zd)
        cfg.validate()
        return cfg
    raise ConfigError(f"unknown sweep parameter {parameter!r}")


def evaluate_profile(result: DoarResult, cfg: EnvConfig, runs: int, seed: int) -> dict[str, float]:
    strat = doar_strategies(result)
    seeds = derive_seeds(seed, runs, salt=59)
    m = pairing_metrics(cfg, strat[Role.ATTACKER], strat[Role.DEFENDER], seeds)
    return dict(zip(METRICS, (float(v) for v in m.mean(axis=0))))


def run_sweep(spec: SweepSpec) -> list[dict]:
    """One DOAR solve plus an equilibrium evaluation per (seed, grid value)."""
    rows = []
    for seed in spec.seeds:
        # common random numbers: every grid value reuses the solver and evaluation streams
        point_seed = derive_seeds(seed, 1, salt=61)[0]
        for value in spec.values:
            cfg = point_config(spec.scenario.env, spec.parameter, value, spec.regime, spec.known)
            log.info("sweep %s=%s seed %d", spec.parameter, value, seed)
            result = doar_loop(cfg, spec.scenario.doar, seed=point_seed)
            metrics = evaluate_profile(result, cfg, spec.runs, point_seed)
            rows.append({"parameter": spec.parameter, "value": value, "regime": spec.regime,
                         "known": int(spec.known), "seed": seed, **metrics})
    return rows


def write_rows(rows: list[dict], path, header=SWEEP_HEADER) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=header, extrasaction="ignore")
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})


# ---------------------------------------------------------------------------
# Trend checks and reports
# ---------------------------------------------------------------------------


@dataclass
class TrendCheck:
    name: str
    values: list[float]
    direction: str  # "nonincreasing" | "nondecreasing"
    method: str = "monotone"  # "monotone" (pairwise) | "spearman" (sign of rank correlation)

    @property
    def rho(self) -> float:
        v = np.asarray(self.values, float)
        if v.size < 2 or np.all(v == v[0]):
            return 0.0
        return float(stats.spearmanr(np.arange(v.size), v).statistic)

    @property
    def passed(self) -> bool:
        v = np.asarray(self.values, float)
        sign = -1 if self.direction == "nonincreasing" else 1
        if self.method == "spearman":
            return sign * self.rho >= 0
        return bool(np.all(sign * np.diff(v) >= 0))


def grid_means(rows: list[dict], metric: str) -> tuple[list[float], list[float]]:
    values = sorted({r["value"] for r in rows})
    return values, [float(np.mean([r[metric] for r in rows if r["value"] == v])) for v in values]


def emit_report(out_dir, sweeps: dict[str, list[dict]] | None = None, checks: list[TrendCheck] | None = None,
                cross: CrossTable | None = None) -> str:
    """Per-figure CSVs (fixed column schema) plus a text summary of the trend checks."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for name, rows in sorted((sweeps or {}).items()):
        write_rows(rows, out / f"sweep_{name}.csv")
    if cross is not None:
        cross.write(out)
    checks = checks or []
    lines = [f"trend checks: {sum(c.passed for c in checks)}/{len(checks)} passed"]
    for c in checks:
        vals = ", ".join(f"{v:.3f}" for v in c.values)
        lines.append(f"{'PASS' if c.passed else 'FAIL'} {c.name}: {c.direction} ({c.method}, rho={c.rho:+.2f}) [{vals}]")
    text = "\n".join(lines) + "\n"
    (out / "report.txt").write_text(text)
    return text


def sweep_checks(parameter: str, regime: str, rows: list[dict], known: bool = False) -> list[TrendCheck]:
    """The trend targets attached to each sweep kind."""
    tag = f"{parameter}" + (f"[{regime}{', known' if known else ''}]" if parameter == "zero_day_candidates" else "")
    if parameter == "work_scale":
        return [TrendCheck(f"{tag} scans_per_step", grid_means(rows, "scans_per_step")[1], "nonincreasing", "spearman"),
                TrendCheck(f"{tag} workloads_completed", grid_means(rows, "workloads_completed")[1],
                           "nondecreasing", "spearman")]
    if parameter == "defense_cost":
        return [TrendCheck(f"{tag} scans_per_step", grid_means(rows, "scans_per_step")[1], "nonincreasing", "spearman")]
    if parameter == "zero_day_candidates":
        direction = "nonincreasing" if regime == "fixed" else "nondecreasing"
        return [TrendCheck(f"{tag} attacker", grid_means(rows, "attacker")[1], direction)]
    return []
