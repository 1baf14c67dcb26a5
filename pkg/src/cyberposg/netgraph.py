"""Directed device graph with Barabasi-Albert growth and Poisson churn."""

from __future__ import annotations

import copy
import logging
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)


class GraphError(ValueError):
    pass


@dataclass(frozen=True)
class ChurnConfig:
    lam: float = 0.7
    p_add: float = 0.4
    p_att: float = 0.1
    attach_m: int = 2
    min_size: int = 8

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("churn rate must be non-negative")
        if not (0.0 <= self.p_add <= 1.0 and 0.0 <= self.p_att <= 1.0):
            raise ValueError("probabilities must lie in [0, 1]")
        if self.attach_m < 1:
            raise ValueError("attach_m must be >= 1")


@dataclass
class NetworkGraph:
    """Underlying directed structure over a fixed pool of node slots.

    ``edges`` is the underlying structure; an edge is *active* when both
    endpoints are online. Offline nodes keep their edges so a re-activated
    node rejoins with its old links.
    """

    n_nodes: int
    edges: set[tuple[int, int]] = field(default_factory=set)
    online: np.ndarray = None
    attacker_owned: set[int] = field(default_factory=set)
    protected: set[int] = field(default_factory=set)  # never removed by churn
    min_size: int = 1

    def __post_init__(self):
        if self.online is None:
            self.online = np.zeros(self.n_nodes, dtype=bool)

    def copy(self) -> NetworkGraph:
        return copy.deepcopy(self)

    # -- queries -----------------------------------------------------------
    def has_edge(self, i: int, j: int) -> bool:
        return (i, j) in self.edges

    def active(self, i: int, j: int) -> bool:
        return (i, j) in self.edges and self.online[i] and self.online[j]

    def out_neighbors(self, i: int, active_only: bool = True) -> list[int]:
        return sorted(j for (a, j) in self.edges if a == i and (not active_only or self.online[j]))

    def in_neighbors(self, j: int, active_only: bool = True) -> list[int]:
        return sorted(i for (i, b) in self.edges if b == j and (not active_only or self.online[i]))

    def degree(self, i: int) -> int:
        return sum(1 for (a, b) in self.edges if a == i or b == i)

    def degrees(self) -> np.ndarray:
        deg = np.zeros(self.n_nodes, dtype=np.int64)
        for a, b in self.edges:
            deg[a] += 1
            deg[b] += 1
        return deg

    def online_nodes(self) -> list[int]:
        return [int(i) for i in np.flatnonzero(self.online)]

    def network_size(self) -> int:
        """Online nodes that belong to the organisation (not attacker-owned)."""
        return sum(1 for i in np.flatnonzero(self.online) if int(i) not in self.attacker_owned)

    def add_edge(self, i: int, j: int) -> None:
        if i == j:
            raise GraphError("self-loops are not allowed")
        if not (0 <= i < self.n_nodes and 0 <= j < self.n_nodes):
            raise GraphError(f"edge ({i}, {j}) references a missing node")
        self.edges.add((i, j))

    # -- invariant repair --------------------------------------------------
    def reconnect_attacker_owned(self) -> list[tuple[int, int]]:
        """Ensure a bidirectional ring over online attacker-owned nodes."""
        owned = sorted(i for i in self.attacker_owned if self.online[i])
        added = []
        if len(owned) < 2:
            return added
        for a, b in zip(owned, owned[1:] + owned[:1]):
            for edge in ((a, b), (b, a)):
                if edge not in self.edges and edge[0] != edge[1]:
                    self.edges.add(edge)
                    added.append(edge)
        return added


def _preferential_targets(
    candidates: list[int], degrees: np.ndarray, m: int, rng: np.random.Generator
) -> list[int]:
    """Draw ``m`` distinct targets with probability proportional to degree."""
    pool = list(candidates)
    weights = degrees[pool].astype(float)
    chosen = []
    for _ in range(min(m, len(pool))):
        if weights.sum() <= 0:
            p = None
        else:
            p = weights / weights.sum()
        k = int(rng.choice(len(pool), p=p))
        chosen.append(pool.pop(k))
        weights = np.delete(weights, k)
    return chosen


def _attach(g: NetworkGraph, v: int, targets: list[int]) -> None:
    # m out-edges plus one in-edge from the first target keeps v reachable
    for t in targets:
        g.add_edge(v, t)
    if targets:
        g.add_edge(targets[0], v)


def generate_initial(
    n: int,
    attach_m: int = 2,
    seed: int | np.random.Generator | None = None,
    n_slots: int | None = None,
    min_size: int = 1,
) -> NetworkGraph:
    """Directed Barabasi-Albert graph on nodes ``0..n-1`` (all online).

    ``n_slots`` reserves extra offline node slots for later arrivals.
    """
    if n < attach_m + 1:
        raise GraphError(f"need at least attach_m + 1 = {attach_m + 1} nodes, got {n}")
    rng = np.random.default_rng(seed)
    g = NetworkGraph(n_nodes=n_slots or n, min_size=min_size)
    g.online[:n] = True
    seed_nodes = range(attach_m + 1)
    for i in seed_nodes:
        for j in seed_nodes:
            if i != j:
                g.edges.add((i, j))
    # each node appears once per incident edge, so a uniform draw is degree-weighted
    repeated = [i for (a, b) in sorted(g.edges) for i in (a, b)]
    for v in range(attach_m + 1, n):
        targets: list[int] = []
        while len(targets) < attach_m:
            t = repeated[int(rng.integers(len(repeated)))]
            if t not in targets:
                targets.append(t)
        _attach(g, v, targets)
        for t in targets:
            repeated += [v, t]
        repeated += [targets[0], v]
    return g


def load_edge_list(path: str | Path, n_slots: int | None = None, min_size: int = 1) -> NetworkGraph:
    """Read an exogenous topology: one ``i j`` pair per line, ``#`` comments."""
    pairs = []
    for raw in Path(path).read_text().splitlines():
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 2:
            raise GraphError(f"bad edge line: {raw!r}")
        pairs.append((int(parts[0]), int(parts[1])))
    top = max((max(p) for p in pairs), default=-1) + 1
    g = NetworkGraph(n_nodes=max(n_slots or 0, top), min_size=min_size)
    for i, j in pairs:
        g.add_edge(i, j)
    nodes = {i for p in pairs for i in p}
    g.online[sorted(nodes)] = True
    return g


# ---------------------------------------------------------------------------
# Churn
# ---------------------------------------------------------------------------


@dataclass
class ChurnEvent:
    kind: str  # "add" | "remove" | "skip"
    node: int | None
    attacker_owned: bool = False
    reason: str = ""


def evolve(g: NetworkGraph, cfg: ChurnConfig, rng: np.random.Generator) -> list[ChurnEvent]:
    """Apply one step of Poisson churn to ``g`` in place and return the event log."""
    events: list[ChurnEvent] = []
    k = int(rng.poisson(cfg.lam)) if cfg.lam > 0 else 0
    for _ in range(k):
        if rng.random() < cfg.p_add:
            offline = [i for i in range(g.n_nodes) if not g.online[i]]
            if not offline:
                log.debug("addition skipped: offline pool empty")
                events.append(ChurnEvent("skip", None, reason="offline pool empty"))
                continue
            v = offline[int(rng.integers(len(offline)))]
            hostile = bool(rng.random() < cfg.p_att)
            g.online[v] = True
            if hostile:
                g.attacker_owned.add(v)
            if g.degree(v) == 0:
                members = [
                    i for i in g.online_nodes() if i != v and i not in g.attacker_owned
                ]
                targets = _preferential_targets(members, g.degrees(), cfg.attach_m, rng)
                _attach(g, v, targets)
            events.append(ChurnEvent("add", v, attacker_owned=hostile))
        else:
            removable = [
                i
                for i in g.online_nodes()
                if i not in g.attacker_owned and i not in g.protected
            ]
            if g.network_size() <= g.min_size or not removable:
                events.append(ChurnEvent("skip", None, reason="minimum size"))
                continue
            v = removable[int(rng.integers(len(removable)))]
            g.online[v] = False
            events.append(ChurnEvent("remove", v))
    g.reconnect_attacker_owned()
    return events


def remove_edge(g: NetworkGraph, edge: tuple[int, int]) -> bool:
    """Drop ``edge``; returns False (and logs) if it was absent."""
    if edge not in g.edges:
        log.warning("remove_edge: %s not present", edge)
        return False
    g.edges.discard(edge)
    g.reconnect_attacker_owned()
    return True


def remove_device(g: NetworkGraph, i: int) -> bool:
    """Take node ``i`` offline; returns False if it was already offline."""
    if not (0 <= i < g.n_nodes) or not g.online[i]:
        log.warning("remove_device: node %s not online", i)
        return False
    g.online[i] = False
    g.reconnect_attacker_owned()
    return True


def reachable_from(g: NetworkGraph, src: int) -> set[int]:
    seen = {src}
    queue = deque([src])
    while queue:
        u = queue.popleft()
        for v in g.out_neighbors(u):
            if v not in seen:
                seen.add(v)
                queue.append(v)
    return seen


def degree_slope(degrees, bins_per_decade: int = 5) -> float:
    """Log-log slope of the degree distribution from log-binned densities.

    Bins are geometric over integer degrees; each bin's count is divided by
    the number of integers it spans before the least-squares fit.
    """
    deg = np.asarray(degrees)
    deg = deg[deg > 0]
    if deg.size == 0 or deg.min() == deg.max():
        raise GraphError("degree slope needs at least two distinct positive degrees")
    lo, hi = float(deg.min()), float(deg.max()) + 1
    n_bins = max(2, int(np.ceil(bins_per_decade * np.log10(hi / lo))))
    edges = np.unique(np.floor(np.geomspace(lo, hi, n_bins + 1)))
    counts, _ = np.histogram(deg, edges)
    widths = np.diff(edges)
    centres = np.sqrt(edges[:-1] * (edges[1:] - 1))
    keep = counts > 0
    if keep.sum() < 2:
        raise GraphError("too few occupied degree bins for a slope")
    dens = counts[keep] / widths[keep] / deg.size
    return float(np.polyfit(np.log(centres[keep]), np.log(dens), 1)[0])
