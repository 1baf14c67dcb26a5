"""Isolation-forest anomaly detection over simulated per-device traffic."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

FEATURES = ("workload_traffic", "probe_traffic", "exploit_traffic", "fanout")
EULER_GAMMA = 0.5772156649015329


class DetectorError(RuntimeError):
    pass


@dataclass(frozen=True)
class DetectorConfig:
    n_trees: int = 100
    subsample: int = 64
    threshold: float = 0.6
    burn_in: int = 10
    burn_in_samples: int = 256  # burn-in continues past burn_in steps until this many samples
    window: int = 3  # steps of history a scan looks back over


@dataclass(frozen=True)
class TrafficSample:
    device: int
    step: int
    workload_traffic: float
    probe_traffic: float
    exploit_traffic: float
    fanout: float

    def vector(self) -> np.ndarray:
        return np.array(
            [self.workload_traffic, self.probe_traffic, self.exploit_traffic, self.fanout],
            dtype=float,
        )


def average_path_length(n: int | float) -> float:
    """Expected unsuccessful-search path length in a BST of ``n`` points."""
    if n <= 1:
        return 0.0
    if n == 2:
        return 1.0
    return 2.0 * (math.log(n - 1) + EULER_GAMMA) - 2.0 * (n - 1) / n


@dataclass
class _Tree:
    # parallel arrays; feature == -1 marks an external node
    feature: list[int] = field(default_factory=list)
    threshold: list[float] = field(default_factory=list)
    left: list[int] = field(default_factory=list)
    right: list[int] = field(default_factory=list)
    size: list[int] = field(default_factory=list)

    def _node(self, feature: int, threshold: float, size: int) -> int:
        self.feature.append(feature)
        self.threshold.append(threshold)
        self.left.append(-1)
        self.right.append(-1)
        self.size.append(size)
        return len(self.feature) - 1

    def freeze(self) -> None:
        self._arrays = (
            np.asarray(self.feature),
            np.asarray(self.threshold),
            np.asarray(self.left),
            np.asarray(self.right),
            np.array([average_path_length(s) for s in self.size]),
        )

    def path_lengths(self, X: np.ndarray) -> np.ndarray:
        """Path length (with external-node size adjustment) for each row of X."""
        if not hasattr(self, "_arrays"):
            self.freeze()
        feature, threshold, left, right, adjust = self._arrays
        node = np.zeros(X.shape[0], dtype=np.int64)
        depth = np.zeros(X.shape[0])
        rows = np.arange(X.shape[0])
        internal = feature[node] >= 0
        while internal.any():
            r = rows[internal]
            n = node[r]
            go_left = X[r, feature[n]] < threshold[n]
            node[r] = np.where(go_left, left[n], right[n])
            depth[r] += 1
            internal = feature[node] >= 0
        return depth + adjust[node]


def _build(tree: _Tree, X: np.ndarray, depth: int, limit: int, rng: np.random.Generator) -> int:
    n = X.shape[0]
    if depth >= limit or n <= 1:
        return tree._node(-1, 0.0, n)
    lo, hi = X.min(axis=0), X.max(axis=0)
    splittable = np.flatnonzero(hi > lo)
    if splittable.size == 0:
        return tree._node(-1, 0.0, n)
    q = int(splittable[rng.integers(splittable.size)])
    p = float(rng.uniform(lo[q], hi[q]))
    mask = X[:, q] < p
    idx = tree._node(q, p, n)
    tree.left[idx] = _build(tree, X[mask], depth + 1, limit, rng)
    tree.right[idx] = _build(tree, X[~mask], depth + 1, limit, rng)
    return idx


@dataclass
class IsolationForest:
    n_trees: int = 100
    subsample: int = 64
    threshold: float = 0.6
    trees: list[_Tree] = field(default_factory=list)
    psi: int = 0  # effective subsample size used for normalisation

    @property
    def trained(self) -> bool:
        return bool(self.trees)

    def _pack(self) -> tuple:
        # all trees in one set of arrays, child indices offset per tree
        packed = getattr(self, "_packed", None)
        if packed is not None and packed[0] == len(self.trees):
            return packed[1]
        parts, roots, offset = [], [], 0
        for t in self.trees:
            if not hasattr(t, "_arrays"):
                t.freeze()
            feature, threshold, left, right, adjust = t._arrays
            shift = np.where(feature >= 0, offset, 0)
            parts.append((feature, threshold, left + shift, right + shift, adjust))
            roots.append(offset)
            offset += feature.size
        arrays = tuple(np.concatenate(col) for col in zip(*parts)) + (np.array(roots),)
        self._packed = (len(self.trees), arrays)
        return arrays

    def path_lengths(self, X: np.ndarray) -> np.ndarray:
        """Mean adjusted path length over the trees, all trees traversed together."""
        if not self.trained:
            raise DetectorError("isolation forest used before fit")
        X = np.atleast_2d(np.asarray(X, dtype=float))
        feature, threshold, left, right, adjust, roots = self._pack()
        node = np.repeat(roots[:, None], X.shape[0], axis=1)
        cols = np.broadcast_to(np.arange(X.shape[0]), node.shape)
        depth = np.zeros(node.shape)
        internal = feature[node] >= 0
        while internal.any():
            n = node[internal]
            go_left = X[cols[internal], feature[n]] < threshold[n]
            node[internal] = np.where(go_left, left[n], right[n])
            depth[internal] += 1
            internal = feature[node] >= 0
        return np.mean(depth + adjust[node], axis=0)

    def score(self, X: np.ndarray) -> np.ndarray:
        """Anomaly scores ``2**(-E[h(x)] / c(psi))`` in (0, 1]."""
        h = self.path_lengths(X)
        c = average_path_length(self.psi)
        if c == 0.0:
            return np.ones_like(h)
        return np.power(2.0, -h / c)


def fit(
    samples: np.ndarray,
    n_trees: int = 100,
    subsample: int = 64,
    seed: int | np.random.Generator | None = None,
    threshold: float = 0.6,
) -> IsolationForest:
    X = np.atleast_2d(np.asarray(samples, dtype=float))
    if X.shape[0] < subsample or subsample < 1:
        raise DetectorError(f"need at least {subsample} samples to fit, got {X.shape[0]}")
    rng = np.random.default_rng(seed)
    limit = math.ceil(math.log2(subsample)) if subsample > 1 else 0
    forest = IsolationForest(n_trees=n_trees, subsample=subsample, threshold=threshold, psi=subsample)
    for _ in range(n_trees):
        rows = rng.choice(X.shape[0], size=subsample, replace=False)
        tree = _Tree()
        _build(tree, X[rows], 0, limit, rng)
        tree.freeze()
        forest.trees.append(tree)
    return forest


def refit(
    forest: IsolationForest, window: np.ndarray, seed: int | np.random.Generator | None = None
) -> IsolationForest:
    """Retrain on a trailing window with the same hyperparameters."""
    return fit(window, forest.n_trees, min(forest.subsample, len(window)), seed, forest.threshold)


def alerts(scores: np.ndarray, threshold: float) -> np.ndarray:
    return np.asarray(scores) > threshold


def scan(
    devices: list[int],
    recent: dict[int, list[TrafficSample]],
    forest: IsolationForest,
    threshold: float | None = None,
) -> dict[int, tuple[bool, float]]:
    """Score each device on its recent samples (max over the window).

    Devices with no recent traffic score 0 and never alert.
    """
    if not forest.trained:
        raise DetectorError("scan before fit")
    theta = forest.threshold if threshold is None else threshold
    owners, vectors = [], []
    for d in devices:
        for r in recent.get(d, []):
            owners.append(d)
            vectors.append(r.vector())
    best = {d: 0.0 for d in devices}
    if vectors:
        for d, s in zip(owners, forest.score(np.stack(vectors))):
            best[d] = max(best[d], float(s))
    return {d: (best[d] > theta, best[d]) for d in devices}


def roc_auc(scores_pos: np.ndarray, scores_neg: np.ndarray) -> float:
    """Mann-Whitney AUC with ties counted as one half."""
    pos = np.asarray(scores_pos, dtype=float)
    neg = np.asarray(scores_neg, dtype=float)
    wins = (pos[:, None] > neg[None, :]).sum() + 0.5 * (pos[:, None] == neg[None, :]).sum()
    return float(wins / (pos.size * neg.size))


def inject_exploit_burst(
    samples: np.ndarray,
    rng: np.random.Generator,
    attempts: float = 2.0,
    adversarial_rate: float = 1.0,
) -> np.ndarray:
    """Overlay the footprint of exploit activity on clean traffic vectors.

    Each row gains ``1 + Poisson(attempts - 1)`` exploit attempts, the same
    number of outbound connections, and ``Poisson(adversarial_rate)`` extra
    workload traffic from the implant.
    """
    X = np.array(samples, dtype=float, copy=True)
    k = 1 + rng.poisson(max(attempts - 1.0, 0.0), X.shape[0])
    X[:, 2] += k
    X[:, 3] += k
    X[:, 0] += rng.poisson(adversarial_rate, X.shape[0])
    return X
