"""Regression trees, random forests and squared-loss gradient boosting.

Trees use exact greedy splits. Each tree presorts its samples once per
feature; a split then stably partitions every feature's sorted run in place,
so no node is ever re-sorted. A cut's score is the summed variance
reduction over all outputs. The kernels are compiled with numba and release
the GIL, so independent trees fit in parallel threads.
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numba
import numpy as np

SERIAL_VERSION = 1


@numba.njit(cache=True, nogil=True)
def _grow(XT, Y, order, max_depth, min_leaf, n_feat, seed):
    F, n = XT.shape
    K = Y.shape[1]
    np.random.seed(seed)
    cap = 2 * n - 1
    if 0 <= max_depth < 40:  # larger depths would overflow and cannot bind anyway
        cap = min(cap, 2 ** (max_depth + 1) - 1)
    feature = -np.ones(cap, dtype=np.int64)
    threshold = np.zeros(cap)
    left = -np.ones(cap, dtype=np.int64)
    right = -np.ones(cap, dtype=np.int64)
    value = np.zeros((cap, K))

    stack = np.zeros((cap, 4), dtype=np.int64)      # node, start, end, depth
    stack[0, 0], stack[0, 1], stack[0, 2], stack[0, 3] = 0, 0, n, 0
    top = 1
    n_nodes = 1
    feats = np.arange(F)
    goes_left = np.zeros(n, dtype=np.bool_)
    buf = np.zeros(n, dtype=np.int64)
    s_tot = np.zeros(K)
    s_left = np.zeros(K)

    while top > 0:
        top -= 1
        node, start, end, depth = stack[top, 0], stack[top, 1], stack[top, 2], stack[top, 3]
        cnt = end - start
        s_tot[:] = 0.0
        for i in range(start, end):
            s = order[0, i]
            for k in range(K):
                s_tot[k] += Y[s, k]
        for k in range(K):
            value[node, k] = s_tot[k] / cnt
        if (max_depth >= 0 and depth >= max_depth) or cnt < 2 * min_leaf:
            continue
        # node-centred sums keep gains free of cancellation; gain = |S_L|^2 n / (n_L n_R)
        sst = 0.0
        scale = 1.0
        for k in range(K):
            scale = max(scale, 1.0 + abs(value[node, k]))
        for i in range(start, end):
            s = order[0, i]
            for k in range(K):
                d = Y[s, k] - value[node, k]
                sst += d * d
        noise = cnt * (16.0 * 2.220446049250313e-16 * scale) ** 2
        if sst <= noise:
            continue

        # partial Fisher-Yates draw of the node's candidate features
        for j in range(n_feat):
            r = j + np.random.randint(F - j)
            feats[j], feats[r] = feats[r], feats[j]

        best_gain = 1e-12 * sst + noise
        best_f = -1
        best_thr = 0.0
        for jf in range(n_feat):
            f = feats[jf]
            s_left[:] = 0.0
            for p in range(start, end - 1):
                s = order[f, p]
                for k in range(K):
                    s_left[k] += Y[s, k] - value[node, k]
                nl = p - start + 1
                nr = cnt - nl
                if nl < min_leaf:
                    continue
                if nr < min_leaf:
                    break
                x0 = XT[f, s]
                x1 = XT[f, order[f, p + 1]]
                if not x0 < x1:
                    continue
                gl = 0.0
                for k in range(K):
                    gl += s_left[k] * s_left[k]
                gain = gl * cnt / (nl * nr)
                if gain > best_gain:
                    best_gain = gain
                    best_f = f
                    thr = 0.5 * (x0 + x1)
                    best_thr = thr if thr < x1 else x0
        if best_f < 0:
            continue

        n_left = 0
        for i in range(start, end):
            s = order[0, i]
            goes_left[s] = XT[best_f, s] <= best_thr
            if goes_left[s]:
                n_left += 1
        for f in range(F):
            a = start
            b = 0
            for i in range(start, end):
                s = order[f, i]
                if goes_left[s]:
                    order[f, a] = s
                    a += 1
                else:
                    buf[b] = s
                    b += 1
            for i in range(b):
                order[f, a + i] = buf[i]

        li = n_nodes
        ri = n_nodes + 1
        n_nodes += 2
        feature[node] = best_f
        threshold[node] = best_thr
        left[node] = li
        right[node] = ri
        stack[top, 0], stack[top, 1], stack[top, 2], stack[top, 3] = ri, start + n_left, end, depth + 1
        stack[top + 1, 0], stack[top + 1, 1], stack[top + 1, 2], stack[top + 1, 3] = li, start, start + n_left, depth + 1
        top += 2
    return feature[:n_nodes], threshold[:n_nodes], left[:n_nodes], right[:n_nodes], value[:n_nodes]


@dataclass(frozen=True)
class Tree:
    """Flat node arrays; ``feature == -1`` marks a leaf."""

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray

    def __post_init__(self):
        if not (np.isfinite(self.threshold).all() and np.isfinite(self.value).all()):
            raise ValueError("tree thresholds and leaf values must be finite")
        for a in (self.feature, self.threshold, self.left, self.right, self.value):
            a.setflags(write=False)

    @property
    def n_nodes(self):
        return len(self.feature)

    @property
    def depth(self):
        depth = np.zeros(self.n_nodes, dtype=int)
        for i in range(self.n_nodes):
            if self.feature[i] >= 0:
                depth[self.left[i]] = depth[self.right[i]] = depth[i] + 1
        return int(depth.max())

    def predict(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        node = np.zeros(len(X), dtype=np.int64)
        live = np.arange(len(X))
        while len(live):
            f = self.feature[node[live]]
            inner = f >= 0
            live, f = live[inner], f[inner]
            nd = node[live]
            node[live] = np.where(X[live, f] <= self.threshold[nd], self.left[nd], self.right[nd])
        return self.value[node]

    def to_dict(self):
        return {"feature": self.feature.tolist(), "threshold": self.threshold.tolist(),
                "left": self.left.tolist(), "right": self.right.tolist(), "value": self.value.tolist()}

    @classmethod
    def from_dict(cls, d):
        n = len(d["feature"])
        return cls(feature=np.array(d["feature"], dtype=np.int64), threshold=np.array(d["threshold"], dtype=float),
                   left=np.array(d["left"], dtype=np.int64), right=np.array(d["right"], dtype=np.int64),
                   value=np.array(d["value"], dtype=float).reshape(n, -1))


def presort(X) -> np.ndarray:
    """Per-feature ascending sample order, shape (n_features, n_samples)."""
    return np.ascontiguousarray(np.argsort(X, axis=0, kind="stable").T)


def fit_tree(X, Y, max_depth=None, min_leaf=1, feature_frac=1.0, seed=0, order=None) -> Tree:
    """Grow one tree on ``X`` (n, F) against ``Y`` (n, K) or (n,).

    ``feature_frac < 1`` draws a fresh feature subset at every node.
    ``order`` may carry a :func:`presort` of ``X``; it is copied, not modified.
    """
    X = np.ascontiguousarray(X, dtype=float)
    Y = np.asarray(Y, dtype=float)
    Y = np.ascontiguousarray(Y[:, None] if Y.ndim == 1 else Y)
    if X.ndim != 2 or len(X) != len(Y):
        raise ValueError(f"X {X.shape} and Y {Y.shape} disagree")
    if len(X) == 0:
        raise ValueError("cannot fit a tree on an empty dataset")
    if min_leaf < 1:
        raise ValueError("min_leaf must be >= 1")
    if not 0.0 < feature_frac <= 1.0:
        raise ValueError("feature_frac must be in (0, 1]")
    if not (np.isfinite(X).all() and np.isfinite(Y).all()):
        raise ValueError("training data must be finite")
    F = X.shape[1]
    n_feat = max(1, int(round(feature_frac * F)))
    order = presort(X) if order is None else np.array(order, dtype=np.int64, copy=True)
    # centring keeps the prefix-sum gains well conditioned
    mu = Y.mean(axis=0)
    feat, thr, lft, rgt, val = _grow(np.ascontiguousarray(X.T), Y - mu, order, -1 if max_depth is None else int(max_depth),
                                     int(min_leaf), n_feat, int(seed) % (2 ** 31))
    return Tree(feat.copy(), thr.copy(), lft.copy(), rgt.copy(), val + mu)


def _pool_map(fn, items, jobs):
    if jobs is None or jobs <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))


@dataclass(frozen=True)
class ForestConfig:
    trees: int = 100
    max_depth: int | None = 12
    min_leaf: int = 1
    feature_frac: float = 0.7
    bootstrap: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.trees < 1:
            raise ValueError("a forest needs at least one tree")
        if not 0.0 < self.feature_frac <= 1.0:
            raise ValueError("feature_frac must be in (0, 1]")
        if self.min_leaf < 1:
            raise ValueError("min_leaf must be >= 1")


@dataclass(frozen=True)
class ForestModel:
    trees: tuple
    config: ForestConfig
    kind: str = field(default="forest", init=False)

    def predict(self, X) -> np.ndarray:
        return np.mean([t.predict(X) for t in self.trees], axis=0)

    def to_dict(self):
        return {"kind": self.kind, "version": SERIAL_VERSION, "config": _cfg_dict(self.config),
                "trees": [t.to_dict() for t in self.trees]}


def fit_forest(X, Y, cfg: ForestConfig = ForestConfig(), jobs=1) -> ForestModel:
    """Bootstrap-aggregated trees with joint multi-output splits."""
    X = np.asarray(X, dtype=float)
    Y = np.asarray(Y, dtype=float)
    n = len(X)
    seeds = np.random.SeedSequence(cfg.seed).generate_state(cfg.trees)

    def one(s):
        rng = np.random.default_rng(s)
        idx = rng.integers(0, n, n) if cfg.bootstrap else np.arange(n)
        return fit_tree(X[idx], Y[idx], cfg.max_depth, cfg.min_leaf, cfg.feature_frac, seed=int(s))

    return ForestModel(tuple(_pool_map(one, seeds, jobs)), cfg)


@dataclass(frozen=True)
class GbtConfig:
    rounds: int = 300
    shrinkage: float = 0.1
    max_depth: int = 6
    min_leaf: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.rounds < 1:
            raise ValueError("gbt needs at least one round")
        if not 0.0 < self.shrinkage <= 1.0:
            raise ValueError("shrinkage must be in (0, 1]")
        if self.max_depth < 0 or self.min_leaf < 1:
            raise ValueError("max_depth must be >= 0 and min_leaf >= 1")


@dataclass(frozen=True)
class GbtModel:
    """``init + shrinkage * sum of trees``; ``trees[k]`` holds output ``k``'s rounds."""

    init: np.ndarray
    trees: tuple
    config: GbtConfig
    kind: str = field(default="gbt", init=False)

    def predict(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        out = np.tile(self.init, (len(X), 1))
        for k, chain in enumerate(self.trees):
            for t in chain:
                out[:, k] += self.config.shrinkage * t.predict(X)[:, 0]
        return out

    def to_dict(self):
        return {"kind": self.kind, "version": SERIAL_VERSION, "config": _cfg_dict(self.config),
                "init": self.init.tolist(), "trees": [[t.to_dict() for t in chain] for chain in self.trees]}


def fit_gbt(X, Y, cfg: GbtConfig = GbtConfig(), jobs=1, history=None) -> GbtModel:
    """Squared-loss boosting, one tree per output per round.

    If ``history`` is a list, the training MSE after each round is appended.
    """
    X = np.ascontiguousarray(X, dtype=float)
    Y = np.asarray(Y, dtype=float)
    Y = Y[:, None] if Y.ndim == 1 else Y
    order = presort(X)
    init = Y.mean(axis=0)
    pred = np.tile(init, (len(X), 1))
    chains = [[] for _ in range(Y.shape[1])]
    for r in range(cfg.rounds):
        resid = Y - pred

        def one(k):
            return fit_tree(X, resid[:, k], cfg.max_depth, cfg.min_leaf, 1.0, seed=cfg.seed + r, order=order)

        fitted = _pool_map(one, range(Y.shape[1]), jobs)
        for k, t in enumerate(fitted):
            chains[k].append(t)
            pred[:, k] += cfg.shrinkage * t.predict(X)[:, 0]
        if history is not None:
            history.append(float(np.mean((Y - pred) ** 2)))
    return GbtModel(init, tuple(tuple(c) for c in chains), cfg)


def _cfg_dict(cfg):
    return {k: getattr(cfg, k) for k in cfg.__dataclass_fields__}


def model_from_dict(d):
    if d.get("version") != SERIAL_VERSION:
        raise ValueError(f"unsupported tree model version {d.get('version')}")
    if d.get("kind") == "forest":
        return ForestModel(tuple(Tree.from_dict(t) for t in d["trees"]), ForestConfig(**d["config"]))
    if d.get("kind") == "gbt":
        return GbtModel(np.array(d["init"], dtype=float),
                        tuple(tuple(Tree.from_dict(t) for t in chain) for chain in d["trees"]),
                        GbtConfig(**d["config"]))
    raise ValueError(f"unknown tree model kind {d.get('kind')!r}")
