"""Deterministic Random Forest (CART bagging) for slot-level QoE prediction.

Trees are grown with an owned splitmix64 PRNG and exhaustive midpoint split
search so that identical (data, hyperparams, seed) always yield bit-identical
forests, serially or in parallel. Split ties resolve to the lowest feature
index and smallest threshold. Models serialize to versioned JSON with exact
float round-trip.
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from numba import njit

from .ground_truth import RATING_ORDER
from .trace_ingest import SessionMeta

MODEL_FORMAT = "qoe-lens-forest/1"

REGRESSION_TARGETS = ("fps", "brisque", "piqe")
CLASSIFICATION_TARGETS = ("brisque_rating", "piqe_rating")

_NO_DEPTH_LIMIT = 2**31 - 1


class EmptyTrainSet(Exception):
    """Fewer than two training samples."""


class SchemaMismatch(Exception):
    """Feature columns do not match the model's schema."""


@dataclass(frozen=True)
class Hyperparams:
    n_trees: int = 50
    max_depth: Optional[int] = 16
    min_samples_leaf: int = 5
    features_per_split: Optional[int] = None  # None = task default

    def resolve_features_per_split(self, d: int, task: str) -> int:
        if self.features_per_split is not None:
            return min(self.features_per_split, d)
        if task == "classification":
            return min(math.ceil(math.sqrt(d)), d)
        return min(math.ceil(d / 3), d)

    def to_dict(self) -> dict:
        return {"n_trees": self.n_trees, "max_depth": self.max_depth,
                "min_samples_leaf": self.min_samples_leaf,
                "features_per_split": self.features_per_split}

    @classmethod
    def from_dict(cls, d: dict) -> "Hyperparams":
        return cls(n_trees=int(d["n_trees"]),
                   max_depth=None if d["max_depth"] is None else int(d["max_depth"]),
                   min_samples_leaf=int(d["min_samples_leaf"]),
                   features_per_split=(None if d.get("features_per_split") is None
                                       else int(d["features_per_split"])))


# grid bounds follow the 10..100-tree tuning range
DEFAULT_GRID = tuple(
    Hyperparams(n_trees=t, max_depth=depth, min_samples_leaf=leaf)
    for t in (10, 25, 50, 100)
    for depth in (8, 16, None)
    for leaf in (1, 5)
)


@njit(cache=True, nogil=True)
def _mix64(state):
    state = state + np.uint64(0x9E3779B97F4A7C15)
    z = state
    z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return state, z ^ (z >> np.uint64(31))


@njit(cache=True, nogil=True)
def _grow_tree(X, y_reg, y_cls, n_classes, boot_idx, max_depth, min_leaf,
               n_try, seed):
    """Grow one CART tree over the bootstrap rows; returns flattened arrays
    (feature, threshold, left, right, payload). feature = -1 marks a leaf.
    payload holds the leaf mean (regression, 1 column) or class counts."""
    m_total = boot_idx.shape[0]
    d = X.shape[1]
    max_nodes = 2 * m_total + 1
    feature = np.full(max_nodes, -1, np.int32)
    threshold = np.zeros(max_nodes, np.float64)
    left = np.full(max_nodes, -1, np.int32)
    right = np.full(max_nodes, -1, np.int32)
    n_payload = n_classes if n_classes > 0 else 1
    payload = np.zeros((max_nodes, n_payload), np.float64)

    idx = boot_idx.copy()
    tmp_l = np.empty(m_total, np.int64)
    tmp_r = np.empty(m_total, np.int64)
    vals = np.empty(m_total, np.float64)
    sorted_y = np.empty(m_total, np.float64)
    sorted_c = np.empty(m_total, np.int64)
    cnt_l = np.zeros(64, np.float64)
    feats = np.empty(d, np.int64)
    chosen = np.empty(n_try, np.int64)
    stack = np.empty((max_nodes, 4), np.int64)

    state = seed
    stack[0, 0] = 0
    stack[0, 1] = 0
    stack[0, 2] = m_total
    stack[0, 3] = 0
    top = 1
    n_nodes = 1

    while top > 0:
        top -= 1
        node = stack[top, 0]
        start = stack[top, 1]
        end = stack[top, 2]
        depth = stack[top, 3]
        m = end - start

        if n_classes > 0:
            for i in range(start, end):
                payload[node, y_cls[idx[i]]] += 1.0
            parent = 0.0
            observed = 0
            for c in range(n_classes):
                parent += payload[node, c] * payload[node, c]
                if payload[node, c] > 0.0:
                    observed += 1
            parent /= m
            pure = observed <= 1
        else:
            total = 0.0
            total_sq = 0.0
            for i in range(start, end):
                v = y_reg[idx[i]]
                total += v
                total_sq += v * v
            payload[node, 0] = total / m
            parent = total * total / m
            pure = total_sq - parent <= 0.0

        if depth >= max_depth or m < 2 * min_leaf or pure:
            continue

        for j in range(d):
            feats[j] = j
        for j in range(n_try):
            state, r = _mix64(state)
            pick = j + np.int64(r % np.uint64(d - j))
            feats[j], feats[pick] = feats[pick], feats[j]
            chosen[j] = feats[j]
        chosen.sort()  # ascending evaluation order fixes tie-breaking

        best_gain = 0.0
        best_feat = -1
        best_thr = 0.0
        for jj in range(n_try):
            f = chosen[jj]
            for i in range(m):
                vals[i] = X[idx[start + i], f]
            order = np.argsort(vals[:m], kind="mergesort")
            if n_classes > 0:
                for i in range(m):
                    sorted_c[i] = y_cls[idx[start + order[i]]]
                for c in range(n_classes):
                    cnt_l[c] = 0.0
                for i in range(m - 1):
                    c = sorted_c[i]
                    cnt_l[c] += 1.0
                    if vals[order[i + 1]] > vals[order[i]]:
                        nl = i + 1
                        nr = m - nl
                        if nl < min_leaf or nr < min_leaf:
                            continue
                        score = 0.0
                        for cc in range(n_classes):
                            rest = payload[node, cc] - cnt_l[cc]
                            score += cnt_l[cc] * cnt_l[cc] / nl + rest * rest / nr
                        gain = score - parent
                        if gain > best_gain:
                            best_gain = gain
                            best_feat = f
                            lo = vals[order[i]]
                            hi = vals[order[i + 1]]
                            thr = lo + (hi - lo) / 2.0
                            if thr >= hi:
                                thr = lo
                            best_thr = thr
            else:
                for i in range(m):
                    sorted_y[i] = y_reg[idx[start + order[i]]]
                total = 0.0
                for i in range(m):
                    total += sorted_y[i]
                cum = 0.0
                for i in range(m - 1):
                    cum += sorted_y[i]
                    if vals[order[i + 1]] > vals[order[i]]:
                        nl = i + 1
                        nr = m - nl
                        if nl < min_leaf or nr < min_leaf:
                            continue
                        rest = total - cum
                        score = cum * cum / nl + rest * rest / nr
                        gain = score - parent
                        if gain > best_gain:
                            best_gain = gain
                            best_feat = f
                            lo = vals[order[i]]
                            hi = vals[order[i + 1]]
                            thr = lo + (hi - lo) / 2.0
                            if thr >= hi:
                                thr = lo
                            best_thr = thr

        if best_feat < 0:
            continue

        a = 0
        b = 0
        for i in range(start, end):
            row = idx[i]
            if X[row, best_feat] <= best_thr:
                tmp_l[a] = row
                a += 1
            else:
                tmp_r[b] = row
                b += 1
        for i in range(a):
            idx[start + i] = tmp_l[i]
        for i in range(b):
            idx[start + a + i] = tmp_r[i]

        feature[node] = best_feat
        threshold[node] = best_thr
        left[node] = n_nodes
        right[node] = n_nodes + 1
        stack[top, 0] = n_nodes
        stack[top, 1] = start
        stack[top, 2] = start + a
        stack[top, 3] = depth + 1
        top += 1
        stack[top, 0] = n_nodes + 1
        stack[top, 1] = start + a
        stack[top, 2] = end
        stack[top, 3] = depth + 1
        top += 1
        n_nodes += 2

    return (feature[:n_nodes].copy(), threshold[:n_nodes].copy(),
            left[:n_nodes].copy(), right[:n_nodes].copy(),
            payload[:n_nodes].copy())


@njit(cache=True, nogil=True)
def _apply_tree(X, feature, threshold, left, right):
    n = X.shape[0]
    out = np.empty(n, np.int64)
    for i in range(n):
        node = 0
        while feature[node] >= 0:
            if X[i, feature[node]] <= threshold[node]:
                node = left[node]
            else:
                node = right[node]
        out[i] = node
    return out


@dataclass
class Tree:
    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    payload: np.ndarray


@dataclass
class ForestModel:
    task: str                      # "regression" | "classification"
    target: str
    feature_schema: list[str]
    hyperparams: Hyperparams
    seed: int
    trees: list[Tree] = field(default_factory=list)
    classes: Optional[list[str]] = None  # classification only

    def to_json(self) -> str:
        doc = {
            "format": MODEL_FORMAT,
            "task": self.task,
            "target": self.target,
            "feature_schema": self.feature_schema,
            "classes": self.classes,
            "hyperparams": self.hyperparams.to_dict(),
            "seed": self.seed,
            "trees": [
                {
                    "feature": t.feature.tolist(),
                    "threshold": t.threshold.tolist(),
                    "left": t.left.tolist(),
                    "right": t.right.tolist(),
                    "payload": t.payload.tolist(),
                }
                for t in self.trees
            ],
        }
        return json.dumps(doc, separators=(",", ":"))

    @classmethod
    def from_json(cls, text: str) -> "ForestModel":
        doc = json.loads(text)
        if doc.get("format") != MODEL_FORMAT:
            raise ValueError(f"unknown model format {doc.get('format')!r}")
        trees = [
            Tree(feature=np.array(t["feature"], np.int32),
                 threshold=np.array(t["threshold"], np.float64),
                 left=np.array(t["left"], np.int32),
                 right=np.array(t["right"], np.int32),
                 payload=np.array(t["payload"], np.float64))
            for t in doc["trees"]
        ]
        return cls(task=doc["task"], target=doc["target"],
                   feature_schema=list(doc["feature_schema"]),
                   hyperparams=Hyperparams.from_dict(doc["hyperparams"]),
                   seed=int(doc["seed"]), trees=trees,
                   classes=doc.get("classes"))

    def save(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self.to_json())

    @classmethod
    def load(cls, path) -> "ForestModel":
        with open(path) as fh:
            return cls.from_json(fh.read())


def fit_forest(
    X: np.ndarray,
    y: Sequence,
    feature_schema: Sequence[str],
    task: str,
    target: str,
    hyperparams: Hyperparams = Hyperparams(),
    seed: int = 0,
    classes: Optional[Sequence[str]] = None,
    n_jobs: int = 1,
) -> ForestModel:
    """Bootstrap-aggregated CART. Parallel (n_jobs > 1) and serial training
    produce identical forests: every tree's randomness derives from
    (seed, tree index) alone."""
    X = np.ascontiguousarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] < 2:
        raise EmptyTrainSet(f"need >= 2 samples, got shape {X.shape}")
    if X.shape[1] != len(feature_schema):
        raise SchemaMismatch(
            f"X has {X.shape[1]} columns, schema names {len(feature_schema)}")
    if task not in ("regression", "classification"):
        raise ValueError(f"task must be regression or classification, got {task!r}")
    n, d = X.shape

    if task == "classification":
        if classes is None:
            rating_values = [r.value for r in RATING_ORDER]
            if set(y) <= set(rating_values):
                classes = rating_values  # canonical quality-class order
            else:
                classes = sorted(set(y))
        classes = list(classes)
        class_index = {c: i for i, c in enumerate(classes)}
        unknown = set(y) - set(classes)
        if unknown:
            raise ValueError(f"labels outside class vocabulary: {sorted(unknown)}")
        y_cls = np.array([class_index[v] for v in y], dtype=np.int64)
        y_reg = np.zeros(1, dtype=np.float64)
        n_classes = len(classes)
        if n_classes > 64:
            raise ValueError("more than 64 classes unsupported")
    else:
        y_reg = np.asarray(y, dtype=np.float64)
        if y_reg.shape[0] != n:
            raise SchemaMismatch("label count does not match sample count")
        if not np.all(np.isfinite(y_reg)):
            raise ValueError("regression labels must be finite")
        y_cls = np.zeros(1, dtype=np.int64)
        n_classes = 0
        classes = None

    hp = hyperparams
    if hp.n_trees < 1:
        raise ValueError(f"n_trees must be >= 1, got {hp.n_trees}")
    if hp.min_samples_leaf < 1:
        raise ValueError(f"min_samples_leaf must be >= 1, got {hp.min_samples_leaf}")
    n_try = hp.resolve_features_per_split(d, task)
    depth_cap = hp.max_depth if hp.max_depth is not None else _NO_DEPTH_LIMIT

    def build(tree_idx: int) -> Tree:
        child = np.random.SeedSequence(entropy=seed, spawn_key=(tree_idx,))
        boot_rng = np.random.default_rng(child)
        boot_idx = boot_rng.integers(0, n, size=n, dtype=np.int64)
        node_seed = child.generate_state(1, dtype=np.uint64)[0]
        arrays = _grow_tree(X, y_reg, y_cls, n_classes, boot_idx,
                            depth_cap, hp.min_samples_leaf, n_try, node_seed)
        return Tree(*arrays)

    if n_jobs > 1:
        with ThreadPoolExecutor(max_workers=n_jobs) as pool:
            trees = list(pool.map(build, range(hp.n_trees)))
    else:
        trees = [build(t) for t in range(hp.n_trees)]

    return ForestModel(task=task, target=target,
                       feature_schema=list(feature_schema),
                       hyperparams=hp, seed=seed, trees=trees,
                       classes=classes)


def predict(model: ForestModel, X: np.ndarray,
            columns: Optional[Sequence[str]] = None):
    """Regression: exact tree-order-invariant mean of leaf values.
    Classification: majority vote, ties to the earliest class in the
    model's class order."""
    if columns is not None and list(columns) != model.feature_schema:
        missing = [c for c in model.feature_schema if c not in set(columns)]
        raise SchemaMismatch(f"feature columns do not match model schema; "
                             f"missing {missing or 'none'}, got {list(columns)}")
    X = np.ascontiguousarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != len(model.feature_schema):
        raise SchemaMismatch(
            f"X has shape {X.shape}, model expects {len(model.feature_schema)} columns")
    n = X.shape[0]
    if n == 0:
        return np.empty(0) if model.task == "regression" else []

    if model.task == "regression":
        per_tree = np.empty((len(model.trees), n))
        for t, tree in enumerate(model.trees):
            leaves = _apply_tree(X, tree.feature, tree.threshold,
                                 tree.left, tree.right)
            per_tree[t] = tree.payload[leaves, 0]
        # fsum is exactly rounded, so tree order cannot change the result
        return np.array([math.fsum(per_tree[:, i]) for i in range(n)]) / len(model.trees)

    votes = np.zeros((n, len(model.classes)), dtype=np.int64)
    for tree in model.trees:
        leaves = _apply_tree(X, tree.feature, tree.threshold,
                             tree.left, tree.right)
        votes[np.arange(n), np.argmax(tree.payload[leaves], axis=1)] += 1
    return [model.classes[i] for i in np.argmax(votes, axis=1)]


def stratified_folds(
    sessions: Sequence[SessionMeta], k: int = 5, seed: int = 0
) -> dict[str, int]:
    """Assign whole sessions to k folds, preserving the per-stratum
    (condition kind x level) counts to within one session per fold."""
    by_stratum: dict[tuple, list[str]] = {}
    for s in sessions:
        kind = s.condition_kind.value if s.condition_kind else ""
        by_stratum.setdefault((kind, s.condition_level or ""), []).append(s.session_id)
    rng = np.random.default_rng(seed)
    assignment: dict[str, int] = {}
    offset = 0
    for stratum in sorted(by_stratum):
        ids = sorted(by_stratum[stratum])
        perm = rng.permutation(len(ids))
        for j, p in enumerate(perm):
            assignment[ids[p]] = (offset + j) % k
        offset += len(ids)  # rotate so remainders spread across folds
    return assignment


@dataclass
class GridResult:
    hyperparams: Hyperparams
    fold_scores: list[float]
    mean_score: float
    error: Optional[str] = None


def grid_search(
    X: np.ndarray,
    y: Sequence,
    session_ids: Sequence[str],
    folds: dict[str, int],
    feature_schema: Sequence[str],
    task: str,
    target: str,
    grid: Sequence[Hyperparams] = DEFAULT_GRID,
    seed: int = 0,
    n_jobs: int = 1,
) -> tuple[Hyperparams, list[GridResult]]:
    """Cross-validated grid search: MAE (regression, minimized) or accuracy
    (classification, maximized) averaged over folds. Ties prefer fewer trees,
    then shallower depth. A grid point that fails to train is recorded and
    skipped."""
    if not grid:
        raise ValueError("grid must be non-empty")
    fold_ids = sorted(set(folds.values()))
    fold_of = np.array([folds[s] for s in session_ids])
    y_arr = np.asarray(y)

    results: list[GridResult] = []
    for hp in grid:
        scores = []
        try:
            for f in fold_ids:
                test_mask = fold_of == f
                if not test_mask.any() or test_mask.all():
                    continue
                model = fit_forest(X[~test_mask], y_arr[~test_mask],
                                   feature_schema, task, target, hp,
                                   seed=seed, n_jobs=n_jobs)
                pred = predict(model, X[test_mask])
                truth = y_arr[test_mask]
                if task == "regression":
                    scores.append(float(np.mean(np.abs(pred - truth.astype(float)))))
                else:
                    scores.append(float(np.mean([p == t for p, t in zip(pred, truth)])))
            mean_score = float(np.mean(scores))
            results.append(GridResult(hp, scores, mean_score))
        except Exception as exc:  # record the failing point, keep searching
            results.append(GridResult(hp, scores, math.nan, error=repr(exc)))

    ok = [r for r in results if r.error is None and not math.isnan(r.mean_score)]
    if not ok:
        raise RuntimeError("every grid point failed to train")

    def tie_key(r: GridResult):
        depth = r.hyperparams.max_depth
        depth_rank = depth if depth is not None else _NO_DEPTH_LIMIT
        primary = r.mean_score if task == "regression" else -r.mean_score
        return (primary, r.hyperparams.n_trees, depth_rank,
                r.hyperparams.min_samples_leaf)

    best = min(ok, key=tie_key)
    return best.hyperparams, results
