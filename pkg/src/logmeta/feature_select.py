"""Feature scoring (mutual information + forest importance) and top-K selection.

MI uses quantile binning and the plug-in estimator in nats. Forest importances
come from a seeded random forest (bootstrap rows, sqrt(d) candidate features,
Gini impurity decrease). The two scores are fused by rank sum, which sidesteps
their incommensurable scales.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass

import numpy as np
from sklearn.ensemble import RandomForestClassifier

log = logging.getLogger(__name__)

K_DEFAULT = 200
MI_BINS = 10
FOREST_TREES = 50
FOREST_DEPTH = 8


@dataclass
class FeatureScores:
    mi: np.ndarray
    forest: np.ndarray
    fused_rank: np.ndarray


@dataclass
class SelectionMask:
    indices: np.ndarray  # K distinct ascending indices
    k: int

    def apply(self, X: np.ndarray) -> np.ndarray:
        return X[:, self.indices]


def _quantile_buckets(x: np.ndarray, bins: int) -> np.ndarray:
    edges = np.unique(np.quantile(x, np.arange(1, bins) / bins))
    return np.searchsorted(edges, x, side="right")


def mi_scores(X: np.ndarray, y: np.ndarray, bins: int = MI_BINS) -> np.ndarray:
    """MI(X_j; Y) in nats after quantile-binning each feature into <= bins buckets."""
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=int)
    if X.shape[0] < 2:
        raise ValueError("need at least 2 rows")
    classes = np.unique(y)
    if classes.size < 2:
        raise ValueError("mutual information needs both classes present")
    if bins < 2:
        raise ValueError("bins must be >= 2")
    n, d = X.shape
    p_c = np.bincount(y) / n
    out = np.zeros(d)
    for j in range(d):
        buckets = _quantile_buckets(X[:, j], bins)
        n_b = buckets.max() + 1
        if n_b < 2:
            continue  # constant feature scores exactly 0
        joint = np.zeros((n_b, p_c.size))
        np.add.at(joint, (buckets, y), 1.0)
        joint /= n
        p_b = joint.sum(axis=1)
        mi = 0.0
        for b in range(n_b):
            for c in range(p_c.size):
                if joint[b, c] > 0:
                    mi += joint[b, c] * np.log(joint[b, c] / (p_b[b] * p_c[c]))
        out[j] = max(mi, 0.0)
    return out


def forest_scores(X: np.ndarray, y: np.ndarray, trees: int = FOREST_TREES,
                  max_depth: int = FOREST_DEPTH, seed: int = 0) -> np.ndarray:
    """Gini impurity-decrease importances from a seeded random forest, sum 1.

    Degenerate inputs (every row identical, so no split exists) yield all
    zeros with a warning.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=int)
    if np.unique(y).size < 2:
        raise ValueError("forest scoring needs both classes present")
    if np.all(X == X[0]):
        log.warning("forest_scores: degenerate data (identical rows); importances all 0")
        return np.zeros(X.shape[1])
    forest = RandomForestClassifier(
        n_estimators=trees,
        max_depth=max_depth,
        max_features="sqrt",
        criterion="gini",
        bootstrap=True,
        random_state=seed,
        n_jobs=1,
    )
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        forest.fit(X, y)
    imp = np.asarray(forest.feature_importances_, dtype=float)
    total = imp.sum()
    return imp / total if total > 0 else np.zeros_like(imp)


def _descending_ranks(scores: np.ndarray) -> np.ndarray:
    # rank 0 = best; ties resolve in index order (stable sort)
    order = np.argsort(-scores, kind="stable")
    ranks = np.empty_like(order)
    ranks[order] = np.arange(scores.size)
    return ranks


def select_top_k(mi: np.ndarray, forest: np.ndarray, k: int) -> SelectionMask:
    """Rank-sum fusion of the two score vectors; lower index wins fused ties."""
    mi = np.asarray(mi, dtype=float)
    forest = np.asarray(forest, dtype=float)
    d = mi.size
    if forest.size != d:
        raise ValueError("score vectors disagree on dimension")
    if not 1 <= k <= d:
        raise ValueError(f"k must be in [1, {d}], got {k}")
    fused = _descending_ranks(mi) + _descending_ranks(forest)
    order = np.lexsort((np.arange(d), fused))  # fused rank, then index
    return SelectionMask(indices=np.sort(order[:k]), k=k)


def score_and_select(X: np.ndarray, y: np.ndarray, k: int = K_DEFAULT,
                     bins: int = MI_BINS, trees: int = FOREST_TREES,
                     max_depth: int = FOREST_DEPTH, seed: int = 0
                     ) -> tuple[FeatureScores, SelectionMask]:
    mi = mi_scores(X, y, bins=bins)
    fi = forest_scores(X, y, trees=trees, max_depth=max_depth, seed=seed)
    fused = _descending_ranks(mi) + _descending_ranks(fi)
    mask = select_top_k(mi, fi, k)
    return FeatureScores(mi=mi, forest=fi, fused_rank=fused), mask


def save_selection_mask(mask: SelectionMask, d: int, path) -> None:
    """Text file: header "k=<K> d=<d>", then one index per line."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"k={mask.k} d={d}\n")
        for i in mask.indices:
            fh.write(f"{int(i)}\n")


def load_selection_mask(path) -> tuple[SelectionMask, int]:
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().split()
        k = int(header[0].split("=")[1])
        d = int(header[1].split("=")[1])
        indices = np.array([int(line) for line in fh if line.strip()], dtype=int)
    if indices.size != k or np.unique(indices).size != k:
        raise ValueError(f"selection mask corrupt: {path}")
    return SelectionMask(indices=indices, k=k), d
