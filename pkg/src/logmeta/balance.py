"""SMOTE oversampling of the minority class in selected-feature space.

Synthetic samples interpolate between a minority point and one of its k
nearest minority neighbours: s = x_i + lam * (x_nn - x_i) with lam ~ U[0, 1).
Every random pick (seed point, neighbour, lam) flows from one seeded
generator, so a given (X, y, seed) triple always yields the same output.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

log = logging.getLogger(__name__)

SMOTE_K_DEFAULT = 5


@dataclass
class BalanceReport:
    n_majority: int
    n_minority_before: int
    n_synthetic: int
    minority_label: int
    k_used: int


def smote(X_min: np.ndarray, n_synthetic: int, k: int = SMOTE_K_DEFAULT,
          seed: int = 0) -> np.ndarray:
    """Generate n_synthetic interpolated rows from the minority matrix X_min.

    Args:
        X_min: (m, d) minority-class rows; m must be >= 2.
        n_synthetic: number of rows to generate (>= 0).
        k: neighbourhood size; effective k is min(k, m - 1).
        seed: RNG seed controlling every seed-point / neighbour / lambda pick.

    Returns:
        (n_synthetic, d) array of synthetic rows.
    """
    X_min = np.asarray(X_min, dtype=float)
    if X_min.ndim != 2:
        raise ValueError("X_min must be 2-D")
    m, d = X_min.shape
    if m < 2:
        raise ValueError(
            f"SMOTE needs at least 2 minority samples, got {m}; "
            "collect more minority data or skip balancing")
    if n_synthetic < 0:
        raise ValueError("n_synthetic must be >= 0")
    if k < 1:
        raise ValueError("k must be >= 1")
    k_eff = min(k, m - 1)

    # pairwise distances; each row's nearest neighbours excluding itself
    diffs = X_min[:, None, :] - X_min[None, :, :]
    dist = np.sqrt((diffs * diffs).sum(axis=2))
    np.fill_diagonal(dist, np.inf)
    nn = np.argsort(dist, axis=1, kind="stable")[:, :k_eff]

    rng = np.random.default_rng(seed)
    out = np.empty((n_synthetic, d))
    for s in range(n_synthetic):
        i = int(rng.integers(0, m))
        j = int(nn[i, int(rng.integers(0, k_eff))])
        lam = float(rng.uniform())
        out[s] = X_min[i] + lam * (X_min[j] - X_min[i])
    return out


def balance_training_set(X: np.ndarray, y: np.ndarray, k: int = SMOTE_K_DEFAULT,
                         seed: int = 0) -> tuple[np.ndarray, np.ndarray, BalanceReport]:
    """Oversample the minority class to exact parity with the majority.

    Original rows are preserved verbatim (and first, in input order);
    synthetic rows are appended with the minority label.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=int)
    if X.shape[0] != y.shape[0]:
        raise ValueError("X and y disagree on row count")
    classes, counts = np.unique(y, return_counts=True)
    if classes.size != 2:
        raise ValueError(f"expected exactly 2 classes, got {classes.size}")
    minority_label = int(classes[np.argmin(counts)])
    n_min = int(counts.min())
    n_maj = int(counts.max())
    n_need = n_maj - n_min
    if n_need == 0:
        report = BalanceReport(n_maj, n_min, 0, minority_label, 0)
        return X.copy(), y.copy(), report
    if n_min < 2:
        raise ValueError(
            f"minority class has {n_min} sample(s); SMOTE needs >= 2. "
            "Provide more minority data or skip balancing")

    X_min = X[y == minority_label]
    synth = smote(X_min, n_need, k=k, seed=seed)
    X_out = np.vstack([X, synth])
    y_out = np.concatenate([y, np.full(n_need, minority_label, dtype=int)])
    report = BalanceReport(
        n_majority=n_maj,
        n_minority_before=n_min,
        n_synthetic=n_need,
        minority_label=minority_label,
        k_used=min(k, n_min - 1),
    )
    return X_out, y_out, report
