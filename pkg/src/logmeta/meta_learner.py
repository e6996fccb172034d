"""Episodic meta-learning: prototypical networks trained with first-order MAML.

Episodes follow a 3-phase curriculum of increasing difficulty:

  phase 1 — single source, balanced query (15+15, capped by availability);
  phase 2 — single source, query at the source's natural imbalance (<= 50);
  phase 3 — support from one source, query from a different source (<= 50).

Support sets are always 5 minority + 5 majority (drift-flagged points never
enter a support set; synthetic SMOTE points never enter a query set). Inner
adaptation runs SGD on the leave-one-out prototypical focal loss over the
support; the outer loop applies Adam to the mean query-loss gradient taken
at the adapted parameters (first-order MAML).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .neural_core import (EncoderParams, FocalLossConfig, Gradients,
                          adam_step, backward, embed_batch, init_adam,
                          make_loo_proto_focal_head, make_proto_focal_head,
                          sgd_step, zeros_like_grads)

log = logging.getLogger(__name__)

SUPPORT_MINORITY = 5
SUPPORT_MAJORITY = 5
PHASE1_QUERY_PER_CLASS = 15
QUERY_CAP = 50


@dataclass
class SourcePool:
    """One source's labeled feature rows, ready for episode sampling."""
    source_id: str
    X: np.ndarray           # (n, K) selected (and possibly SMOTE-balanced) rows
    y: np.ndarray           # (n,) labels, 0/1
    synthetic: np.ndarray   # (n,) True for SMOTE rows (never valid in queries)
    drift: np.ndarray       # (n,) True for drift-flagged rows (never in support)

    def __post_init__(self) -> None:
        n = self.X.shape[0]
        if not (self.y.shape == (n,) and self.synthetic.shape == (n,)
                and self.drift.shape == (n,)):
            raise ValueError(f"source {self.source_id}: column length mismatch")


@dataclass
class Episode:
    support_X: np.ndarray
    support_y: np.ndarray
    query_X: np.ndarray
    query_y: np.ndarray
    source_ids: set
    phase: int

    def __post_init__(self) -> None:
        if self.query_y.size == 0:
            raise ValueError("episode query must be non-empty")
        if np.unique(self.support_y).size < 2:
            raise ValueError("episode support must contain both classes")


@dataclass
class Prototypes:
    mu: np.ndarray  # (n_classes, e), row c = mean of class-c support embeddings


@dataclass
class MetaConfig:
    inner_steps: int = 5
    inner_lr: float = 0.01
    outer_lr: float = 1e-3
    meta_batch: int = 4
    episodes_per_phase: tuple = (120, 120, 160)
    seed: int = 0

    def __post_init__(self) -> None:
        if (self.inner_steps < 0 or self.inner_lr <= 0 or self.outer_lr <= 0
                or self.meta_batch < 1 or len(self.episodes_per_phase) != 3
                or any(e < 1 for e in self.episodes_per_phase)):
            raise ValueError("MetaConfig fields must be positive")


@dataclass
class CurvePoint:
    iteration: int
    phase: int
    mean_query_loss: float
    mean_query_f1: float


@dataclass
class AdaptResult:
    predictions: np.ndarray    # (nq,) 0/1
    probabilities: np.ndarray  # (nq,) p(anomaly)
    support_warning: bool = False


# ---------------------------------------------------------------------------
# episode sampling
# ---------------------------------------------------------------------------

def _minority_label(src: SourcePool) -> int:
    """Class with fewer REAL rows (synthetic rows don't count); ties -> 1."""
    real = ~src.synthetic
    n0 = int(np.sum(real & (src.y == 0)))
    n1 = int(np.sum(real & (src.y == 1)))
    return 1 if n1 <= n0 else 0


def _natural_query_counts(real_min: int, real_maj: int, cap: int = QUERY_CAP
                          ) -> tuple[int, int]:
    """Proportional (minority, majority) query counts under a total cap."""
    n_real = real_min + real_maj
    n_q = min(cap, n_real)
    if real_min == 0:
        return 0, n_q
    if real_maj == 0:
        return n_q, 0
    q_min = int(round(n_q * real_min / n_real))
    q_min = max(q_min, 1, n_q - real_maj)
    q_min = min(q_min, real_min, n_q - 1)
    return q_min, n_q - q_min


def _support_eligible(src: SourcePool, minority: int) -> bool:
    ok = ~src.drift
    return (int(np.sum(ok & (src.y == minority))) >= SUPPORT_MINORITY
            and int(np.sum(ok & (src.y != minority))) >= SUPPORT_MAJORITY)


def _pick(rng: np.random.Generator, indices: np.ndarray, k: int) -> np.ndarray:
    return rng.permutation(indices)[:k]


def sample_episode(pool: list[SourcePool], phase: int, cfg: MetaConfig,
                   seed) -> Episode:
    """Draw one episode for the given curriculum phase, deterministic in seed."""
    rng = np.random.default_rng(seed)
    return _sample_episode_rng(pool, phase, cfg, rng)


def _sample_episode_rng(pool: list[SourcePool], phase: int, cfg: MetaConfig,
                        rng: np.random.Generator) -> Episode:
    if phase not in (1, 2, 3):
        raise ValueError(f"phase must be 1, 2, or 3, got {phase}")
    if not pool:
        raise ValueError("empty source pool")
    if phase == 3 and len(pool) < 2:
        raise ValueError("phase 3 episodes need at least 2 sources")

    eligible = [s for s in pool if _support_eligible(s, _minority_label(s))]
    if not eligible:
        raise ValueError(
            f"no source has >= {SUPPORT_MINORITY} non-drift minority and "
            f">= {SUPPORT_MAJORITY} non-drift majority rows")
    src = eligible[int(rng.integers(0, len(eligible)))]
    minority = _minority_label(src)
    real = ~src.synthetic

    if phase in (1, 2):
        real_min_idx = np.where(real & (src.y == minority))[0]
        real_maj_idx = np.where(real & (src.y != minority))[0]
        if phase == 1:
            q_per = min(PHASE1_QUERY_PER_CLASS, real_min_idx.size, real_maj_idx.size)
            if q_per < 1:
                raise ValueError(
                    f"source {src.source_id}: phase 1 needs >= 1 real row per class")
            q_min_idx = _pick(rng, real_min_idx, q_per)
            q_maj_idx = _pick(rng, real_maj_idx, q_per)
        else:
            q_min_n, q_maj_n = _natural_query_counts(real_min_idx.size,
                                                     real_maj_idx.size)
            q_min_idx = _pick(rng, real_min_idx, q_min_n)
            q_maj_idx = _pick(rng, real_maj_idx, q_maj_n)
        query_idx = np.concatenate([q_min_idx, q_maj_idx])
        support_src, query_src = src, src
    else:
        others = [s for s in pool if s.source_id != src.source_id
                  and np.sum(~s.synthetic) > 0]
        if not others:
            raise ValueError("phase 3: no other source with real rows")
        query_src = others[int(rng.integers(0, len(others)))]
        q_real = ~query_src.synthetic
        q_minority = _minority_label(query_src)
        q_min_pool = np.where(q_real & (query_src.y == q_minority))[0]
        q_maj_pool = np.where(q_real & (query_src.y != q_minority))[0]
        q_min_n, q_maj_n = _natural_query_counts(q_min_pool.size, q_maj_pool.size)
        query_idx = np.concatenate([_pick(rng, q_min_pool, q_min_n),
                                    _pick(rng, q_maj_pool, q_maj_n)])
        support_src = src

    # support: non-drift rows, disjoint from any same-source query rows
    taken = np.zeros(support_src.X.shape[0], dtype=bool)
    if support_src is query_src:
        taken[query_idx] = True
    ok = ~support_src.drift & ~taken
    s_min_pool = np.where(ok & (support_src.y == minority))[0]
    s_maj_pool = np.where(ok & (support_src.y != minority))[0]
    if s_min_pool.size < SUPPORT_MINORITY or s_maj_pool.size < SUPPORT_MAJORITY:
        raise ValueError(
            f"source {support_src.source_id}: insufficient support rows after "
            f"query removal ({s_min_pool.size} minority, {s_maj_pool.size} majority)")
    s_min_idx = _pick(rng, s_min_pool, SUPPORT_MINORITY)
    s_maj_idx = _pick(rng, s_maj_pool, SUPPORT_MAJORITY)
    support_idx = np.concatenate([s_min_idx, s_maj_idx])

    sources = {support_src.source_id, query_src.source_id}
    return Episode(
        support_X=support_src.X[support_idx].copy(),
        support_y=support_src.y[support_idx].astype(int).copy(),
        query_X=query_src.X[query_idx].copy(),
        query_y=query_src.y[query_idx].astype(int).copy(),
        source_ids=sources,
        phase=phase)


# ---------------------------------------------------------------------------
# prototypes and probabilities
# ---------------------------------------------------------------------------

def compute_prototypes(embeddings: np.ndarray, labels: np.ndarray,
                       n_classes: int = 2) -> Prototypes:
    """Per-class arithmetic means of the support embeddings."""
    E = np.asarray(embeddings, dtype=float)
    y = np.asarray(labels, dtype=int)
    mu = np.zeros((n_classes, E.shape[1]))
    for c in range(n_classes):
        members = E[y == c]
        if members.shape[0] == 0:
            raise ValueError(f"class {c} absent from support")
        mu[c] = members.mean(axis=0)
    return Prototypes(mu=mu)


def proto_probabilities(query_embedding: np.ndarray, protos: Prototypes
                        ) -> np.ndarray:
    """p(c|x) = softmax over classes of -||x - mu_c||^2."""
    x = np.asarray(query_embedding, dtype=float)
    diff = protos.mu - x[None, :]
    z = -(diff * diff).sum(axis=1)
    z -= z.max()
    e = np.exp(z)
    return e / e.sum()


def _proto_probs_batch(Q: np.ndarray, protos: Prototypes) -> np.ndarray:
    diff = Q[:, None, :] - protos.mu[None, :, :]
    z = -(diff * diff).sum(axis=2)
    z -= z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


# ---------------------------------------------------------------------------
# adaptation and meta-training
# ---------------------------------------------------------------------------

def inner_adapt(theta: EncoderParams, support_X: np.ndarray,
                support_y: np.ndarray, steps: int, inner_lr: float,
                loss_cfg: FocalLossConfig) -> EncoderParams:
    """`steps` SGD updates of the leave-one-out prototypical focal loss.

    The input parameters are never mutated (value semantics).
    """
    adapted = theta.copy()
    if steps == 0:
        return adapted
    head = make_loo_proto_focal_head(support_y, loss_cfg)
    for _ in range(steps):
        _, g = backward(adapted, support_X, head)
        adapted = sgd_step(adapted, g, inner_lr)
    return adapted


def _query_loss_grad(theta: EncoderParams, ep: Episode,
                     loss_cfg: FocalLossConfig) -> tuple[float, Gradients]:
    """Prototypical focal query loss and its gradient at the given parameters."""
    batch = np.vstack([ep.support_X, ep.query_X])
    head = make_proto_focal_head(ep.support_y.size, ep.support_y, ep.query_y,
                                 loss_cfg)
    return backward(theta, batch, head)


def meta_gradient(theta: EncoderParams, episodes: list[Episode],
                  cfg: MetaConfig, loss_cfg: FocalLossConfig
                  ) -> tuple[float, float, Gradients]:
    """First-order MAML meta-gradient over a batch of episodes.

    Each episode is inner-adapted on its support; the query-loss gradient is
    taken at the ADAPTED parameters; gradients average in episode order.
    Returns (mean query loss, mean query F1, mean gradient).
    """
    total = zeros_like_grads(theta)
    losses, f1s = [], []
    for ep in episodes:
        adapted = inner_adapt(theta, ep.support_X, ep.support_y,
                              cfg.inner_steps, cfg.inner_lr, loss_cfg)
        loss, g = _query_loss_grad(adapted, ep, loss_cfg)
        for acc, part in zip(total.weights + total.biases,
                             g.weights + g.biases):
            acc += part
        losses.append(loss)
        preds = _predict(adapted, ep.support_X, ep.support_y, ep.query_X)
        f1s.append(_binary_f1(preds, ep.query_y))
    k = len(episodes)
    for acc in total.weights + total.biases:
        acc /= k
    return float(np.mean(losses)), float(np.mean(f1s)), total


def meta_train(pool: list[SourcePool], cfg: MetaConfig, theta0: EncoderParams,
               loss_cfg: FocalLossConfig | None = None
               ) -> tuple[EncoderParams, list[CurvePoint]]:
    """Run the 3-phase curriculum; returns meta-trained parameters + curve.

    Deterministic under cfg.seed: episode e of iteration i in phase p is
    sampled from default_rng([cfg.seed, p, i, e]).
    """
    if loss_cfg is None:
        loss_cfg = FocalLossConfig(gamma=2.0, alpha="balanced")
    theta = theta0.copy()
    adam = init_adam(theta)
    curve: list[CurvePoint] = []
    iteration = 0
    for phase_idx, n_episodes in enumerate(cfg.episodes_per_phase):
        phase = phase_idx + 1
        n_iters = -(-n_episodes // cfg.meta_batch)  # ceil division
        for _ in range(n_iters):
            episodes = []
            for task in range(cfg.meta_batch):
                rng = np.random.default_rng([cfg.seed, phase, iteration, task])
                try:
                    episodes.append(_sample_episode_rng(pool, phase, cfg, rng))
                except ValueError as exc:
                    raise RuntimeError(
                        f"episode sampling failed at phase {phase} "
                        f"iteration {iteration}: {exc}") from exc
            loss, f1, g = meta_gradient(theta, episodes, cfg, loss_cfg)
            theta, adam = adam_step(theta, g, adam, cfg.outer_lr)
            curve.append(CurvePoint(iteration, phase, loss, f1))
            iteration += 1
    return theta, curve


def adapt_and_predict(theta: EncoderParams, support_X: np.ndarray,
                      support_y: np.ndarray, query_X: np.ndarray,
                      cfg: MetaConfig, loss_cfg: FocalLossConfig | None = None
                      ) -> AdaptResult:
    """Adapt on the target support, then classify queries at threshold 0.5.

    A support with fewer than SUPPORT_MINORITY minority points is used as-is
    with a warning flag; if any class has < 2 points, leave-one-out
    adaptation is impossible and the meta-trained parameters are used
    unadapted (also flagged).
    """
    if loss_cfg is None:
        loss_cfg = FocalLossConfig(gamma=2.0, alpha="balanced")
    support_y = np.asarray(support_y, dtype=int)
    counts = np.bincount(support_y, minlength=2)
    warning = bool(counts.min() < SUPPORT_MINORITY)
    if counts.min() < 1:
        raise ValueError("target support must contain both classes")
    if warning:
        log.warning("target support has only %d minority point(s); "
                    "expected %d", counts.min(), SUPPORT_MINORITY)
    if counts.min() >= 2:
        adapted = inner_adapt(theta, support_X, support_y, cfg.inner_steps,
                              cfg.inner_lr, loss_cfg)
    else:
        adapted = theta.copy()  # LOO adaptation impossible with a singleton class
    query_X = np.asarray(query_X, dtype=float)
    if query_X.shape[0] == 0:
        return AdaptResult(np.zeros(0, dtype=int), np.zeros(0), warning)
    preds, probs = _predict(adapted, support_X, support_y, query_X,
                            return_probs=True)
    return AdaptResult(preds, probs, warning)


def _predict(theta: EncoderParams, support_X: np.ndarray,
             support_y: np.ndarray, query_X: np.ndarray,
             return_probs: bool = False):
    s_emb = embed_batch(theta, support_X)
    q_emb = embed_batch(theta, query_X)
    protos = compute_prototypes(s_emb, support_y)
    probs = _proto_probs_batch(q_emb, protos)
    preds = (probs[:, 1] >= 0.5).astype(int)
    if return_probs:
        return preds, probs[:, 1]
    return preds


def _binary_f1(preds: np.ndarray, golds: np.ndarray) -> float:
    tp = int(np.sum((preds == 1) & (golds == 1)))
    fp = int(np.sum((preds == 1) & (golds == 0)))
    fn = int(np.sum((preds == 0) & (golds == 1)))
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    return 2 * precision * recall / (precision + recall) if precision + recall else 0.0


def save_training_curve(curve: list[CurvePoint], path) -> None:
    """CSV of (iteration, phase, mean_query_loss, mean_query_f1)."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("iteration,phase,mean_query_loss,mean_query_f1\n")
        for pt in curve:
            fh.write(f"{pt.iteration},{pt.phase},{pt.mean_query_loss:.17g},"
                     f"{pt.mean_query_f1:.17g}\n")
