"""Leave-one-source-out evaluation: fold orchestration, metrics, reports.

Protocol per fold (target source t):

  1. the meta-training pool is every OTHER source's train partition;
  2. pool labels come from drift-based transfer — each pool source's
     templates are matched against a knowledge base built from the
     remaining pool sources' gold-labeled templates (drifted -> Normal with
     the drift flag set);
  3. the tf-idf embedder (idf table) and the feature-selection mask are
     fitted on the pool only; SMOTE balances each pool source separately;
  4. the meta-learner trains on pool episodes; the target contributes only
     a 5+5 gold-labeled adaptation support from its train partition, and
     its test partition supplies the scored queries;
  5. a no-adaptation baseline classifies the same queries by nearest
     prototype in the selected feature space, from the same support rows.

The per-source 70/30 split and LOSO therefore compose without leakage: no
target record (train or test) ever enters a fold's training pool.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field as dc_field

import numpy as np

from . import __version__
from .balance import balance_training_set
from .config import RunConfig, config_digest, derive_seed
from .embedding import (EmbedderState, FeatureVector, assemble, fit_embedder,
                        load_external_embeddings, semantic_for)
from .feature_select import (SelectionMask, forest_scores, mi_scores,
                             select_top_k)
from .ingest import (ANOMALY, NORMAL, RecordSet, load_corpus, read_manifest,
                     split_train_test, _reindex)
from .label_transfer import (build_knowledge_base, record_label,
                             transfer_labels)
from .meta_learner import (AdaptResult, MetaConfig, SourcePool,
                           adapt_and_predict, meta_train, save_training_curve)
from .neural_core import FocalLossConfig, init_params
from .template_miner import TemplateMiner, structural_features

log = logging.getLogger(__name__)

ENCODER_HIDDEN = (128, 64, 32)


@dataclass
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    tn: int = 0
    fn: int = 0


@dataclass
class FoldResult:
    source_id: str
    precision: float = 0.0
    recall: float = 0.0
    f1: float = 0.0
    support_warning: bool = False
    baseline_precision: float = 0.0
    baseline_recall: float = 0.0
    baseline_f1: float = 0.0
    n_queries: int = 0
    failed: bool = False
    error: str = ""
    # audit payload (not serialized to CSV)
    pool_record_ids: set = dc_field(default_factory=set, repr=False)
    target_test_ids: set = dc_field(default_factory=set, repr=False)
    predictions: np.ndarray | None = dc_field(default=None, repr=False)
    golds: np.ndarray | None = dc_field(default=None, repr=False)


@dataclass
class LosoReport:
    per_source: list[FoldResult]
    mean_f1: float
    std_f1: float
    baseline_mean_f1: float
    baseline_std_f1: float
    config_digest: str
    seed: int
    warnings: list[str] = dc_field(default_factory=list)

    @property
    def any_failed(self) -> bool:
        return any(r.failed for r in self.per_source)


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

def confusion(preds, golds) -> ConfusionCounts:
    """Standard confusion counts with Anomaly (1) as the positive class."""
    preds = np.asarray(preds, dtype=int)
    golds = np.asarray(golds, dtype=int)
    if preds.shape != golds.shape or preds.size == 0:
        raise ValueError("predictions and golds must be equal-length, non-empty")
    return ConfusionCounts(
        tp=int(np.sum((preds == 1) & (golds == 1))),
        fp=int(np.sum((preds == 1) & (golds == 0))),
        tn=int(np.sum((preds == 0) & (golds == 0))),
        fn=int(np.sum((preds == 0) & (golds == 1))))


def f1(c: ConfusionCounts) -> tuple[float, float, float]:
    """(precision, recall, F1) with the usual 0 conventions on empty denominators."""
    precision = c.tp / (c.tp + c.fp) if c.tp + c.fp else 0.0
    recall = c.tp / (c.tp + c.fn) if c.tp + c.fn else 0.0
    score = (2 * precision * recall / (precision + recall)
             if precision + recall else 0.0)
    return precision, recall, score


# ---------------------------------------------------------------------------
# shared pipeline pieces (also used by the CLI stage commands)
# ---------------------------------------------------------------------------

def mine_corpus(rs: RecordSet) -> tuple[dict[str, TemplateMiner], dict[int, int]]:
    """Mine templates per source over the full record set (unsupervised).

    Returns ({source_id: frozen miner}, {record_id: template_id}).
    """
    miners: dict[str, TemplateMiner] = {}
    assignment: dict[int, int] = {}
    for ordinal, sid in enumerate(rs.source_ids):
        miner = TemplateMiner(sid, ordinal)
        for rec in rs.by_source(sid):
            tid, _ = miner.parse(rec.message)
            assignment[rec.record_id] = tid
        miner.freeze()
        miners[sid] = miner
    return miners, assignment


def gold_template_labels(train: RecordSet, sid: str,
                         assignment: dict[int, int]) -> dict[int, int]:
    """Majority gold label per template over one source's train records."""
    counts: dict[int, list[int]] = {}
    for rec in train.by_source(sid):
        if rec.gold_label is None:
            continue
        pair = counts.setdefault(assignment[rec.record_id], [0, 0])
        pair[rec.gold_label] += 1
    return {tid: int(pair[ANOMALY] > pair[NORMAL]) for tid, pair in counts.items()}


def transfer_pool_labels(train: RecordSet, pool_sids: list[str],
                         miners: dict[str, TemplateMiner],
                         assignment: dict[int, int],
                         template_golds: dict[str, dict[int, int]],
                         embedder: EmbedderState,
                         tau: float) -> dict[int, tuple[int, bool]]:
    """Label every pool train record by leave-one-source-out transfer.

    Source s's templates are matched against a knowledge base built from
    the other pool sources' gold-labeled templates. Returns
    {record_id: (label, drift_flag)}.
    """
    out: dict[int, tuple[int, bool]] = {}
    for sid in pool_sids:
        kb_templates = []
        for other in pool_sids:
            if other == sid:
                continue
            for tid, lab in sorted(template_golds[other].items()):
                kb_templates.append((miners[other].templates[tid], lab))
        kb = build_knowledge_base(kb_templates, embedder)
        cand_tids = sorted({assignment[r.record_id]
                            for r in train.by_source(sid)})
        candidates = [miners[sid].templates[tid] for tid in cand_tids]
        results = transfer_labels(candidates, kb, tau=tau, embedder=embedder)
        per_tid = {res.template_id: record_label(res) for res in results}
        for rec in train.by_source(sid):
            out[rec.record_id] = per_tid[assignment[rec.record_id]]
    return out


def featurize_records(records, miners: dict[str, TemplateMiner],
                      assignment: dict[int, int], embedder: EmbedderState,
                      labels: dict[int, tuple[int, bool]] | None = None,
                      external: dict[int, np.ndarray] | None = None
                      ) -> list[FeatureVector]:
    """Assemble semantic+structural features for the given records.

    labels maps record_id -> (label, drift_flag); records absent from it
    fall back to their gold label (or Normal when unlabeled).
    """
    out = []
    for rec in records:
        sem, _ = semantic_for(rec.message, embedder, external)
        miner = miners[rec.source_id]
        template = miner.templates[assignment[rec.record_id]]
        struct = structural_features(rec.message, template, miner)
        if labels is not None and rec.record_id in labels:
            label, drift = labels[rec.record_id]
        else:
            label = rec.gold_label if rec.gold_label is not None else NORMAL
            drift = False
        out.append(assemble(rec, sem, struct, label, drift))
    return out


def stack_features(fvs: list[FeatureVector]
                   ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(X, y, drift) arrays from a feature-vector list."""
    X = np.vstack([fv.values for fv in fvs])
    y = np.array([fv.label for fv in fvs], dtype=int)
    drift = np.array([fv.drift_flag for fv in fvs], dtype=bool)
    return X, y, drift


def _build_source_pools(pool_sids, fold_feats, mask, cfg, fold_sid,
                        warnings) -> list[SourcePool]:
    pools = []
    for sid in pool_sids:
        fvs = [fv for fv in fold_feats if fv.source_id == sid]
        X, y, drift = stack_features(fvs)
        X = mask.apply(X)
        classes, counts = np.unique(y, return_counts=True)
        if classes.size == 2 and counts.min() >= 2:
            seed = derive_seed(cfg.seed, "smote", fold_sid, sid)
            Xb, yb, report = balance_training_set(X, y, k=cfg.smote_k, seed=seed)
            n_synth = report.n_synthetic
        else:
            Xb, yb, n_synth = X, y, 0
            warnings.append(
                f"fold {fold_sid}: source {sid} not balanced "
                f"(class counts {dict(zip(classes.tolist(), counts.tolist()))})")
        synthetic = np.zeros(Xb.shape[0], dtype=bool)
        synthetic[X.shape[0]:] = True
        drift_b = np.concatenate([drift, np.zeros(n_synth, dtype=bool)])
        pools.append(SourcePool(sid, Xb, yb, synthetic, drift_b))
    return pools


def _pick_support(train, sid, rng) -> tuple[list, bool]:
    """5 gold anomalies + 5 gold normals from the target's train partition."""
    recs = train.by_source(sid)
    anomalies = [r for r in recs if r.gold_label == ANOMALY]
    normals = [r for r in recs if r.gold_label == NORMAL]
    if not anomalies or not normals:
        raise ValueError(f"target {sid}: train partition lacks a class "
                         f"({len(anomalies)} anomalies, {len(normals)} normals)")
    warning = len(anomalies) < 5
    take_a = min(5, len(anomalies))
    take_n = min(5, len(normals))
    pick_a = [anomalies[i] for i in rng.permutation(len(anomalies))[:take_a]]
    pick_n = [normals[i] for i in rng.permutation(len(normals))[:take_n]]
    return pick_a + pick_n, warning


def _baseline_predict(support_X: np.ndarray, support_y: np.ndarray,
                      query_X: np.ndarray) -> np.ndarray:
    """Nearest-prototype in the selected feature space, no adaptation."""
    mu0 = support_X[support_y == NORMAL].mean(axis=0)
    mu1 = support_X[support_y == ANOMALY].mean(axis=0)
    d0 = ((query_X - mu0) ** 2).sum(axis=1)
    d1 = ((query_X - mu1) ** 2).sum(axis=1)
    return (d1 < d0).astype(int)


# ---------------------------------------------------------------------------
# LOSO driver
# ---------------------------------------------------------------------------

def run_loso(manifest_path, cfg: RunConfig, curve_dir=None) -> LosoReport:
    """Run the full leave-one-source-out experiment described above."""
    manifest = read_manifest(manifest_path)
    rs = load_corpus(manifest)
    if len(rs.source_ids) < 2:
        raise ValueError("LOSO needs at least 2 sources")
    train, test = split_train_test(rs, cfg.split_ratio, cfg.seed)
    miners, assignment = mine_corpus(rs)
    template_golds = {sid: gold_template_labels(train, sid, assignment)
                      for sid in rs.source_ids}
    external = (load_external_embeddings(cfg.external_path, cfg.embed_dim)
                if cfg.external_path else None)
    hash_seed = derive_seed(cfg.seed, "embedder")
    focal = FocalLossConfig(gamma=cfg.focal_gamma, alpha=cfg.focal_alpha)
    warnings: list[str] = []
    folds: list[FoldResult] = []

    for target_sid in rs.source_ids:
        result = FoldResult(source_id=target_sid)
        try:
            result = _run_fold(target_sid, rs, train, test, miners, assignment,
                               template_golds, external, hash_seed, focal, cfg,
                               warnings, curve_dir)
        except Exception as exc:  # fold failure: mark, continue
            log.error("fold %s failed: %s", target_sid, exc)
            result.failed = True
            result.error = str(exc)
        folds.append(result)

    scored = [r for r in folds if not r.failed]
    f1s = np.array([r.f1 for r in scored]) if scored else np.zeros(0)
    base = np.array([r.baseline_f1 for r in scored]) if scored else np.zeros(0)
    report = LosoReport(
        per_source=folds,
        mean_f1=float(f1s.mean()) if f1s.size else 0.0,
        std_f1=float(f1s.std()) if f1s.size else 0.0,  # population std
        baseline_mean_f1=float(base.mean()) if base.size else 0.0,
        baseline_std_f1=float(base.std()) if base.size else 0.0,
        config_digest=config_digest(cfg),
        seed=cfg.seed,
        warnings=warnings)
    return report


def _run_fold(target_sid, rs, train, test, miners, assignment, template_golds,
              external, hash_seed, focal, cfg, warnings, curve_dir) -> FoldResult:
    pool_sids = [sid for sid in rs.source_ids if sid != target_sid]
    pool_records = [r for sid in pool_sids for r in train.by_source(sid)]
    pool_rs = _reindex(sorted(pool_records, key=lambda r: r.record_id))

    embedder = fit_embedder(pool_rs, dim=cfg.embed_dim, seed=hash_seed)
    labels = transfer_pool_labels(train, pool_sids, miners, assignment,
                                  template_golds, embedder, cfg.tau)
    fold_feats = featurize_records(pool_records, miners, assignment, embedder,
                                   labels=labels, external=external)
    X_pool, y_pool, _ = stack_features(fold_feats)
    if np.unique(y_pool).size < 2:
        raise ValueError(f"fold {target_sid}: pool labels collapsed to one class")

    mi = mi_scores(X_pool, y_pool)
    fi = forest_scores(X_pool, y_pool,
                       seed=derive_seed(cfg.seed, "forest", target_sid) % (2**32))
    mask = select_top_k(mi, fi, cfg.k)

    pools = _build_source_pools(pool_sids, fold_feats, mask, cfg,
                                target_sid, warnings)
    meta_cfg = MetaConfig(
        inner_steps=cfg.inner_steps, inner_lr=cfg.inner_lr,
        outer_lr=cfg.outer_lr, meta_batch=cfg.meta_batch,
        episodes_per_phase=cfg.episodes_per_phase,
        seed=derive_seed(cfg.seed, "meta", target_sid))
    theta0 = init_params([cfg.k, *ENCODER_HIDDEN],
                         seed=derive_seed(cfg.seed, "init", target_sid))
    theta, curve = meta_train(pools, meta_cfg, theta0, focal)
    if curve_dir is not None:
        from pathlib import Path
        Path(curve_dir).mkdir(parents=True, exist_ok=True)
        save_training_curve(curve, Path(curve_dir) / f"curve_{target_sid}.csv")

    rng = np.random.default_rng(derive_seed(cfg.seed, "support", target_sid))
    support_recs, support_warning = _pick_support(train, target_sid, rng)
    support_feats = featurize_records(support_recs, miners, assignment,
                                      embedder, labels=None, external=external)
    support_X, support_y, _ = stack_features(support_feats)
    support_X = mask.apply(support_X)

    query_recs = test.by_source(target_sid)
    if not query_recs:
        raise ValueError(f"fold {target_sid}: empty test partition")
    query_feats = featurize_records(query_recs, miners, assignment, embedder,
                                    labels=None, external=external)
    query_X, golds, _ = stack_features(query_feats)
    query_X = mask.apply(query_X)

    adapt: AdaptResult = adapt_and_predict(theta, support_X, support_y,
                                           query_X, meta_cfg, focal)
    p, r, score = f1(confusion(adapt.predictions, golds))
    base_preds = _baseline_predict(support_X, support_y, query_X)
    bp, br, bscore = f1(confusion(base_preds, golds))

    if adapt.support_warning or support_warning:
        warnings.append(f"fold {target_sid}: adaptation support below 5 minority")

    return FoldResult(
        source_id=target_sid,
        precision=p, recall=r, f1=score,
        support_warning=bool(adapt.support_warning or support_warning),
        baseline_precision=bp, baseline_recall=br, baseline_f1=bscore,
        n_queries=len(query_recs),
        pool_record_ids={rec.record_id for rec in pool_records},
        target_test_ids={rec.record_id for rec in query_recs},
        predictions=adapt.predictions,
        golds=golds)


# ---------------------------------------------------------------------------
# report output
# ---------------------------------------------------------------------------

def format_report_table(report: LosoReport) -> str:
    """Human-readable per-source table plus the mean +/- std summary."""
    lines = [f"{'source':<16} {'precision':>9} {'recall':>9} {'f1':>9} "
             f"{'baseline_f1':>11}  notes"]
    for row in report.per_source:
        if row.failed:
            lines.append(f"{row.source_id:<16} {'-':>9} {'-':>9} {'-':>9} "
                         f"{'-':>11}  FAILED: {row.error}")
            continue
        note = "support<5" if row.support_warning else ""
        lines.append(f"{row.source_id:<16} {row.precision:>9.4f} "
                     f"{row.recall:>9.4f} {row.f1:>9.4f} "
                     f"{row.baseline_f1:>11.4f}  {note}")
    lines.append(f"mean F1 {report.mean_f1:.4f} +/- {report.std_f1:.4f} "
                 f"(baseline {report.baseline_mean_f1:.4f} +/- "
                 f"{report.baseline_std_f1:.4f})")
    return "\n".join(lines)


def write_report_csv(report: LosoReport, path) -> None:
    """Machine-readable rows, then one summary row; floats at full precision."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("source_id,precision,recall,f1,support_warning,"
                 "baseline_precision,baseline_recall,baseline_f1,"
                 "n_queries,failed\n")
        for r in report.per_source:
            fh.write(f"{r.source_id},{r.precision:.17g},{r.recall:.17g},"
                     f"{r.f1:.17g},{int(r.support_warning)},"
                     f"{r.baseline_precision:.17g},{r.baseline_recall:.17g},"
                     f"{r.baseline_f1:.17g},{r.n_queries},{int(r.failed)}\n")
        fh.write(f"SUMMARY,{report.mean_f1:.17g},,{report.std_f1:.17g},,"
                 f"{report.baseline_mean_f1:.17g},,"
                 f"{report.baseline_std_f1:.17g},,0\n")


def write_run_metadata(report: LosoReport, cfg: RunConfig, path) -> None:
    """Full run metadata: config echo, digest, seeds, versions, warnings.

    Deliberately timestamp-free so repeated runs are byte-identical.
    """
    meta = {
        "config": cfg.echo(),
        "config_digest": report.config_digest,
        "seed": report.seed,
        "versions": {"logmeta": __version__, "numpy": np.__version__},
        "warnings": sorted(set(report.warnings)),
        "failed_folds": [r.source_id for r in report.per_source if r.failed],
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")
