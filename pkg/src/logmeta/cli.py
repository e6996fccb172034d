"""Command-line pipeline orchestration.

Subcommands mirror the pipeline stages (parse, label, featurize, select,
balance, train, evaluate, predict), plus the end-to-end `loso` harness and
the `synth-corpus` generator. Stages hand off through files so any step can
be inspected or re-run in isolation. Exit codes: 0 success, 1 runtime/data
error (including any failed LOSO fold), 2 usage error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .balance import balance_training_set
from .config import (RunConfig, apply_overrides, config_digest, derive_seed,
                     load_config)
from .embedding import (FeatureVector, assemble, fit_embedder, load_embedder,
                        load_external_embeddings, load_feature_matrix,
                        save_embedder, save_feature_matrix, semantic_for)
from .eval_harness import (confusion, f1, featurize_records,
                           format_report_table, gold_template_labels,
                           mine_corpus, run_loso, stack_features,
                           transfer_pool_labels, write_report_csv,
                           write_run_metadata, _baseline_predict,
                           _build_source_pools, _pick_support, ENCODER_HIDDEN)
from .feature_select import (forest_scores, load_selection_mask, mi_scores,
                             save_selection_mask, select_top_k)
from .ingest import (HEADER_PATTERNS, NORMAL, LogRecord, load_corpus,
                     read_manifest, split_train_test, _read_label_sidecar)
from .label_transfer import (build_knowledge_base, save_transfer_report,
                             transfer_labels)
from .meta_learner import (MetaConfig, adapt_and_predict, meta_train,
                           save_training_curve)
from .neural_core import (FocalLossConfig, init_params, load_checkpoint,
                          save_checkpoint)
from .synth import generate_corpus
from .template_miner import (TemplateMiner, save_template_store,
                             structural_features)

log = logging.getLogger(__name__)


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="config file (INI); LOGMETA_CONFIG names a default")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--split-ratio", type=float, default=None, dest="split_ratio")
    p.add_argument("--dim", type=int, default=None, dest="embed_dim")
    p.add_argument("--external", default=None, dest="external_path",
                   help="external embedding vectors file")
    p.add_argument("--k", type=int, default=None)
    p.add_argument("--tau", type=float, default=None)
    p.add_argument("--smote-k", type=int, default=None, dest="smote_k")
    p.add_argument("--gamma", type=float, default=None, dest="focal_gamma")
    p.add_argument("--alpha", default=None, dest="focal_alpha",
                   help='focal alpha: a float or "balanced"')
    p.add_argument("--inner-steps", type=int, default=None, dest="inner_steps")
    p.add_argument("--inner-lr", type=float, default=None, dest="inner_lr")
    p.add_argument("--outer-lr", type=float, default=None, dest="outer_lr")
    p.add_argument("--meta-batch", type=int, default=None, dest="meta_batch")
    p.add_argument("--episodes", default=None, dest="episodes_per_phase",
                   help="episodes per phase, e.g. 120,120,160")


_CONFIG_FIELDS = ("seed", "split_ratio", "embed_dim", "external_path", "k",
                  "tau", "smote_k", "focal_gamma", "focal_alpha",
                  "inner_steps", "inner_lr", "outer_lr", "meta_batch",
                  "episodes_per_phase")


def _config_from(args) -> RunConfig:
    cfg = load_config(getattr(args, "config", None))
    overrides = {name: getattr(args, name, None) for name in _CONFIG_FIELDS}
    if getattr(args, "manifest", None):
        overrides["manifest"] = args.manifest
    if getattr(args, "out", None):
        overrides["out_dir"] = str(args.out)
    return apply_overrides(cfg, **overrides)


def _meta_cfg(cfg: RunConfig, seed: int) -> MetaConfig:
    return MetaConfig(inner_steps=cfg.inner_steps, inner_lr=cfg.inner_lr,
                      outer_lr=cfg.outer_lr, meta_batch=cfg.meta_batch,
                      episodes_per_phase=cfg.episodes_per_phase, seed=seed)


def _focal(cfg: RunConfig) -> FocalLossConfig:
    return FocalLossConfig(gamma=cfg.focal_gamma, alpha=cfg.focal_alpha)


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


# ---------------------------------------------------------------------------
# subcommand implementations
# ---------------------------------------------------------------------------

def cmd_synth_corpus(args) -> int:
    manifest = generate_corpus(args.out, sources=args.sources,
                               per_source=args.per_source,
                               imbalance=args.imbalance, seed=args.seed,
                               hard_rate=args.hard_rate)
    print(manifest)
    return 0


def cmd_parse(args) -> int:
    cfg = _config_from(args)
    rs = load_corpus(read_manifest(cfg.manifest))
    miners, assignment = mine_corpus(rs)
    out = _out_dir(args)
    save_template_store(miners, out / "templates.tsv")
    with open(out / "assignments.csv", "w", encoding="utf-8") as fh:
        fh.write("record_id,source_id,template_id\n")
        for rec in rs.records:
            fh.write(f"{rec.record_id},{rec.source_id},"
                     f"{assignment[rec.record_id]}\n")
    total = sum(len(m.templates) for m in miners.values())
    print(f"mined {total} templates over {len(rs.source_ids)} sources "
          f"-> {out / 'templates.tsv'}")
    return 0


def cmd_label(args) -> int:
    """Leave-one-source-out label transfer across all manifest sources."""
    cfg = _config_from(args)
    rs = load_corpus(read_manifest(cfg.manifest))
    train, _ = split_train_test(rs, cfg.split_ratio, cfg.seed)
    miners, assignment = mine_corpus(rs)
    embedder = fit_embedder(rs, dim=cfg.embed_dim,
                            seed=derive_seed(cfg.seed, "embedder"))
    golds = {sid: gold_template_labels(train, sid, assignment)
             for sid in rs.source_ids}
    out = _out_dir(args)
    drifted = 0
    for sid in rs.source_ids:
        kb_templates = []
        for other in rs.source_ids:
            if other == sid:
                continue
            for tid, lab in sorted(golds[other].items()):
                kb_templates.append((miners[other].templates[tid], lab))
        kb = build_knowledge_base(kb_templates, embedder)
        candidates = [miners[sid].templates[tid]
                      for tid in sorted(miners[sid].templates)]
        results = transfer_labels(candidates, kb, tau=cfg.tau,
                                  embedder=embedder)
        drifted += sum(1 for r in results if r.assigned_label == -1)
        save_transfer_report(results, out / f"transfer_{sid}.csv")
    print(f"transferred labels for {len(rs.source_ids)} sources "
          f"({drifted} drifted templates) -> {out}")
    return 0


def cmd_featurize(args) -> int:
    cfg = _config_from(args)
    rs = load_corpus(read_manifest(cfg.manifest))
    miners, assignment = mine_corpus(rs)
    embedder = fit_embedder(rs, dim=cfg.embed_dim,
                            seed=derive_seed(cfg.seed, "embedder"))
    external = (load_external_embeddings(cfg.external_path, cfg.embed_dim)
                if cfg.external_path else None)
    feats = featurize_records(rs.records, miners, assignment, embedder,
                              labels=None, external=external)
    out = _out_dir(args)
    save_feature_matrix(feats, out / "features.csv")
    save_embedder(embedder, out / "embedder.tsv")
    print(f"featurized {len(feats)} records "
          f"({feats[0].values.size} dims) -> {out / 'features.csv'}")
    return 0


def cmd_select(args) -> int:
    cfg = _config_from(args)
    feats = load_feature_matrix(args.features)
    X, y, _ = stack_features(feats)
    mi = mi_scores(X, y)
    fi = forest_scores(X, y, seed=derive_seed(cfg.seed, "forest") % (2 ** 32))
    mask = select_top_k(mi, fi, cfg.k)
    save_selection_mask(mask, X.shape[1], args.out)
    print(f"selected top {cfg.k} of {X.shape[1]} features -> {args.out}")
    return 0


def cmd_balance(args) -> int:
    cfg = _config_from(args)
    feats = load_feature_matrix(args.features)
    mask, _ = load_selection_mask(args.mask)
    X, y, _ = stack_features(feats)
    Xb, yb, report = balance_training_set(mask.apply(X), y, k=cfg.smote_k,
                                          seed=derive_seed(cfg.seed, "smote"))
    out_feats = []
    for i, fv in enumerate(feats):
        out_feats.append(FeatureVector(values=Xb[i], record_id=fv.record_id,
                                       source_id=fv.source_id, label=int(yb[i]),
                                       drift_flag=fv.drift_flag))
    for j in range(len(feats), Xb.shape[0]):
        out_feats.append(FeatureVector(values=Xb[j], record_id=-1,
                                       source_id="synthetic",
                                       label=int(yb[j])))
    save_feature_matrix(out_feats, args.out)
    print(f"balanced {report.n_minority_before}:{report.n_majority} -> "
          f"parity with {report.n_synthetic} synthetic rows -> {args.out}")
    return 0


def _prepare_pools(cfg: RunConfig, rs, train, miners, assignment, external,
                   fold_tag: str):
    """Transfer labels, featurize, select, and balance for a set of sources."""
    sids = rs.source_ids
    embedder = fit_embedder(rs, dim=cfg.embed_dim,
                            seed=derive_seed(cfg.seed, "embedder"))
    golds = {sid: gold_template_labels(train, sid, assignment) for sid in sids}
    labels = transfer_pool_labels(train, sids, miners, assignment, golds,
                                  embedder, cfg.tau)
    records = [r for sid in sids for r in train.by_source(sid)]
    feats = featurize_records(records, miners, assignment, embedder,
                              labels=labels, external=external)
    X, y, _ = stack_features(feats)
    if np.unique(y).size < 2:
        raise ValueError("transferred labels collapsed to one class")
    mi = mi_scores(X, y)
    fi = forest_scores(X, y,
                       seed=derive_seed(cfg.seed, "forest", fold_tag) % (2 ** 32))
    mask = select_top_k(mi, fi, cfg.k)
    warnings: list[str] = []
    pools = _build_source_pools(sids, feats, mask, cfg, fold_tag, warnings)
    return embedder, mask, pools, warnings


def cmd_train(args) -> int:
    """Meta-train on every manifest source (no held-out target)."""
    cfg = _config_from(args)
    rs = load_corpus(read_manifest(cfg.manifest))
    train, _ = split_train_test(rs, cfg.split_ratio, cfg.seed)
    miners, assignment = mine_corpus(rs)
    external = (load_external_embeddings(cfg.external_path, cfg.embed_dim)
                if cfg.external_path else None)
    embedder, mask, pools, warnings = _prepare_pools(
        cfg, rs, train, miners, assignment, external, "train")
    meta_cfg = _meta_cfg(cfg, derive_seed(cfg.seed, "meta", "train"))
    theta0 = init_params([cfg.k, *ENCODER_HIDDEN],
                         seed=derive_seed(cfg.seed, "init", "train"))
    theta, curve = meta_train(pools, meta_cfg, theta0, _focal(cfg))
    out = _out_dir(args)
    save_checkpoint(theta, out / "checkpoint.bin", seed=cfg.seed,
                    config_digest=config_digest(cfg),
                    extras={"meta_config": f"{meta_cfg.inner_steps},"
                            f"{meta_cfg.inner_lr},{meta_cfg.outer_lr},"
                            f"{meta_cfg.meta_batch}"})
    save_training_curve(curve, out / "curve.csv")
    save_selection_mask(mask, cfg.embed_dim + 80, out / "mask.txt")
    save_embedder(embedder, out / "embedder.tsv")
    save_template_store(miners, out / "templates.tsv")
    for w in warnings:
        log.warning("%s", w)
    print(f"meta-trained on {len(pools)} sources, "
          f"{len(curve)} outer iterations -> {out}")
    return 0


def cmd_evaluate(args) -> int:
    """Adapt a trained checkpoint to one target source and score its test split."""
    cfg = _config_from(args)
    rs = load_corpus(read_manifest(cfg.manifest))
    if args.target not in rs.source_ids:
        print(f"error: unknown target source {args.target!r}", file=sys.stderr)
        return 1
    train, test = split_train_test(rs, cfg.split_ratio, cfg.seed)
    miners, assignment = mine_corpus(rs)
    model = Path(args.model)
    theta, _ = load_checkpoint(model / "checkpoint.bin")
    mask, _ = load_selection_mask(model / "mask.txt")
    embedder = load_embedder(model / "embedder.tsv")
    external = (load_external_embeddings(cfg.external_path, cfg.embed_dim)
                if cfg.external_path else None)

    rng = np.random.default_rng(derive_seed(cfg.seed, "support", args.target))
    support_recs, _ = _pick_support(train, args.target, rng)
    support_feats = featurize_records(support_recs, miners, assignment,
                                      embedder, external=external)
    support_X, support_y, _ = stack_features(support_feats)
    support_X = mask.apply(support_X)
    query_recs = test.by_source(args.target)
    query_feats = featurize_records(query_recs, miners, assignment, embedder,
                                    external=external)
    query_X, golds, _ = stack_features(query_feats)
    query_X = mask.apply(query_X)

    meta_cfg = _meta_cfg(cfg, derive_seed(cfg.seed, "meta", args.target))
    result = adapt_and_predict(theta, support_X, support_y, query_X,
                               meta_cfg, _focal(cfg))
    p, r, score = f1(confusion(result.predictions, golds))
    base = _baseline_predict(support_X, support_y, query_X)
    bp, br, bscore = f1(confusion(base, golds))
    out = _out_dir(args)
    with open(out / f"evaluate_{args.target}.csv", "w", encoding="utf-8") as fh:
        fh.write("target,precision,recall,f1,baseline_f1,n_queries\n")
        fh.write(f"{args.target},{p:.17g},{r:.17g},{score:.17g},"
                 f"{bscore:.17g},{len(query_recs)}\n")
    print(f"{args.target}: P={p:.4f} R={r:.4f} F1={score:.4f} "
          f"(baseline F1={bscore:.4f}, {len(query_recs)} queries)")
    return 0


def cmd_predict(args) -> int:
    """Classify raw log lines with a trained model and a labeled support file."""
    cfg = _config_from(args)
    if args.header not in HEADER_PATTERNS:
        print(f"error: unknown header kind {args.header!r} "
              f"(choose from {sorted(HEADER_PATTERNS)})", file=sys.stderr)
        return 1
    model = Path(args.model)
    theta, _ = load_checkpoint(model / "checkpoint.bin")
    mask, _ = load_selection_mask(model / "mask.txt")
    embedder = load_embedder(model / "embedder.tsv")

    pattern = HEADER_PATTERNS[args.header]

    def read_messages(path):
        msgs = []
        with open(path, encoding="utf-8", errors="replace") as fh:
            for raw in fh:
                raw = raw.rstrip("\n")
                if not raw.strip():
                    continue
                m = pattern.match(raw)
                msgs.append(raw[m.end():].strip() if m and raw[m.end():].strip()
                            else raw.strip())
        return msgs

    support_msgs = read_messages(args.support_input)
    labels_by_idx = _read_label_sidecar(Path(args.support_labels))
    try:
        support_labels = [labels_by_idx[i] for i in range(len(support_msgs))]
    except KeyError as exc:
        print(f"error: support label file lacks an entry for line {exc}",
              file=sys.stderr)
        return 1

    input_msgs = read_messages(args.input)
    miner = TemplateMiner("predict", 0)
    all_msgs = support_msgs + input_msgs
    tids = [miner.parse(m)[0] for m in all_msgs]
    miner.freeze()

    def featurize(msgs, tid_slice, labels):
        rows = []
        for i, (msg, tid) in enumerate(zip(msgs, tid_slice)):
            sem, _ = semantic_for(msg, embedder)
            struct = structural_features(msg, miner.templates[tid], miner)
            rec = LogRecord(record_id=i, source_id="predict", raw_line=msg,
                            message=msg)
            rows.append(assemble(rec, sem, struct,
                                 labels[i] if labels else NORMAL).values)
        return np.vstack(rows)

    support_X = mask.apply(featurize(support_msgs, tids[:len(support_msgs)],
                                     support_labels))
    query_X = mask.apply(featurize(input_msgs, tids[len(support_msgs):], None))
    meta_cfg = _meta_cfg(cfg, derive_seed(cfg.seed, "meta", "predict"))
    result = adapt_and_predict(theta, support_X,
                               np.asarray(support_labels, dtype=int),
                               query_X, meta_cfg, _focal(cfg))
    with open(args.out, "w", encoding="utf-8") as fh:
        fh.write("record_index,prediction,p_anomaly\n")
        for i, (pred, prob) in enumerate(zip(result.predictions,
                                             result.probabilities)):
            fh.write(f"{i},{int(pred)},{prob:.17g}\n")
    n_anom = int(result.predictions.sum())
    print(f"predicted {n_anom} anomalies in {len(input_msgs)} lines -> {args.out}")
    return 0


def cmd_loso(args) -> int:
    cfg = _config_from(args)
    if not cfg.manifest:
        print("error: no manifest given (use --manifest or a config file)",
              file=sys.stderr)
        return 1
    out = _out_dir(args)
    report = run_loso(cfg.manifest, cfg,
                      curve_dir=out / "curves" if args.curves else None)
    write_report_csv(report, out / "report.csv")
    write_run_metadata(report, cfg, out / "metadata.json")
    print(format_report_table(report))
    return 1 if report.any_failed else 0


# ---------------------------------------------------------------------------
# dispatch
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="logmeta",
        description="Cross-domain log anomaly detection via meta-learning")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-corpus", help="generate the seeded synthetic corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--sources", type=int, default=6)
    p.add_argument("--per-source", type=int, default=1000, dest="per_source")
    p.add_argument("--imbalance", type=float, default=50.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--hard-rate", type=float, default=0.12, dest="hard_rate")
    p.set_defaults(func=cmd_synth_corpus)

    p = sub.add_parser("parse", help="mine templates per source")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    _add_config_flags(p)
    p.set_defaults(func=cmd_parse)

    p = sub.add_parser("label", help="cross-source drift-based label transfer")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    _add_config_flags(p)
    p.set_defaults(func=cmd_label)

    p = sub.add_parser("featurize", help="assemble semantic+structural features")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    _add_config_flags(p)
    p.set_defaults(func=cmd_featurize)

    p = sub.add_parser("select", help="rank-sum top-K feature selection")
    p.add_argument("--features", required=True)
    p.add_argument("--out", required=True)
    _add_config_flags(p)
    p.set_defaults(func=cmd_select)

    p = sub.add_parser("balance", help="SMOTE-balance a feature matrix")
    p.add_argument("--features", required=True)
    p.add_argument("--mask", required=True)
    p.add_argument("--out", required=True)
    _add_config_flags(p)
    p.set_defaults(func=cmd_balance)

    p = sub.add_parser("train", help="meta-train on all manifest sources")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    _add_config_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="adapt + score one target source")
    p.add_argument("--manifest", required=True)
    p.add_argument("--model", required=True, help="directory written by train")
    p.add_argument("--target", required=True)
    p.add_argument("--out", required=True)
    _add_config_flags(p)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("loso", help="leave-one-source-out evaluation")
    p.add_argument("--manifest", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--curves", action="store_true",
                   help="also write per-fold training curves")
    _add_config_flags(p)
    p.set_defaults(func=cmd_loso)

    p = sub.add_parser("predict", help="classify raw lines with a trained model")
    p.add_argument("--model", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--header", default="none",
                   help=f"header kind: {sorted(HEADER_PATTERNS)}")
    p.add_argument("--support-input", required=True, dest="support_input")
    p.add_argument("--support-labels", required=True, dest="support_labels")
    p.add_argument("--out", required=True)
    _add_config_flags(p)
    p.set_defaults(func=cmd_predict)

    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except FileNotFoundError as exc:
        print(f"error: missing input: {exc}", file=sys.stderr)
        return 1
    except (ValueError, RuntimeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
