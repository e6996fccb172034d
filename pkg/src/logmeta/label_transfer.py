"""Drift-based labeling: transfer labels from a knowledge base of labeled
templates to unlabeled templates via combined semantic and fuzzy matching.

A candidate scoring below the transfer threshold against every knowledge-base
entry is marked Drifted; downstream, drifted templates' records default to
Normal with a drift flag and are kept out of episode support sets.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass

import numpy as np

from .embedding import EmbedderState, embed_semantic
from .ingest import NORMAL
from .template_miner import LogTemplate, Token

log = logging.getLogger(__name__)

DRIFTED = -1
TAU_DEFAULT = 0.8
W_SEMANTIC = 0.5
W_FUZZY = 0.5


@dataclass
class KBEntry:
    template_id: int
    rendered: str
    tokens: list[Token]
    semantic: np.ndarray
    label: int
    origin_source: str


@dataclass
class KnowledgeBase:
    entries: list[KBEntry]
    conflicts: int = 0  # duplicate template text with disagreeing labels


@dataclass
class TransferResult:
    template_id: int
    assigned_label: int  # NORMAL, ANOMALY, or DRIFTED
    score: float
    best_match: int | None


def _template_text(t: LogTemplate) -> str:
    # wildcards carry no semantics; embed only the constant tokens
    return " ".join(tok.text for tok in t.tokens if not tok.is_wildcard)


def build_knowledge_base(labeled: list[tuple[LogTemplate, int]],
                         embedder: EmbedderState) -> KnowledgeBase:
    if not labeled:
        raise ValueError("cannot build a knowledge base from zero labeled templates")
    entries = []
    by_text: dict[str, set[int]] = {}
    for template, label in labeled:
        rendered = template.render()
        origin = min(template.source_ids_seen) if template.source_ids_seen else ""
        entries.append(KBEntry(
            template_id=template.template_id,
            rendered=rendered,
            tokens=list(template.tokens),
            semantic=embed_semantic(_template_text(template), embedder),
            label=int(label),
            origin_source=origin,
        ))
        by_text.setdefault(rendered, set()).add(int(label))
    conflicts = sum(1 for labels in by_text.values() if len(labels) > 1)
    if conflicts:
        log.warning("knowledge base holds %d template text(s) with conflicting labels",
                    conflicts)
    return KnowledgeBase(entries=entries, conflicts=conflicts)


def token_edit_distance(a: list[Token], b: list[Token]) -> int:
    """Token-level Levenshtein distance; wildcards compare equal to anything."""
    la, lb = len(a), len(b)
    prev = list(range(lb + 1))
    for i in range(1, la + 1):
        cur = [i] + [0] * lb
        ta = a[i - 1]
        for j in range(1, lb + 1):
            tb = b[j - 1]
            same = ta.is_wildcard or tb.is_wildcard or ta.text == tb.text
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (0 if same else 1))
        prev = cur
    return prev[lb]


def fuzzy_similarity(a: list[Token], b: list[Token]) -> float:
    """1 - edit distance normalized by the longer token length."""
    longest = max(len(a), len(b))
    if longest == 0:
        return 1.0
    return 1.0 - token_edit_distance(a, b) / longest


def match_score(candidate: LogTemplate, entry: KBEntry,
                embedder: EmbedderState) -> float:
    """0.5 * clamped cosine + 0.5 * fuzzy token similarity, in [0,1]."""
    if candidate.render() == entry.rendered:
        return 1.0
    sem = embed_semantic(_template_text(candidate), embedder)
    denom = np.linalg.norm(sem) * np.linalg.norm(entry.semantic)
    if denom == 0.0:
        log.warning("zero-norm semantic vector for template %d; cosine term dropped",
                    candidate.template_id)
        cos = 0.0
    else:
        cos = float(np.dot(sem, entry.semantic) / denom)
    cos = min(max(cos, 0.0), 1.0)
    return W_SEMANTIC * cos + W_FUZZY * fuzzy_similarity(candidate.tokens, entry.tokens)


def _score_against(cand: LogTemplate, cand_sem: np.ndarray, entry: KBEntry) -> float:
    if cand.render() == entry.rendered:
        return 1.0
    denom = np.linalg.norm(cand_sem) * np.linalg.norm(entry.semantic)
    if denom == 0.0:
        cos = 0.0
    else:
        cos = min(max(float(np.dot(cand_sem, entry.semantic) / denom), 0.0), 1.0)
    return W_SEMANTIC * cos + W_FUZZY * fuzzy_similarity(cand.tokens, entry.tokens)


def transfer_labels(candidates: list[LogTemplate], kb: KnowledgeBase,
                    tau: float = TAU_DEFAULT,
                    embedder: EmbedderState | None = None) -> list[TransferResult]:
    """Assign each candidate its best KB entry's label, or Drifted below tau.

    Ties on score resolve to the lower entry template_id.
    """
    if not 0 < tau <= 1:
        raise ValueError(f"tau must be in (0,1], got {tau}")
    if not kb.entries:
        raise ValueError("cannot transfer labels from an empty knowledge base")
    entries = sorted(kb.entries, key=lambda e: e.template_id)
    results = []
    for cand in candidates:
        cand_sem = embed_semantic(_template_text(cand), embedder)
        best_score, best_entry = -1.0, None
        for entry in entries:
            s = _score_against(cand, cand_sem, entry)
            if s > best_score:
                best_score, best_entry = s, entry
        assigned = best_entry.label if best_score >= tau else DRIFTED
        results.append(TransferResult(
            template_id=cand.template_id,
            assigned_label=assigned,
            score=max(best_score, 0.0),
            best_match=best_entry.template_id if best_entry else None,
        ))
    return results


def record_label(result: TransferResult) -> tuple[int, bool]:
    """(label, drift_flag) records of this template inherit.

    Drifted templates default to Normal with the drift flag set; treating
    unknown patterns as anomalies would poison the minority class.
    """
    if result.assigned_label == DRIFTED:
        return NORMAL, True
    return result.assigned_label, False


def save_transfer_report(results: list[TransferResult], path) -> None:
    """CSV: template_id, assigned_label, score, best_match_id, drift_flag."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["template_id", "assigned_label", "score",
                         "best_match_id", "drift_flag"])
        for r in results:
            label, drift = record_label(r)
            writer.writerow([r.template_id, label, f"{r.score:.6f}",
                             "" if r.best_match is None else r.best_match,
                             int(drift)])
