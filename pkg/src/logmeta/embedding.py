"""Semantic message vectors and 848-dim feature assembly.

The built-in embedder is a seeded feature-hashing model: token unigrams and
per-token character trigrams are hashed to signed coordinates and accumulated
with tf-idf weights, then L2-normalized. Precomputed external vectors (e.g.
from a transformer) can be loaded from a sidecar file and take precedence per
message, with the built-in embedder as fallback.
"""

from __future__ import annotations

import hashlib
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .ingest import RecordSet
from .template_miner import canonical_hash64

log = logging.getLogger(__name__)

SEMANTIC_DIM = 768


@dataclass
class EmbedderState:
    """Fitted embedder; treat as frozen once built."""

    dim: int
    idf_table: dict[str, float]
    hash_seed: int
    char_ngram: int = 3
    n_docs: int = 0
    _gram_cache: dict = field(default_factory=dict, compare=False, repr=False)


@dataclass
class FeatureVector:
    values: np.ndarray  # semantic block [0:dim), structural block [dim:dim+80)
    record_id: int
    source_id: str
    label: int
    drift_flag: bool = False


def fit_embedder(corpus: RecordSet, dim: int = SEMANTIC_DIM, seed: int = 0) -> EmbedderState:
    """Compute idf = ln((1+N)/(1+df)) + 1 over lowercased message tokens."""
    if len(corpus) == 0:
        raise ValueError("cannot fit embedder on an empty corpus")
    if dim < 1:
        raise ValueError("dim must be >= 1")
    df: dict[str, int] = {}
    for rec in corpus.records:
        for tok in set(rec.message.lower().split()):
            df[tok] = df.get(tok, 0) + 1
    n = len(corpus)
    idf = {tok: math.log((1 + n) / (1 + c)) + 1.0 for tok, c in df.items()}
    return EmbedderState(dim=dim, idf_table=idf, hash_seed=seed, n_docs=n)


def _gram_slot(st: EmbedderState, gram: str) -> tuple[int, float]:
    slot = st._gram_cache.get(gram)
    if slot is None:
        h = int.from_bytes(
            hashlib.blake2b(
                gram.encode("utf-8"),
                key=st.hash_seed.to_bytes(8, "big", signed=False),
                digest_size=8,
            ).digest(),
            "big",
        )
        slot = (h % st.dim, 1.0 if h >> 63 else -1.0)
        st._gram_cache[gram] = slot
    return slot


def _default_idf(st: EmbedderState) -> float:
    # unseen token: df = 0 in the fitted formula
    return math.log(1 + st.n_docs) + 1.0


def embed_semantic(message: str, st: EmbedderState) -> np.ndarray:
    """Hash token unigrams + char trigrams into a unit-norm dim vector.

    Pure function of (message, state). Empty or whitespace-only messages
    yield the zero vector.
    """
    v = np.zeros(st.dim)
    tokens = message.lower().split()
    if not tokens:
        return v
    counts: dict[str, int] = {}
    for tok in tokens:
        counts[tok] = counts.get(tok, 0) + 1
    ng = st.char_ngram
    for tok, tf in counts.items():
        w = tf * st.idf_table.get(tok, _default_idf(st))
        idx, sign = _gram_slot(st, tok)
        v[idx] += sign * w
        if len(tok) >= ng:
            for i in range(len(tok) - ng + 1):
                idx, sign = _gram_slot(st, tok[i:i + ng])
                v[idx] += sign * w
    norm = np.linalg.norm(v)
    if norm > 0:
        v /= norm
    return v


def load_external_embeddings(path, expected_dim: int) -> dict[int, np.ndarray]:
    """Load precomputed vectors keyed by the canonical message hash.

    File format: header line "dim=<d>", then rows of
    "<hex16 message hash>,<d comma-separated decimals>". A dimension
    mismatch is fatal; malformed rows are skipped with a warning.
    """
    vectors: dict[int, np.ndarray] = {}
    skipped = 0
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().strip()
        if not header.startswith("dim="):
            raise ValueError(f"external embedding file missing dim header: {path}")
        dim = int(header[4:])
        if dim != expected_dim:
            raise ValueError(
                f"external embedding dim {dim} does not match configured {expected_dim}"
            )
        for line in fh:
            line = line.strip()
            if not line:
                continue
            try:
                key_s, rest = line.split(",", 1)
                vec = np.fromstring(rest, sep=",")  # noqa: NPY201 - fast path
                if vec.size != dim or not np.all(np.isfinite(vec)):
                    raise ValueError
                vectors[int(key_s, 16)] = vec
            except ValueError:
                skipped += 1
    if skipped:
        log.warning("external embeddings: skipped %d malformed row(s)", skipped)
    return vectors


def save_external_embeddings(vectors: dict[int, np.ndarray], dim: int, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"dim={dim}\n")
        for key in sorted(vectors):
            vals = ",".join(f"{x:.17g}" for x in vectors[key])
            fh.write(f"{key:016x},{vals}\n")


def message_hash(message: str) -> int:
    return canonical_hash64(message)


def semantic_for(message: str, st: EmbedderState,
                 external: dict[int, np.ndarray] | None = None) -> tuple[np.ndarray, bool]:
    """External vector when present, else built-in; returns (vector, used_fallback)."""
    if external is not None:
        vec = external.get(message_hash(message))
        if vec is not None:
            return vec, False
        return embed_semantic(message, st), True
    return embed_semantic(message, st), False


def assemble(record, semantic: np.ndarray, structural: np.ndarray,
             label: int, drift_flag: bool = False) -> FeatureVector:
    """Concatenate semantic then structural blocks into one feature vector."""
    if semantic.ndim != 1 or structural.ndim != 1:
        raise ValueError("semantic and structural inputs must be 1-D")
    values = np.concatenate([semantic, structural])
    if not np.all(np.isfinite(values)):
        raise ValueError(f"non-finite feature entry for record {record.record_id}")
    return FeatureVector(values=values, record_id=record.record_id,
                         source_id=record.source_id, label=int(label),
                         drift_flag=bool(drift_flag))


def save_feature_matrix(fvs: list[FeatureVector], path) -> None:
    """CSV: record_id, source_id, label, drift_flag, then the feature values."""
    with open(path, "w", encoding="utf-8") as fh:
        for fv in fvs:
            vals = ",".join(f"{x:.17g}" for x in fv.values)
            fh.write(f"{fv.record_id},{fv.source_id},{fv.label},{int(fv.drift_flag)},{vals}\n")


def load_feature_matrix(path) -> list[FeatureVector]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            rid, sid, label, drift, rest = line.split(",", 4)
            out.append(FeatureVector(values=np.fromstring(rest, sep=","),
                                     record_id=int(rid), source_id=sid,
                                     label=int(label), drift_flag=drift == "1"))
    return out


def save_embedder(st: EmbedderState, path) -> None:
    """Persist the fitted state: one header line, then token<TAB>idf rows."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"dim={st.dim} seed={st.hash_seed} ngram={st.char_ngram} "
                 f"ndocs={st.n_docs}\n")
        for tok in sorted(st.idf_table):
            fh.write(f"{tok}\t{st.idf_table[tok]:.17g}\n")


def load_embedder(path) -> EmbedderState:
    with open(path, encoding="utf-8") as fh:
        header = dict(part.split("=") for part in fh.readline().split())
        idf = {}
        for line in fh:
            line = line.rstrip("\n")
            if not line:
                continue
            tok, _, value = line.partition("\t")
            idf[tok] = float(value)
    return EmbedderState(dim=int(header["dim"]), idf_table=idf,
                         hash_seed=int(header["seed"]),
                         char_ngram=int(header["ngram"]),
                         n_docs=int(header["ndocs"]))
