"""Drain-style online template mining over a fixed-depth token prefix tree.

One miner per source: messages are tokenized, parameter-looking tokens are
pre-masked to wildcards, and the tree groups messages first by token count,
then by their first `depth` tokens. Leaves hold template lists; a message
merges into the most similar leaf template when similarity clears the
threshold, otherwise it founds a new template. Each record also gets an
80-dim structural feature vector derived from its template and the tree.
"""

from __future__ import annotations

import hashlib
import logging
import math
import re
import string
from dataclasses import dataclass, field

import numpy as np

log = logging.getLogger(__name__)

WILDCARD = "<*>"

STRUCTURAL_DIM = 80
_BUCKETS = 64  # one-hot block size for template_id mod 64

# default tree parameters (Drain defaults)
DEPTH = 4
SIM_THRESHOLD = 0.4
MAX_CHILDREN = 100

_SOURCE_ID_STRIDE = 1_000_000  # template_id = source_ordinal * stride + local id

_IP_RE = re.compile(r"^\d{1,3}(\.\d{1,3}){3}(:\d+)?$")
_HEX_RE = re.compile(r"^(0[xX])?[0-9a-fA-F]{4,}$")
_PUNCT = set(string.punctuation)


@dataclass(frozen=True)
class Token:
    """A message or template token; wildcards render as "<*>"."""

    text: str
    is_wildcard: bool = False

    def render(self) -> str:
        return WILDCARD if self.is_wildcard else self.text


@dataclass
class LogTemplate:
    template_id: int
    tokens: list[Token]
    token_count: int
    occurrences: int = 1
    source_ids_seen: set[str] = field(default_factory=set)

    def render(self) -> str:
        return " ".join(t.render() for t in self.tokens)

    @property
    def wildcard_count(self) -> int:
        return sum(1 for t in self.tokens if t.is_wildcard)


def _looks_like_parameter(text: str) -> bool:
    if any(c.isdigit() for c in text):
        return True
    if _HEX_RE.match(text):
        return True
    if _IP_RE.match(text):
        return True
    if "/" in text and len(text) > 1:  # path-like
        return True
    return False


def tokenize(message: str) -> list[Token]:
    """Whitespace-split a message, pre-masking parameter-looking tokens.

    Tokens containing digits, hex strings of 4+ chars, IPs, and path-like
    strings become wildcards (original text retained for parameter
    extraction). Whitespace-only input yields a single wildcard token.
    """
    parts = message.split()
    if not parts:
        log.debug("tokenize: whitespace-only message")
        return [Token("", is_wildcard=True)]
    return [Token(p, is_wildcard=_looks_like_parameter(p)) for p in parts]


def sequence_similarity(a: list[Token], b: list[Token]) -> float:
    """Fraction of positions where tokens are equal or either is a wildcard."""
    if len(a) != len(b):
        raise ValueError(f"length mismatch: {len(a)} vs {len(b)}")
    if not a:
        return 1.0
    hits = 0
    for ta, tb in zip(a, b):
        if ta.is_wildcard or tb.is_wildcard or ta.text == tb.text:
            hits += 1
    return hits / len(a)


class _Node:
    __slots__ = ("children", "leaf")

    def __init__(self):
        self.children: dict = {}
        self.leaf: list[LogTemplate] | None = None


@dataclass
class ParseTree:
    """Fixed-depth prefix tree: token count level, then `depth` token levels.

    Messages shorter than `depth` attach their leaf after their last token.
    A token level never exceeds max_children named children; overflow and
    pre-masked tokens route to the wildcard child.
    """

    depth: int = DEPTH
    sim_threshold: float = SIM_THRESHOLD
    max_children: int = MAX_CHILDREN
    root: _Node = field(default_factory=_Node)
    frozen: bool = False
    records_seen: int = 0

    def __post_init__(self):
        if self.depth < 1:
            raise ValueError("depth must be >= 1")
        if not 0 < self.sim_threshold < 1:
            raise ValueError("sim_threshold must be in (0,1)")


def _descend(tree: ParseTree, tokens: list[Token], create: bool) -> _Node | None:
    keys: list = [len(tokens)]
    for tok in tokens[: tree.depth]:
        keys.append(WILDCARD if tok.is_wildcard else tok.text)
    node = tree.root
    for level, key in enumerate(keys):
        children = node.children
        if key in children:
            node = children[key]
            continue
        if level > 0 and key != WILDCARD and len(children) >= tree.max_children:
            key = WILDCARD  # overflow routes to the wildcard child
            if key in children:
                node = children[key]
                continue
        if not create:
            if level > 0 and WILDCARD in children:
                node = children[WILDCARD]
                continue
            return None
        child = _Node()
        children[key] = child
        node = child
    if node.leaf is None:
        if not create:
            return None
        node.leaf = []
    return node


def _best_match(leaf: list[LogTemplate], tokens: list[Token]) -> tuple[LogTemplate | None, float]:
    best, best_sim = None, -1.0
    for t in leaf:  # leaf is in creation order; ties go to the older template
        sim = sequence_similarity(t.tokens, tokens)
        if sim > best_sim:
            best, best_sim = t, sim
    return best, best_sim


class TemplateMiner:
    """Online miner for one source. Freeze after mining for read-only parsing."""

    def __init__(self, source_id: str, source_ordinal: int, depth: int = DEPTH,
                 sim_threshold: float = SIM_THRESHOLD, max_children: int = MAX_CHILDREN):
        self.source_id = source_id
        self.source_ordinal = source_ordinal
        self.tree = ParseTree(depth=depth, sim_threshold=sim_threshold,
                              max_children=max_children)
        self.templates: dict[int, LogTemplate] = {}
        self._leaf_of: dict[int, list[LogTemplate]] = {}
        self._next_local = 0
        self.frozen_fallbacks = 0

    def _new_template_id(self) -> int:
        tid = self.source_ordinal * _SOURCE_ID_STRIDE + self._next_local
        self._next_local += 1
        return tid

    def parse(self, message: str) -> tuple[int, list[str]]:
        """Parse a message: merge/create while mining, match-only when frozen.

        Returns (template_id, parameter_values) where parameter values are
        the original message tokens at the template's wildcard positions.
        """
        tokens = tokenize(message)
        if self.tree.frozen:
            return self._parse_frozen(tokens)
        self.tree.records_seen += 1
        node = _descend(self.tree, tokens, create=True)
        best, best_sim = _best_match(node.leaf, tokens)
        if best is not None and best_sim >= self.tree.sim_threshold:
            self._merge(best, tokens)
            template = best
        else:
            template = LogTemplate(
                template_id=self._new_template_id(),
                tokens=[Token(WILDCARD, True) if t.is_wildcard else Token(t.text)
                        for t in tokens],
                token_count=len(tokens),
            )
            template.source_ids_seen.add(self.source_id)
            node.leaf.append(template)
            self.templates[template.template_id] = template
            self._leaf_of[template.template_id] = node.leaf
        return template.template_id, _parameters(template, tokens)

    def _merge(self, template: LogTemplate, tokens: list[Token]) -> None:
        merged = []
        for tt, mt in zip(template.tokens, tokens):
            if not tt.is_wildcard and not mt.is_wildcard and tt.text == mt.text:
                merged.append(tt)
            else:
                merged.append(Token(WILDCARD, True))
        template.tokens = merged
        template.occurrences += 1
        template.source_ids_seen.add(self.source_id)

    def _parse_frozen(self, tokens: list[Token]) -> tuple[int, list[str]]:
        node = _descend(self.tree, tokens, create=False)
        if node is not None and node.leaf:
            best, _ = _best_match(node.leaf, tokens)
            return best.template_id, _parameters(best, tokens)
        # unseen shape: fall back to any template of the same length,
        # then to the most frequent template overall
        same_len = [t for t in self.templates.values() if t.token_count == len(tokens)]
        self.frozen_fallbacks += 1
        if same_len:
            best, _ = _best_match(same_len, tokens)
            return best.template_id, _parameters(best, tokens)
        if not self.templates:
            raise ValueError(f"frozen miner for {self.source_id!r} has no templates")
        best = max(self.templates.values(), key=lambda t: (t.occurrences, -t.template_id))
        return best.template_id, []

    def freeze(self) -> None:
        self.tree.frozen = True

    def leaf_sibling_count(self, template_id: int) -> int:
        leaf = self._leaf_of.get(template_id)
        return len(leaf) if leaf else 1


def _parameters(template: LogTemplate, tokens: list[Token]) -> list[str]:
    if template.token_count != len(tokens):
        return []
    return [mt.text for tt, mt in zip(template.tokens, tokens) if tt.is_wildcard]


def canonical_hash64(text: str) -> int:
    """Stable unkeyed 64-bit hash used for bucket features and vector keys."""
    return int.from_bytes(hashlib.blake2b(text.encode("utf-8"), digest_size=8).digest(), "big")


def _byte_entropy(message: str) -> float:
    data = message.encode("utf-8")
    if not data:
        return 0.0
    counts = np.bincount(np.frombuffer(data, dtype=np.uint8), minlength=256)
    p = counts[counts > 0] / len(data)
    return float(-(p * np.log2(p)).sum())


def structural_features(message: str, template: LogTemplate,
                        miner: TemplateMiner) -> np.ndarray:
    """Emit the fixed 80-dim structural layout for one parsed record.

    Layout: [0:64) one-hot of template_id mod 64; 64 token_count/32;
    65 template wildcard ratio; 66 char length/256 (clamped); 67 digit ratio;
    68 uppercase ratio; 69 punctuation ratio; 70 hex-token ratio;
    71 log1p(occurrences)/log1p(records_seen); 72 parameter count;
    73 mean parameter length/16; 74 leaf sibling count/max_children;
    75 byte entropy/8; [76:80) one-hot of first-4-token hash mod 4.
    """
    v = np.zeros(STRUCTURAL_DIM)
    tokens = tokenize(message)
    params = _parameters(template, tokens)
    n_tok = max(1, len(tokens))
    n_chars = max(1, len(message))

    v[template.template_id % _BUCKETS] = 1.0
    v[64] = template.token_count / 32.0
    v[65] = template.wildcard_count / max(1, template.token_count)
    v[66] = min(len(message) / 256.0, 1.0)
    v[67] = sum(c.isdigit() for c in message) / n_chars
    v[68] = sum(c.isupper() for c in message) / n_chars
    v[69] = sum(c in _PUNCT for c in message) / n_chars
    v[70] = sum(1 for t in tokens if _HEX_RE.match(t.text)) / n_tok
    v[71] = math.log1p(template.occurrences) / math.log1p(max(1, miner.tree.records_seen))
    v[72] = float(len(params))
    v[73] = (sum(len(p) for p in params) / len(params) / 16.0) if params else 0.0
    v[74] = miner.leaf_sibling_count(template.template_id) / miner.tree.max_children
    v[75] = _byte_entropy(message) / 8.0
    head = " ".join(t.render() for t in tokens[:4])
    v[76 + canonical_hash64(head) % 4] = 1.0
    return v


def mine_source(miner: TemplateMiner, messages: list[str]) -> list[tuple[int, list[str]]]:
    """Mine messages in order; returns (template_id, parameters) per message."""
    return [miner.parse(m) for m in messages]


def save_template_store(miners: dict[str, TemplateMiner], path) -> None:
    """Line-delimited store: id, source, token_count, occurrences, rendered.

    Tab-separated; rendered templates re-tokenize by whitespace so the
    round-trip is lossless (a literal "<*>" message token is
    indistinguishable from a wildcard, which is harmless under wildcard
    match semantics).
    """
    with open(path, "w", encoding="utf-8") as fh:
        for sid, miner in miners.items():
            for tid in sorted(miner.templates):
                t = miner.templates[tid]
                fh.write(f"{tid}\t{sid}\t{t.token_count}\t{t.occurrences}\t{t.render()}\n")


def load_template_store(path) -> dict[str, dict[int, LogTemplate]]:
    out: dict[str, dict[int, LogTemplate]] = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.rstrip("\n")
            if not line:
                continue
            tid_s, sid, count_s, occ_s, rendered = line.split("\t", 4)
            tokens = [Token(WILDCARD, True) if p == WILDCARD else Token(p)
                      for p in rendered.split()]
            t = LogTemplate(template_id=int(tid_s), tokens=tokens,
                            token_count=int(count_s), occurrences=int(occ_s),
                            source_ids_seen={sid})
            if t.token_count != len(tokens):
                raise ValueError(f"corrupt template row: {line!r}")
            out.setdefault(sid, {})[t.template_id] = t
    return out
