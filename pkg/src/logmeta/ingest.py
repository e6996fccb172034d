"""Corpus ingestion: per-source log files -> records -> seeded train/test splits."""

from __future__ import annotations

import configparser
import csv
import logging
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

NORMAL = 0
ANOMALY = 1

# Header patterns strip leading timestamp/pid/level fields; the remainder of
# the line (component prefix included) is the message. Unmatched lines keep
# the whole line as the message and bump a warning counter, never dropped.
HEADER_PATTERNS: dict[str, re.Pattern] = {
    # "Jun 14 15:16:01 kernel: oops" -> "kernel: oops"
    "syslog": re.compile(r"^[A-Z][a-z]{2}\s+\d{1,2}\s+\d{2}:\d{2}:\d{2}\s+"),
    # "[Thu Jun 09 06:07:04 2005] [notice] msg" -> "msg"
    "apache": re.compile(r"^\[[^\]]*\]\s+\[[^\]]*\]\s+"),
    # "081109 203518 143 INFO dfs.DataNode: msg" -> "dfs.DataNode: msg"
    "hdfs": re.compile(r"^\d{6}\s+\d{6}\s+\d+\s+[A-Z]+\s+"),
    # "2015-10-18 18:01:47,978 INFO [main] cls: msg" -> "cls: msg"
    "hadoop": re.compile(
        r"^\d{4}-\d{2}-\d{2}\s+\d{2}:\d{2}:\d{2},\d+\s+[A-Z]+\s+(\[[^\]]*\]\s+)?"
    ),
    # "2016-09-28 04:30:30.123 msg" / "2016-09-28T04:30:30 msg"
    "iso": re.compile(r"^\d{4}-\d{2}-\d{2}[T ]\d{2}:\d{2}:\d{2}(\.\d+)?\s+"),
    "none": re.compile(r"^(?!)"),  # never matches: whole line is the message
}


@dataclass
class LogRecord:
    record_id: int
    source_id: str
    raw_line: str
    message: str
    gold_label: int | None = None  # NORMAL/ANOMALY or None when unlabeled


@dataclass
class ManifestSource:
    source_id: str
    file_path: Path
    header: str = "none"
    label_path: Path | None = None
    expected_count: int | None = None


@dataclass
class CorpusManifest:
    sources: list[ManifestSource]
    seed: int = 0

    def __post_init__(self):
        ids = [s.source_id for s in self.sources]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate source_id in manifest")
        for s in self.sources:
            if s.header not in HEADER_PATTERNS:
                raise ValueError(
                    f"source {s.source_id!r}: unknown header pattern {s.header!r}"
                )


@dataclass
class RecordSet:
    """Ordered records plus a source_id -> half-open record_id range index.

    Records are kept sorted by record_id and per-source record_id ranges are
    disjoint, so each source also occupies a contiguous slice of `records`
    (tracked in `_positions` for cheap per-source access).
    """

    records: list[LogRecord]
    source_index: dict[str, tuple[int, int]] = field(default_factory=dict)
    header_warnings: int = 0
    _positions: dict[str, tuple[int, int]] = field(default_factory=dict, repr=False)

    def by_source(self, source_id: str) -> list[LogRecord]:
        start, stop = self._positions[source_id]
        return self.records[start:stop]

    @property
    def source_ids(self) -> list[str]:
        return list(self.source_index)

    def __len__(self) -> int:
        return len(self.records)


def read_manifest(path) -> CorpusManifest:
    """Parse a manifest config file (INI: [corpus] seed, [source:<id>] sections)."""
    cfg = configparser.ConfigParser()
    read = cfg.read(path)
    if not read:
        raise FileNotFoundError(f"manifest not readable: {path}")
    base = Path(path).parent
    seed = cfg.getint("corpus", "seed", fallback=0)
    sources = []
    for section in cfg.sections():
        if not section.startswith("source:"):
            continue
        sid = section.split(":", 1)[1]
        sec = cfg[section]
        label_path = sec.get("labels")
        expected = sec.get("expected_count")
        sources.append(
            ManifestSource(
                source_id=sid,
                file_path=base / sec["path"],
                header=sec.get("header", "none"),
                label_path=(base / label_path) if label_path else None,
                expected_count=int(expected) if expected else None,
            )
        )
    if not sources:
        raise ValueError(f"manifest has no [source:*] sections: {path}")
    return CorpusManifest(sources=sources, seed=seed)


def write_manifest(manifest: CorpusManifest, path) -> None:
    """Write a manifest back out; paths are stored relative to the file."""
    base = Path(path).parent
    lines = ["[corpus]", f"seed = {manifest.seed}", ""]
    for s in manifest.sources:
        lines.append(f"[source:{s.source_id}]")
        lines.append(f"path = {_relativize(s.file_path, base)}")
        lines.append(f"header = {s.header}")
        if s.label_path is not None:
            lines.append(f"labels = {_relativize(s.label_path, base)}")
        if s.expected_count is not None:
            lines.append(f"expected_count = {s.expected_count}")
        lines.append("")
    Path(path).write_text("\n".join(lines), encoding="utf-8")


def _relativize(p: Path, base: Path) -> str:
    try:
        return Path(p).relative_to(base).as_posix()
    except ValueError:
        return Path(p).as_posix()


def _read_label_sidecar(path: Path) -> dict[int, int]:
    """Label sidecar CSV: record_index,label with label in {0,1}; 0-based index."""
    labels: dict[int, int] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is not None and header[:2] != ["record_index", "label"]:
            # no header row: treat it as data
            reader = _chain_row(header, reader)
        for row in reader:
            if not row:
                continue
            labels[int(row[0])] = int(row[1])
    return labels


def _chain_row(first, rest):
    yield first
    yield from rest


def load_corpus(manifest: CorpusManifest) -> RecordSet:
    """Read every manifest source into one RecordSet, in manifest order.

    Every non-blank line yields exactly one record. Lines whose header
    pattern does not match keep the full raw line as the message and are
    counted under header_warnings.
    """
    records: list[LogRecord] = []
    warnings = 0
    next_id = 0
    for src in manifest.sources:
        if not Path(src.file_path).is_file():
            raise FileNotFoundError(f"source {src.source_id!r}: {src.file_path}")
        pattern = HEADER_PATTERNS[src.header]
        sidecar = _read_label_sidecar(src.label_path) if src.label_path else {}
        start = next_id
        line_index = 0
        with open(src.file_path, encoding="utf-8", errors="replace") as fh:
            for raw in fh:
                raw = raw.rstrip("\n")
                if not raw.strip():
                    continue
                m = pattern.match(raw)
                if m and raw[m.end():].strip():
                    message = raw[m.end():].strip()
                else:
                    message = raw.strip()
                    if src.header != "none":
                        warnings += 1
                records.append(
                    LogRecord(
                        record_id=next_id,
                        source_id=src.source_id,
                        raw_line=raw,
                        message=message,
                        gold_label=sidecar.get(line_index),
                    )
                )
                next_id += 1
                line_index += 1
        count = next_id - start
        if count == 0:
            log.warning("source %s: empty file %s", src.source_id, src.file_path)
        if src.expected_count is not None and count != src.expected_count:
            log.warning(
                "source %s: expected %d records, got %d",
                src.source_id, src.expected_count, count,
            )
        log.info("source %s: %d records", src.source_id, count)
    if warnings:
        log.warning("header strip failed on %d lines (kept whole-line messages)", warnings)
    rs = _reindex(records)
    rs.header_warnings = warnings
    # manifest order, with empty sources visible in the index
    index = {s.source_id: rs.source_index.get(s.source_id, (0, 0)) for s in manifest.sources}
    positions = {s.source_id: rs._positions.get(s.source_id, (0, 0)) for s in manifest.sources}
    rs.source_index = index
    rs._positions = positions
    return rs


def _stratum_rng(seed: int, source_ord: int, label_code: int) -> np.random.Generator:
    # documented derivation: one independent stream per (source, label) stratum
    return np.random.default_rng([seed, source_ord, label_code])


def split_train_test(
    rs: RecordSet, ratio: float, seed: int
) -> tuple[RecordSet, RecordSet]:
    """Stratified per-source (and per-label when labels exist) split.

    Each stratum is shuffled by its own seeded stream and cut at
    round(ratio * n); sources with fewer than 2 records go entirely to train.
    Record ids are preserved; per-source order within each partition is kept
    stable (sorted by record_id).
    """
    if not 0 < ratio < 1:
        raise ValueError(f"ratio must be in (0,1), got {ratio}")
    train: list[LogRecord] = []
    test: list[LogRecord] = []
    for source_ord, sid in enumerate(rs.source_ids):
        recs = rs.by_source(sid)
        if len(recs) < 2:
            log.warning("source %s has %d record(s); all go to train", sid, len(recs))
            train.extend(recs)
            continue
        strata: dict[int, list[LogRecord]] = {}
        for r in recs:
            code = -1 if r.gold_label is None else int(r.gold_label)
            strata.setdefault(code, []).append(r)
        for code in sorted(strata):
            group = strata[code]
            rng = _stratum_rng(seed, source_ord, code)
            perm = rng.permutation(len(group))
            n_train = int(round(ratio * len(group)))
            chosen = set(perm[:n_train].tolist())
            for i, r in enumerate(group):
                (train if i in chosen else test).append(r)
    train.sort(key=lambda r: r.record_id)
    test.sort(key=lambda r: r.record_id)
    return _reindex(train), _reindex(test)


def _reindex(records: list[LogRecord]) -> RecordSet:
    """Rebuild source_index (record_id ranges) and positional slices."""
    index: dict[str, tuple[int, int]] = {}
    positions: dict[str, tuple[int, int]] = {}
    for pos, r in enumerate(records):
        if r.source_id not in index:
            index[r.source_id] = (r.record_id, r.record_id + 1)
            positions[r.source_id] = (pos, pos + 1)
        else:
            index[r.source_id] = (index[r.source_id][0], r.record_id + 1)
            positions[r.source_id] = (positions[r.source_id][0], pos + 1)
    return RecordSet(records=records, source_index=index, _positions=positions)
