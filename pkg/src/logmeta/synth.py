"""Seeded synthetic log corpus generator.

Each source has its own header format and normal-template vocabulary, while
anomaly templates share a skeleton across sources (a common error vocabulary)
so that cross-source label transfer and meta-learning have signal to exploit.
Two "hard normal" template families also recur across sources: benign
messages that borrow error-adjacent wording (zero error counts, recovered
faults). They make raw nearest-prototype classification genuinely hard
without being anomalies.

Generation is fully deterministic: source ordinal o of a corpus with seed s
draws everything from default_rng([s, o]).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .ingest import write_manifest, CorpusManifest, ManifestSource

log = logging.getLogger(__name__)

_MONTHS = ["Jan", "Feb", "Mar", "Apr", "May", "Jun",
           "Jul", "Aug", "Sep", "Oct", "Nov", "Dec"]
_DAYS = ["Mon", "Tue", "Wed", "Thu", "Fri", "Sat", "Sun"]

# Anomaly skeletons shared verbatim across sources (parameters vary), so a
# knowledge base built from any subset of sources labels the rest exactly.
ANOMALY_TEMPLATES = [
    "FATAL replication error: segment seg{id} lost after {n} retries",
    "Connection timeout: peer node-{id} unreachable for {n} ms",
    "Checksum corruption detected in chunk c{id} at offset {n}",
    "Service crash: worker w{id} aborted with exit code {n}",
]

# Benign templates that reuse error-adjacent vocabulary; shared across
# sources like the anomaly skeletons, but always Normal.
HARD_NORMAL_TEMPLATES = [
    "Health check passed: 0 errors and 0 timeouts over {n} requests",
    "Recovered from transient fault: retry {n} succeeded on node-{id}",
]


@dataclass
class SourceGrammar:
    source_id: str
    header: str  # key into ingest.HEADER_PATTERNS
    easy_normals: list[str]


_GRAMMARS = [
    SourceGrammar("hdfs_store", "hdfs", [
        "dfs.DataNode: Receiving block blk_{id} src /{ip} dest /{ip2}",
        "dfs.DataNode: PacketResponder {small} for block blk_{id} terminating",
        "dfs.FSNamesystem: BLOCK allocateBlock /user/job{small}/part-{n} blk_{id}",
        "dfs.DataNode: Served block blk_{id} to /{ip}",
        "dfs.DataNode: Verification succeeded for blk_{id}",
        "dfs.DataNode: Deleting block blk_{id} file /data/vol{small}/chunk_{n}.dat",
        "dfs.FSNamesystem: BLOCK ask /{ip} to replicate blk_{id} to /{ip2}",
        "dfs.DataNode: Starting thread to transfer block blk_{id} to /{ip}",
    ]),
    SourceGrammar("hadoop_rm", "hadoop", [
        "RMAuditLogger: USER={user} OPERATION=submit TARGET=ClientRMService "
        "RESULT=SUCCESS APPID=application_{id}",
        "CapacityScheduler: Added node node-{id}:{port} clusterResource memory:{n}",
        "RMContainerImpl: container_{id} Container Transitioned from ALLOCATED "
        "to ACQUIRED",
        "ResourceTrackerService: NodeManager from node node-{id} registered "
        "with capability memory:{n}",
        "AppSchedulingInfo: checking for deactivate of application "
        "application_{id}",
        "CapacityScheduler: Application attempt appattempt_{id} released "
        "container container_{n} on node node-{small}",
        "RMAppImpl: application_{id} State change from RUNNING to FINISHED",
        "ClientRMService: Allocated new applicationId {n}",
    ]),
    SourceGrammar("sys_auth", "syslog", [
        "sshd(pam_unix): session opened for user {user} by uid {small}",
        "sshd(pam_unix): session closed for user {user}",
        "su(pam_unix): session opened for user {user} by uid {small}",
        "cups: cupsd startup succeeded with pid {n}",
        "syslogd: restarted with mark interval {small} minutes",
        "kernel: usb {small}-{small2}: new high speed USB device using "
        "address {n}",
        "crond(pam_unix): session opened for user root by uid {small}",
        "xinetd: START: sgi_fam pid={n} from={ip}",
    ]),
    SourceGrammar("web_front", "apache", [
        "jk2_init() Found child {n} in scoreboard slot {small}",
        "workerEnv.init() ok /etc/httpd/conf/workers{small}.properties",
        "mod_jk child workerEnv in error state {small}",
        "Directory index forbidden by rule: /var/www/html{small}/",
        "child process {n} still did not exit sending a SIGTERM",
        "Accepted connection from {ip} port {port}",
        "caught SIGTERM shutting down gracefully after {n} requests",
        "Graceful restart requested doing restart sequence {small}",
    ]),
    SourceGrammar("app_core", "iso", [
        "orders.service: processed order ord{id} for customer cus{n} "
        "total {n2} cents",
        "cache.layer: evicted {n} entries from region {region} in {small} ms",
        "api.gateway: GET /v2/status/{small} completed with 200 in {n} ms",
        "scheduler: job job{id} enqueued on queue {region} priority {small}",
        "auth.token: issued bearer token for client cli{id} ttl {n} seconds",
        "db.pool: connection pool resized to {small} active {small2} idle",
        "metrics.flush: exported {n} datapoints to collector node-{small}",
        "deploy.hook: configuration version cfg{id} applied to stage {region}",
    ]),
    SourceGrammar("raw_events", "none", [
        "sensor dev{id} reading temperature {small} humidity {small2}",
        "gateway heartbeat sequence {n} uptime {n2} seconds",
        "firmware check device dev{id} version v2.{small}.{small2} is current",
        "battery level {small} percent on device dev{id}",
        "mesh route updated dev{id} next hop dev{n} metric {small}",
        "provisioning completed for device dev{id} in {n} ms",
        "telemetry batch {n} uploaded {n2} records",
        "radio channel switched to {small} rssi {n}",
    ]),
]

_USERS = ["root", "admin", "deploy", "svcbatch"]
_REGIONS = ["payments", "search", "billing", "ingest"]


def _fill(template: str, rng: np.random.Generator) -> str:
    """Substitute every placeholder with a seeded value."""
    subs = {
        "{id}": str(int(rng.integers(100, 99999))),
        "{n}": str(int(rng.integers(100, 9999))),
        "{n2}": str(int(rng.integers(100, 9999))),
        "{small}": str(int(rng.integers(0, 32))),
        "{small2}": str(int(rng.integers(0, 32))),
        "{port}": str(int(rng.integers(1024, 65535))),
        "{ip}": f"10.{int(rng.integers(0, 16))}.{int(rng.integers(0, 256))}."
                f"{int(rng.integers(1, 255))}",
        "{ip2}": f"10.{int(rng.integers(0, 16))}.{int(rng.integers(0, 256))}."
                 f"{int(rng.integers(1, 255))}",
        "{user}": _USERS[int(rng.integers(0, len(_USERS)))],
        "{region}": _REGIONS[int(rng.integers(0, len(_REGIONS)))],
    }
    out = template
    for key, value in subs.items():
        while key in out:
            out = out.replace(key, value, 1)
    return out


def _clock(base_seconds: int, line_idx: int) -> tuple[int, int, int]:
    total = (base_seconds + 3 * line_idx) % 86400
    return total // 3600, (total % 3600) // 60, total % 60


def _header_for(kind: str, line_idx: int, rng: np.random.Generator) -> str:
    if kind == "hdfs":
        h, m, s = _clock(73518, line_idx)
        return f"081109 {h:02d}{m:02d}{s:02d} {int(rng.integers(10, 4000))} INFO "
    if kind == "hadoop":
        h, m, s = _clock(64907, line_idx)
        ms = int(rng.integers(0, 1000))
        return f"2015-10-18 {h:02d}:{m:02d}:{s:02d},{ms:03d} INFO [main] "
    if kind == "syslog":
        h, m, s = _clock(54961, line_idx)
        return f"Jun 14 {h:02d}:{m:02d}:{s:02d} combo "
    if kind == "apache":
        h, m, s = _clock(21824, line_idx)
        return f"[Thu Jun 09 {h:02d}:{m:02d}:{s:02d} 2005] [notice] "
    if kind == "iso":
        h, m, s = _clock(16230, line_idx)
        ms = int(rng.integers(0, 1000))
        return f"2016-09-28 {h:02d}:{m:02d}:{s:02d}.{ms:03d} "
    if kind == "none":
        return ""
    raise ValueError(f"unknown header kind {kind!r}")


def _grammar_for(ordinal: int) -> SourceGrammar:
    base = _GRAMMARS[ordinal % len(_GRAMMARS)]
    if ordinal < len(_GRAMMARS):
        return base
    round_no = ordinal // len(_GRAMMARS) + 1
    return SourceGrammar(f"{base.source_id}_{round_no}", base.header,
                         base.easy_normals)


def generate_source(ordinal: int, per_source: int, imbalance: float,
                    seed: int, hard_rate: float = 0.12
                    ) -> tuple[SourceGrammar, list[str], list[int]]:
    """Generate one source's lines and gold labels (1 = anomaly).

    The first lines introduce every template family once, in a per-source
    shuffled order, so that template creation order (and with it any
    downstream template-id numbering) is uncorrelated with the label across
    sources. The remaining lines follow the requested imbalance.
    """
    grammar = _grammar_for(ordinal)
    rng = np.random.default_rng([seed, ordinal])
    n_anom = max(1, int(round(per_source / (imbalance + 1.0))))
    n_anom = min(n_anom, per_source - 1)

    families = ([("easy", t) for t in grammar.easy_normals]
                + [("hard", t) for t in HARD_NORMAL_TEMPLATES]
                + [("anom", t) for t in ANOMALY_TEMPLATES])
    order = rng.permutation(len(families))
    preamble = [families[i] for i in order][:per_source]
    n_anom_pre = sum(1 for kind, _ in preamble if kind == "anom")
    n_rest = per_source - len(preamble)
    n_anom_rest = max(0, n_anom - n_anom_pre)
    n_anom_rest = min(n_anom_rest, n_rest)
    anomaly_rows = set(
        int(i) for i in rng.choice(n_rest, size=n_anom_rest, replace=False)
    ) if n_rest else set()

    lines, labels = [], []
    for kind, template in preamble:
        message = _fill(template, rng)
        lines.append(_header_for(grammar.header, len(lines), rng) + message)
        labels.append(1 if kind == "anom" else 0)
    for idx in range(n_rest):
        if idx in anomaly_rows:
            template = ANOMALY_TEMPLATES[int(rng.integers(0, len(ANOMALY_TEMPLATES)))]
            label = 1
        elif rng.uniform() < hard_rate:
            template = HARD_NORMAL_TEMPLATES[
                int(rng.integers(0, len(HARD_NORMAL_TEMPLATES)))]
            label = 0
        else:
            weights = np.arange(len(grammar.easy_normals), 0, -1.0)
            weights /= weights.sum()
            template = grammar.easy_normals[
                int(rng.choice(len(grammar.easy_normals), p=weights))]
            label = 0
        message = _fill(template, rng)
        lines.append(_header_for(grammar.header, len(lines), rng) + message)
        labels.append(label)
    return grammar, lines, labels


def generate_corpus(out_dir, sources: int = 6, per_source: int = 1000,
                    imbalance: float = 50.0, seed: int = 0,
                    hard_rate: float = 0.12) -> Path:
    """Write per-source log files, gold label sidecars, and a manifest.

    Returns the manifest path. Repeated calls with identical arguments
    produce byte-identical files.
    """
    if sources < 2:
        raise ValueError("need at least 2 sources")
    if per_source < 2:
        raise ValueError("need at least 2 lines per source")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest_sources = []
    for ordinal in range(sources):
        grammar, lines, labels = generate_source(
            ordinal, per_source, imbalance, seed, hard_rate)
        log_path = out / f"{grammar.source_id}.log"
        label_path = out / f"{grammar.source_id}_labels.csv"
        with open(log_path, "w", encoding="utf-8") as fh:
            fh.write("\n".join(lines) + "\n")
        with open(label_path, "w", encoding="utf-8") as fh:
            fh.write("record_index,label\n")
            for i, lab in enumerate(labels):
                fh.write(f"{i},{lab}\n")
        manifest_sources.append(ManifestSource(
            source_id=grammar.source_id,
            file_path=log_path,
            header=grammar.header,
            label_path=label_path,
            expected_count=per_source))
        log.info("source %s: %d lines, %d anomalies",
                 grammar.source_id, len(lines), sum(labels))
    manifest_path = out / "manifest.cfg"
    write_manifest(CorpusManifest(sources=manifest_sources, seed=seed),
                   manifest_path)
    return manifest_path
