"""Dataset files: manifest parsing, CSV ingest and export.

Layout (all CSV with a header row, UTF-8):

* interactions: ``source_id,target_id,relation,timestamp``
* features: ``node_id,f0,f1,...``
* labels: ``node_id,label`` with label ``human`` or ``bot``
* splits: ``node_id,split`` with split ``train``, ``val`` or ``test``

The manifest is a ``key = value`` text file; relative paths resolve against
the manifest's directory.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .dyngraph import FOLLOW, DynamicGraph, GraphError, SnapshotConfig, build_snapshots, compute_metrics
from .model import BOT, HUMAN, Dataset

LABELS = {"human": HUMAN, "bot": BOT}
SPLITS = ("train", "val", "test")
INTERACTION_HEADER = ["source_id", "target_id", "relation", "timestamp"]


class DatasetError(ValueError):
    """Invalid manifest or data file."""


@dataclass
class Manifest:
    interactions_path: Path
    features_path: Path
    labels_path: Path
    splits_path: Path
    relation_table: dict[str, int] = field(default_factory=lambda: {"follow": FOLLOW})
    snapshot: SnapshotConfig = field(default_factory=lambda: SnapshotConfig(interval=365.0))

    @property
    def follow_relation(self) -> int:
        return self.relation_table.get("follow", FOLLOW)

    def to_text(self, base: Path | None = None) -> str:
        def rel(p: Path) -> str:
            if base is not None:
                try:
                    return str(p.relative_to(base))
                except ValueError:
                    pass
            return str(p)

        snap = self.snapshot
        lines = [
            f"interactions = {rel(self.interactions_path)}",
            f"features = {rel(self.features_path)}",
            f"labels = {rel(self.labels_path)}",
            f"splits = {rel(self.splits_path)}",
            "relations = " + ",".join(f"{k}:{v}" for k, v in self.relation_table.items()),
            f"interval_days = {snap.interval:g}",
            f"origin = {snap.origin}",
            f"cumulative = {'true' if snap.cumulative else 'false'}",
        ]
        if snap.num_snapshots is not None:
            lines.append(f"num_snapshots = {snap.num_snapshots}")
        return "\n".join(lines) + "\n"

    def with_snapshot(self, **changes) -> "Manifest":
        return replace(self, snapshot=replace(self.snapshot, **changes))


def _parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise DatasetError(f"not a boolean: {text!r}")


def read_manifest(path) -> Manifest:
    path = Path(path)
    if not path.exists():
        raise DatasetError(f"manifest not found: {path}")
    values: dict[str, str] = {}
    for lineno, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise DatasetError(f"{path}:{lineno}: expected key = value")
        key, value = (part.strip() for part in line.split("=", 1))
        values[key] = value
    base = path.parent
    missing = [k for k in ("interactions", "features", "labels", "splits") if k not in values]
    if missing:
        raise DatasetError(f"{path}: missing keys {missing}")

    relations = {"follow": FOLLOW}
    if "relations" in values:
        relations = {}
        for item in values["relations"].split(","):
            name, _, code = item.partition(":")
            try:
                relations[name.strip()] = int(code)
            except ValueError:
                raise DatasetError(f"{path}: bad relation entry {item!r}") from None
    try:
        snap = SnapshotConfig(
            interval=float(values.get("interval_days", 365)),
            origin=int(values.get("origin", 0)),
            num_snapshots=int(values["num_snapshots"]) if values.get("num_snapshots") else None,
            cumulative=_parse_bool(values.get("cumulative", "true")),
        )
    except (GraphError, ValueError) as exc:
        raise DatasetError(f"{path}: {exc}") from None
    return Manifest(
        interactions_path=base / values["interactions"],
        features_path=base / values["features"],
        labels_path=base / values["labels"],
        splits_path=base / values["splits"],
        relation_table=relations,
        snapshot=snap,
    )


def _rows(path: Path, header: list[str] | None = None):
    if not path.exists():
        raise DatasetError(f"file not found: {path}")
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            head = next(reader)
        except StopIteration:
            raise DatasetError(f"{path}: empty file") from None
        head = [h.strip() for h in head]
        if header is not None and head != header:
            raise DatasetError(f"{path}:1: expected header {','.join(header)}, got {','.join(head)}")
        for lineno, row in enumerate(reader, 2):
            if not row or all(not c.strip() for c in row):
                continue
            yield lineno, head, [c.strip() for c in row]


def read_interactions(path: Path, relation_table: dict[str, int]) -> np.ndarray:
    """Rows of ``(source, target, timestamp, relation)`` as an int array."""
    out = []
    for lineno, _, row in _rows(path, INTERACTION_HEADER):
        if len(row) != 4:
            raise DatasetError(f"{path}:{lineno}: expected 4 fields, got {len(row)}")
        src, dst, relation, ts = row
        if relation not in relation_table:
            raise DatasetError(f"{path}:{lineno}: unknown relation {relation!r}")
        try:
            s, t, stamp = int(src), int(dst), int(ts)
        except ValueError:
            raise DatasetError(f"{path}:{lineno}: malformed row {','.join(row)!r}") from None
        if s < 0 or t < 0 or stamp < 0:
            raise DatasetError(f"{path}:{lineno}: negative id or timestamp")
        out.append((s, t, stamp, relation_table[relation]))
    return np.array(out, dtype=np.int64).reshape(-1, 4)


def read_features(path: Path) -> dict[int, np.ndarray]:
    feats: dict[int, np.ndarray] = {}
    width = None
    for lineno, head, row in _rows(path):
        if head[0] != "node_id":
            raise DatasetError(f"{path}:1: first column must be node_id")
        if len(row) != len(head):
            raise DatasetError(f"{path}:{lineno}: expected {len(head)} fields, got {len(row)}")
        try:
            node = int(row[0])
            vec = np.array([float(x) for x in row[1:]])
        except ValueError:
            raise DatasetError(f"{path}:{lineno}: malformed row") from None
        width = len(vec) if width is None else width
        feats[node] = vec
    return feats


def _read_keyed(path: Path, column: str, allowed) -> dict[int, str]:
    out = {}
    for lineno, _, row in _rows(path, ["node_id", column]):
        if len(row) != 2:
            raise DatasetError(f"{path}:{lineno}: expected 2 fields")
        try:
            node = int(row[0])
        except ValueError:
            raise DatasetError(f"{path}:{lineno}: malformed node id {row[0]!r}") from None
        if row[1] not in allowed:
            raise DatasetError(f"{path}:{lineno}: {column} must be one of {sorted(allowed)}, got {row[1]!r}")
        out[node] = row[1]
    return out


@dataclass
class IngestResult:
    graph: DynamicGraph
    features: np.ndarray
    labels: np.ndarray
    splits: dict[str, np.ndarray]
    records: np.ndarray
    manifest: Manifest

    def dataset(self) -> Dataset:
        return Dataset(
            self.graph, self.features, self.labels, self.splits,
            compute_metrics(self.graph, self.manifest.follow_relation),
        )

    def report_lines(self) -> list[str]:
        lines = list(self.graph.report.lines()) if self.graph.report else []
        lines.insert(0, f"nodes: {self.graph.num_nodes}, snapshots: {len(self.graph)}")
        lines.append(
            f"labels: {int((self.labels == HUMAN).sum())} human, {int((self.labels == BOT).sum())} bot"
        )
        lines.append("splits: " + ", ".join(f"{k}={len(v)}" for k, v in self.splits.items()))
        return lines


def ingest(manifest: Manifest | str | Path) -> IngestResult:
    if not isinstance(manifest, Manifest):
        manifest = read_manifest(manifest)
    records = read_interactions(manifest.interactions_path, manifest.relation_table)
    feats = read_features(manifest.features_path)
    labels_raw = _read_keyed(manifest.labels_path, "label", LABELS)
    splits_raw = _read_keyed(manifest.splits_path, "split", SPLITS)

    for node in labels_raw:
        if node not in feats:
            raise DatasetError(f"{manifest.labels_path}: label for node {node} which has no features")
    max_id = max(
        [int(records[:, :2].max()) if len(records) else -1]
        + list(feats)
        + list(labels_raw)
        + list(splits_raw)
    )
    n = max_id + 1
    width = len(next(iter(feats.values()))) if feats else 0
    features = np.zeros((n, width))
    for node, vec in feats.items():
        if len(vec) != width:
            raise DatasetError(f"{manifest.features_path}: node {node} has width {len(vec)}, expected {width}")
        features[node] = vec
    labels = np.full(n, -1, dtype=np.int64)
    for node, lab in labels_raw.items():
        labels[node] = LABELS[lab]
    splits = {
        name: np.array(sorted(k for k, v in splits_raw.items() if v == name), dtype=np.int64) for name in SPLITS
    }
    for name, nodes in splits.items():
        unl = nodes[labels[nodes] < 0]
        if len(unl):
            raise DatasetError(f"{manifest.splits_path}: node {int(unl[0])} in {name} split has no label")
    try:
        graph = build_snapshots(records, manifest.snapshot, num_nodes=n)
    except GraphError as exc:
        raise DatasetError(str(exc)) from None
    return IngestResult(graph, features, labels, splits, records, manifest)


def write_dataset(
    directory,
    records: np.ndarray,
    features: np.ndarray,
    labels: np.ndarray,
    splits: dict[str, np.ndarray],
    snapshot: SnapshotConfig,
    relation_table: dict[str, int] | None = None,
) -> Path:
    """Write the four CSV files plus ``manifest.txt``; returns the manifest path."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    relation_table = relation_table or {"follow": FOLLOW}
    names = {v: k for k, v in relation_table.items()}
    with open(directory / "interactions.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(INTERACTION_HEADER)
        for s, t, ts, r in np.asarray(records).tolist():
            w.writerow([s, t, names[r], ts])
    with open(directory / "features.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["node_id"] + [f"f{i}" for i in range(features.shape[1])])
        for node, vec in enumerate(features):
            w.writerow([node] + [repr(float(x)) for x in vec])
    inv = {v: k for k, v in LABELS.items()}
    with open(directory / "labels.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["node_id", "label"])
        for node, lab in enumerate(labels.tolist()):
            if lab >= 0:
                w.writerow([node, inv[lab]])
    rows = sorted((int(node), name) for name, nodes in splits.items() for node in nodes)
    with open(directory / "splits.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["node_id", "split"])
        w.writerows(rows)
    manifest = Manifest(
        directory / "interactions.csv",
        directory / "features.csv",
        directory / "labels.csv",
        directory / "splits.csv",
        dict(relation_table),
        snapshot,
    )
    path = directory / "manifest.txt"
    path.write_text(manifest.to_text(directory), encoding="utf-8")
    return path


def export(result: IngestResult, directory) -> Path:
    return write_dataset(
        directory, result.records, result.features, result.labels, result.splits,
        result.manifest.snapshot, result.manifest.relation_table,
    )
