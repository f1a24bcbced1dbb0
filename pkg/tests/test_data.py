import numpy as np
import pytest

from dynbot.data import DatasetError, export, ingest, read_manifest, write_dataset
from dynbot.dyngraph import SECONDS_PER_DAY, SnapshotConfig
from dynbot.model import BOT, HUMAN


def write_minimal(tmp_path, interactions="0,1,follow,0\n", extra_manifest=""):
    (tmp_path / "interactions.csv").write_text("source_id,target_id,relation,timestamp\n" + interactions)
    (tmp_path / "features.csv").write_text("node_id,f0,f1\n0,1.0,0.5\n1,0.0,2.0\n")
    (tmp_path / "labels.csv").write_text("node_id,label\n0,human\n1,bot\n")
    (tmp_path / "splits.csv").write_text("node_id,split\n0,train\n1,test\n")
    path = tmp_path / "manifest.txt"
    path.write_text(
        "# two accounts\n"
        "interactions = interactions.csv\nfeatures = features.csv\n"
        "labels = labels.csv\nsplits = splits.csv\n" + extra_manifest
    )
    return path


def test_minimal_dataset(tmp_path):
    res = ingest(write_minimal(tmp_path))
    assert res.graph.num_nodes == 2 and len(res.graph) == 1
    assert res.labels.tolist() == [HUMAN, BOT]
    np.testing.assert_array_equal(res.features, [[1.0, 0.5], [0.0, 2.0]])
    assert res.splits["train"].tolist() == [0] and res.splits["val"].tolist() == []
    assert res.graph.snapshots[0].num_edges == 1
    assert "nodes: 2, snapshots: 1" in res.report_lines()


def test_unknown_relation_cites_line(tmp_path):
    path = write_minimal(tmp_path, "0,1,follow,0\n1,0,retweet,5\n")
    with pytest.raises(DatasetError, match=r"interactions.csv:3: unknown relation 'retweet'"):
        ingest(path)


def test_relation_table_from_manifest(tmp_path):
    path = write_minimal(tmp_path, "0,1,follow,0\n1,0,retweet,5\n", "relations = follow:0,retweet:1\n")
    res = ingest(path)
    assert sorted(res.records[:, 3].tolist()) == [0, 1]
    m = res.dataset().metrics
    # the retweet back does not make the follow bidirectional
    assert m.blr[0, 0] == 0.0


@pytest.mark.parametrize(
    "interactions, message",
    [
        ("0,1,follow\n", "expected 4 fields"),
        ("0,x,follow,3\n", "malformed row"),
        ("0,1,follow,-5\n", "negative"),
        ("1,1,follow,0\n", "self-loop"),
    ],
)
def test_bad_interaction_rows(tmp_path, interactions, message):
    with pytest.raises(DatasetError, match=message):
        ingest(write_minimal(tmp_path, interactions))


def test_bad_header_and_labels(tmp_path):
    path = write_minimal(tmp_path)
    (tmp_path / "labels.csv").write_text("node_id,label\n0,human\n1,robot\n")
    with pytest.raises(DatasetError, match="labels.csv:3"):
        ingest(path)
    (tmp_path / "labels.csv").write_text("node_id,label\n0,human\n")
    with pytest.raises(DatasetError, match="node 1 in test split has no label"):
        ingest(path)
    (tmp_path / "interactions.csv").write_text("src,dst,rel,ts\n0,1,follow,0\n")
    with pytest.raises(DatasetError, match="expected header"):
        ingest(path)


def test_manifest_errors(tmp_path):
    with pytest.raises(DatasetError, match="not found"):
        read_manifest(tmp_path / "nope.txt")
    bad = tmp_path / "m.txt"
    bad.write_text("interactions = a.csv\n")
    with pytest.raises(DatasetError, match="missing keys"):
        read_manifest(bad)
    path = write_minimal(tmp_path, extra_manifest="interval_days = 0\n")
    with pytest.raises(DatasetError):
        read_manifest(path)


def test_manifest_snapshot_settings(tmp_path):
    path = write_minimal(tmp_path, extra_manifest="interval_days = 30\nnum_snapshots = 4\ncumulative = false\n")
    m = read_manifest(path)
    assert m.snapshot == SnapshotConfig(interval=30, num_snapshots=4, cumulative=False)
    assert len(ingest(m).graph) == 4


def test_roundtrip_ingest_export_ingest(tmp_path):
    rng = np.random.default_rng(0)
    n = 12
    recs = []
    while len(recs) < 40:
        s, t = rng.integers(0, n, size=2)
        if s != t:
            recs.append((s, t, int(rng.integers(0, 900 * SECONDS_PER_DAY)), int(rng.integers(0, 2))))
    labels = rng.integers(0, 2, size=n)
    splits = {"train": np.arange(0, 8), "val": np.arange(8, 10), "test": np.arange(10, 12)}
    snap = SnapshotConfig(interval=365)
    path = write_dataset(tmp_path / "a", np.array(recs), rng.normal(size=(n, 3)), labels, splits, snap,
                         {"follow": 0, "mention": 1})
    first = ingest(path)
    second = ingest(export(first, tmp_path / "b"))
    assert first.graph == second.graph
    np.testing.assert_array_equal(first.features, second.features)
    np.testing.assert_array_equal(first.labels, second.labels)
    for name in splits:
        np.testing.assert_array_equal(first.splits[name], second.splits[name])
    assert (tmp_path / "a" / "interactions.csv").read_bytes() == (tmp_path / "b" / "interactions.csv").read_bytes()
