"""Synthetic dynamic social graphs with known bot/human structure.

Humans live in tight clusters of mutual follows formed in the first window.
Without camouflage, bots follow ``bot_out_degree`` random accounts per window
and are followed back only at ``reciprocity_bot``.

With ``camouflage`` every account except the ``unreciprocated`` bots also adds
``bot_out_degree`` random follows in the last window, followed back at the
human rate.  The final cumulative graph is then drawn from the human process
for bots as well, and only the timing of edges differs.  Bots come in three
kinds, each leaving a trace in one part of the history:

* ``late_clique``: followed back like humans, but their group is triangle-free
  (bipartite) until the last window, so clustering is zero before it.
* ``unreciprocated``: a clustered group and human-like degree from the start,
  but no follow-backs until the last window.
* ``late_join``: human-like from the moment they appear, but they appear
  partway through the history.

The matching degree relies on ``bot_out_degree`` being close to
``(human_cluster_size - 1) * reciprocity_human``, which holds for the
defaults.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import write_dataset
from .dyngraph import FOLLOW, SECONDS_PER_DAY, SnapshotConfig, SnapshotMetrics
from .model import BOT, HUMAN, Metrics, confusion_metrics

BOT_KINDS = ("late_clique", "unreciprocated", "late_join")


@dataclass(frozen=True)
class SyntheticSpec:
    num_humans: int = 100
    num_bots: int = 100
    num_snapshots: int = 5
    human_cluster_size: int = 8
    bot_out_degree: int = 6
    reciprocity_human: float = 0.9
    reciprocity_bot: float = 0.05
    camouflage: bool = False
    seed: int = 0
    human_random_follows: float = 0.0  # extra random follows per account per window
    feature_dim: int = 8
    interval_days: int = 365
    split_fractions: tuple[float, float, float] = (0.7, 0.1, 0.2)

    def __post_init__(self):
        for name in ("num_humans", "num_bots", "num_snapshots", "human_cluster_size", "feature_dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        for name in ("reciprocity_human", "reciprocity_bot"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must be a probability")
        if self.bot_out_degree < 0 or self.human_random_follows < 0:
            raise ValueError("follow counts must be non-negative")
        if self.human_cluster_size > self.num_humans:
            raise ValueError(
                f"human_cluster_size {self.human_cluster_size} exceeds num_humans {self.num_humans}"
            )

    @property
    def num_nodes(self) -> int:
        return self.num_humans + self.num_bots

    def snapshot_config(self) -> SnapshotConfig:
        return SnapshotConfig(interval=self.interval_days, origin=0, num_snapshots=self.num_snapshots)


@dataclass
class SyntheticData:
    records: np.ndarray  # (R, 4): source, target, timestamp, relation
    features: np.ndarray
    labels: np.ndarray
    splits: dict[str, np.ndarray]
    clusters: list[np.ndarray]
    spec: SyntheticSpec
    bot_kind: dict[int, str] | None = None


class _Edges:
    def __init__(self, spec: SyntheticSpec, rng: np.random.Generator):
        self.rows: list[tuple[int, int, int, int]] = []
        self.rng = rng
        self.step = spec.interval_days * SECONDS_PER_DAY

        self.followers: dict[int, set[int]] = {}

    def add(self, s: int, t: int, window: int):
        ts = window * self.step + int(self.rng.integers(1, self.step))
        self.rows.append((s, t, ts, FOLLOW))
        self.followers.setdefault(t, set()).add(s)

    def tie(self, a: int, b: int, window: int, p_back: float, back_window: int | None = None):
        """Follow in a random direction, returned with probability ``p_back``."""
        if self.rng.random() < 0.5:
            a, b = b, a
        self.add(a, b, window)
        if self.rng.random() < p_back:
            self.add(b, a, window if back_window is None else back_window)


def _groups(members: np.ndarray, size: int) -> list[np.ndarray]:
    count = max(1, len(members) // size)
    return [members[i::count] for i in range(count)] if len(members) else []


def generate(spec: SyntheticSpec) -> SyntheticData:
    rng = np.random.default_rng(spec.seed)
    n, N = spec.num_nodes, spec.num_snapshots
    ids = rng.permutation(n)
    humans, bots = np.sort(ids[: spec.num_humans]), np.sort(ids[spec.num_humans :])
    labels = np.full(n, HUMAN, dtype=np.int64)
    labels[bots] = BOT
    last = N - 1
    rho = spec.reciprocity_human
    edges = _Edges(spec, rng)

    clusters = _groups(rng.permutation(humans), spec.human_cluster_size)
    for members in clusters:
        for i, a in enumerate(members.tolist()):
            for b in members[i + 1 :].tolist():
                edges.tie(a, b, 0, rho)

    camouflaged = spec.camouflage and N > 1
    kind: dict[int, str] = {}
    born = np.zeros(n, dtype=np.int64)
    bot_groups: list[tuple[str, np.ndarray, int]] = []
    if camouflaged:
        # grouped exactly like humans so group sizes match
        for j, group in enumerate(_groups(rng.permutation(bots), spec.human_cluster_size)):
            name = BOT_KINDS[j % len(BOT_KINDS)]
            start = int(rng.integers(1, N)) if name == "late_join" else 0
            born[group] = start
            bot_groups.append((name, group, start))
            kind.update({int(b): name for b in group})

    def targets(src: int, count: int, window: int, fresh: bool = False) -> list[int]:
        pool = np.flatnonzero(born <= window)
        pool = pool[pool != src]
        if fresh:
            # skip accounts already following src so follow-backs only come from the reciprocity draw
            known = edges.followers.get(src, ())
            pool = pool[~np.isin(pool, list(known))]
        count = min(int(count), len(pool))
        return [int(t) for t in rng.choice(pool, size=count, replace=False)] if count > 0 else []

    if camouflaged:
        top_up = (rho - spec.reciprocity_bot) / max(1e-12, 1.0 - spec.reciprocity_bot)
        for name, group, start in bot_groups:
            members = group.tolist()
            if name == "late_clique":
                half = set(members[: (len(members) + 1) // 2])
                for i, a in enumerate(members):
                    for b in members[i + 1 :]:
                        edges.tie(a, b, last if (a in half) == (b in half) else 0, rho)
            elif name == "unreciprocated":
                for i, a in enumerate(members):
                    for b in members[i + 1 :]:
                        edges.tie(a, b, 0, rho, back_window=last)
                for b in members:
                    # targets may join later; the follow then waits for them
                    for t in targets(b, spec.bot_out_degree, last):
                        w = int(born[t])
                        edges.add(b, t, w)
                        if rng.random() < spec.reciprocity_bot:
                            edges.add(t, b, w)
                        elif rng.random() < top_up:
                            edges.add(t, b, last)
            else:
                for i, a in enumerate(members):
                    for b in members[i + 1 :]:
                        edges.tie(a, b, start, rho)
    else:
        for w in range(N):
            for b in bots.tolist():
                for t in targets(b, spec.bot_out_degree, w, fresh=True):
                    edges.add(b, t, w)
                    if rng.random() < spec.reciprocity_bot:
                        edges.add(t, b, w)

    if camouflaged:
        # human-style random follows in the last window, so final degrees match
        surge = humans.tolist() + [b for b in bots.tolist() if kind[b] != "unreciprocated"]
        for h in sorted(surge):
            for t in targets(h, spec.bot_out_degree, last):
                edges.add(h, t, last)
                if rng.random() < rho:
                    edges.add(t, h, last)

    if spec.human_random_follows > 0:
        for w in range(N):
            for v in range(n):
                if born[v] > w:
                    continue
                for t in targets(v, rng.poisson(spec.human_random_follows), w):
                    edges.add(v, t, w)
                    p = spec.reciprocity_bot if labels[v] == BOT and not camouflaged else rho
                    if rng.random() < p:
                        edges.add(t, v, w)

    records = np.array(edges.rows, dtype=np.int64).reshape(-1, 4)
    records = records[np.lexsort((records[:, 1], records[:, 0], records[:, 2]))]
    # profile features carry no signal; random ones would let the encoder
    # memorize identities and read labels off same-class neighbors
    features = np.ones((n, spec.feature_dim))
    splits = _stratified_splits(rng, labels, spec.split_fractions)
    return SyntheticData(records, features, labels, splits, clusters, spec, kind or None)


def _stratified_splits(rng, labels, fractions) -> dict[str, np.ndarray]:
    out = {"train": [], "val": [], "test": []}
    for cls in (HUMAN, BOT):
        members = rng.permutation(np.flatnonzero(labels == cls))
        n_train = int(round(fractions[0] * len(members)))
        n_val = int(round(fractions[1] * len(members)))
        out["train"].extend(members[:n_train].tolist())
        out["val"].extend(members[n_train : n_train + n_val].tolist())
        out["test"].extend(members[n_train + n_val :].tolist())
    return {k: np.array(sorted(v), dtype=np.int64) for k, v in out.items()}


def synth_generate(spec: SyntheticSpec, directory) -> Path:
    """Generate and write a dataset; returns the manifest path."""
    data = generate(spec)
    return write_dataset(directory, data.records, data.features, data.labels, data.splits, spec.snapshot_config())


def threshold_baseline(
    metrics: SnapshotMetrics, labels: np.ndarray, splits: dict[str, np.ndarray], at_snapshot: int = -1
) -> tuple[Metrics, str]:
    """Best single-feature threshold rule on one snapshot's degree, LCC or BLR.

    The feature, cut point and direction are chosen on the train split and
    scored on the test split.
    """
    k = at_snapshot
    table = {
        "degree": metrics.degree_total[k].astype(float),
        "lcc": metrics.lcc[k],
        "blr": metrics.blr[k],
    }
    train, test = splits["train"], splits["test"]
    y_train = labels[train] == BOT
    best = (-1.0, "degree", 0.0, True)
    for name, values in table.items():
        v = values[train]
        cuts = np.unique(v)
        cuts = np.concatenate([cuts, [cuts[-1] + 1.0]]) if len(cuts) else np.array([0.0])
        for cut in cuts:
            for below_is_bot in (True, False):
                pred = (v < cut) if below_is_bot else (v >= cut)
                acc = float((pred == y_train).mean())
                if acc > best[0]:
                    best = (acc, name, float(cut), below_is_bot)
    _, name, cut, below_is_bot = best
    v = table[name][test]
    pred = (v < cut) if below_is_bot else (v >= cut)
    rule = f"{name} {'<' if below_is_bot else '>='} {cut:g} -> bot"
    return confusion_metrics(pred, labels[test] == BOT), rule
