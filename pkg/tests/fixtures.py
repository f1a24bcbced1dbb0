"""Small random datasets and model configs shared by the model-level tests."""

import numpy as np

from dynbot.dyngraph import SECONDS_PER_DAY, SnapshotConfig, build_snapshots
from dynbot.model import Dataset, ModelConfig
from oracles import random_records

TINY = ModelConfig(hidden_dim=4, structural_layers=2, structural_heads=2, temporal_heads=2, head_hidden=3)


def random_dataset(rng, n=10, num_snapshots=3, m=30, feature_dim=3, relations=(0,)):
    """Random records spread over ``num_snapshots`` one-day windows, random labels, 6/2/2 split."""
    recs = random_records(rng, n, m, relations=relations, t_max=num_snapshots * SECONDS_PER_DAY)
    g = build_snapshots(recs, SnapshotConfig(interval=1, num_snapshots=num_snapshots), num_nodes=n)
    labels = rng.integers(0, 2, size=n)
    perm = rng.permutation(n)
    a, b = int(0.6 * n), int(0.8 * n)
    splits = {"train": np.sort(perm[:a]), "val": np.sort(perm[a:b]), "test": np.sort(perm[b:])}
    return Dataset(g, rng.normal(size=(n, feature_dim)), labels, splits)
