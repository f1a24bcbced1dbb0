"""End-to-end acceptance checks.  Each test records a one-line verdict."""

import csv
import io
import time

import numpy as np
import pytest

from dynbot import autodiff as ad
from dynbot import structural, temporal
from dynbot.autodiff import Tensor
from dynbot.cli import main
from dynbot.dyngraph import SnapshotConfig, build_snapshots, compute_metrics
from dynbot.model import Dataset, ModelConfig, TrainingConfig, bce_loss, evaluate, forward, init_params, predict, train
from dynbot.synth import SyntheticSpec, generate, threshold_baseline
from fixtures import TINY, random_dataset
from oracles import blr_bruteforce, lcc_bruteforce, random_records

SEEDS = (0, 1, 2, 3, 4)
ABLATED = ("no_temporal", "no_p_at", "no_p_lcc", "no_p_blr")
# smaller than the CLI defaults so five seeds of every variant fit the time budget
DESK = ModelConfig(hidden_dim=32, head_hidden=16)
DESK_FLAGS = ["--lr", "5e-3", "--hidden-dim", "32", "--head-hidden", "16"]


def desk_config(epochs, seed, ablation=()):
    return TrainingConfig(epochs=epochs, learning_rate=5e-3, seed=seed, ablation=frozenset(ablation), model=DESK)


def synthetic(spec):
    data = generate(spec)
    g = build_snapshots(data.records, spec.snapshot_config(), num_nodes=spec.num_nodes)
    return Dataset(g, data.features, data.labels, data.splits)


def test_criterion_1_gradient_fidelity(verdict):
    start = time.perf_counter()
    worst = 0.0
    for i in range(20):
        rng = np.random.default_rng(1000 + i)
        ds = random_dataset(rng, n=10, num_snapshots=3, m=int(rng.integers(15, 40)))
        batch = ds.batch(TINY)
        params = init_params(TINY, 3, 3, seed=i)
        for p in params.values():
            p.data = p.data + rng.normal(scale=0.3, size=p.shape)
        nodes = np.arange(10)

        def loss():
            return bce_loss(forward(batch, params, TINY).probs, ds.labels, nodes, batch.active)

        rep = ad.finite_difference_check(loss, params, h=1e-5, max_coords=24, seed=i)
        worst = max(worst, rep.max_rel_error)
    elapsed = time.perf_counter() - start
    ok = verdict(1, worst < 1e-4 and elapsed < 120, f"max rel error {worst:.2e} over 20 instances, {elapsed:.1f}s")
    assert ok


def test_criterion_2_metric_oracles(verdict):
    start = time.perf_counter()
    rng = np.random.default_rng(2)
    worst = 0.0
    for _ in range(200):
        n = int(rng.integers(2, 51))
        recs = random_records(rng, n, int(rng.integers(1, 4 * n)), relations=(0, 1))
        g = build_snapshots(recs, SnapshotConfig(interval=1e6), num_nodes=n)
        m = compute_metrics(g)
        edges = g.snapshots[0].edges
        for v in range(n):
            for got, want in ((m.lcc[0, v], lcc_bruteforce(edges, v)), (m.blr[0, v], blr_bruteforce(edges, v))):
                worst = max(worst, abs(got - want) / max(abs(want), 1e-300) if want else abs(got))
    elapsed = time.perf_counter() - start
    ok = verdict(2, worst <= 1e-12 and elapsed < 30, f"max rel error {worst:.1e} on 200 graphs, {elapsed:.1f}s")
    assert ok


def test_criterion_3_attention_normalization(verdict):
    rng = np.random.default_rng(3)
    worst = 0.0
    for i in range(100):
        n = int(rng.integers(3, 20))
        recs = random_records(rng, n, int(rng.integers(1, 3 * n)))
        snap = build_snapshots(recs, SnapshotConfig(interval=1e6), num_nodes=n).snapshots[0]
        scfg = structural.StructuralConfig(input_dim=3, hidden_dim=8, num_layers=2, num_heads=2)
        params = {k: Tensor(rng.normal(size=s)) for k, s in structural.param_names(scfg)}
        out = structural.forward_snapshot(Tensor(rng.normal(size=(n, 3))), snap, params, scfg, keep_attention=True)
        dst = out.edges[1]
        for layer in out.attention:
            for alpha in layer:
                sums = np.bincount(dst, weights=alpha, minlength=n)
                worst = max(worst, np.abs(sums - 1).max())

        T = int(rng.integers(1, 7))
        tcfg = temporal.TemporalConfig(model_dim=8, num_heads=2)
        tparams = {k: Tensor(rng.normal(size=s)) for k, s in temporal.param_names(tcfg, T)}
        active = np.sort(rng.random((5, T)) < 0.7, axis=1)  # once active, always active
        _, weights = temporal.temporal_attention(
            Tensor(rng.normal(size=(5, T, 8))), tparams, tcfg, temporal.causal_mask(T, active), keep_attention=True
        )
        sums = weights.sum(axis=-1)  # (5, D, T)
        rows = np.broadcast_to(active[:, None, :], sums.shape)
        if rows.any():
            worst = max(worst, np.abs(sums[rows] - 1).max())
    ok = verdict(3, worst <= 1e-9, f"max |sum - 1| {worst:.1e} over 100 instances")
    assert ok


def test_criterion_4_causality(verdict):
    rng = np.random.default_rng(4)
    failures = 0
    for _ in range(50):
        n, T = int(rng.integers(1, 8)), int(rng.integers(1, 7))
        cfg = temporal.TemporalConfig(model_dim=8, num_heads=int(rng.choice([1, 2, 4])))
        params = {k: Tensor(rng.normal(size=s)) for k, s in temporal.param_names(cfg, T)}
        active = rng.random((n, T)) < 0.8
        mask = temporal.causal_mask(T, active)
        s_hat = rng.normal(size=(n, T, 8))
        base = temporal.temporal_attention(Tensor(s_hat), params, cfg, mask)[0].data
        for k in range(T):
            pert = s_hat.copy()
            pert[:, k + 1 :] = rng.normal(scale=10.0, size=pert[:, k + 1 :].shape)
            z = temporal.temporal_attention(Tensor(pert), params, cfg, mask)[0].data
            failures += z[:, : k + 1].tobytes() != base[:, : k + 1].tobytes()
    ok = verdict(4, failures == 0, f"{failures} prefixes changed across 50 instances")
    assert ok


@pytest.mark.slow
def test_criterion_5_separable_learning(verdict):
    start = time.perf_counter()
    ds = synthetic(SyntheticSpec(num_humans=100, num_bots=100, num_snapshots=5, seed=0))
    cfg = desk_config(200, seed=0)
    res = train(ds, cfg)
    m = evaluate(predict(ds.batch(DESK), res.params, DESK), ds.labels, ds.splits["test"])
    elapsed = time.perf_counter() - start
    ok = verdict(5, m.accuracy >= 0.95 and elapsed < 300, f"test accuracy {m.accuracy:.3f}, {elapsed:.1f}s")
    assert ok


@pytest.fixture(scope="module")
def camouflage_runs():
    """Test metrics and wall time of the full model and every ablation per seed, plus the threshold baseline."""
    runs = {name: [] for name in ("full",) + ABLATED}
    seconds = dict.fromkeys(runs, 0.0)
    baseline = []
    for seed in SEEDS:
        ds = synthetic(SyntheticSpec(num_humans=200, num_bots=200, num_snapshots=6, camouflage=True, seed=seed))
        baseline.append(threshold_baseline(ds.metrics, ds.labels, ds.splits)[0].accuracy)
        batch = ds.batch(DESK)
        for name in runs:
            start = time.perf_counter()
            ablation = () if name == "full" else (name,)
            res = train(ds, desk_config(80, seed, ablation))
            pred = predict(batch, res.params, DESK, res.config.ablation)
            runs[name].append(evaluate(pred, ds.labels, ds.splits["test"]))
            seconds[name] += time.perf_counter() - start
    return runs, baseline, seconds


@pytest.mark.slow
def test_criterion_6_temporal_module_matters(verdict, camouflage_runs):
    runs, baseline, seconds = camouflage_runs
    full = np.mean([m.accuracy for m in runs["full"]])
    static = np.mean([m.accuracy for m in runs["no_temporal"]])
    base = float(np.mean(baseline))
    elapsed = seconds["full"] + seconds["no_temporal"]
    ok = full - static >= 0.10 and abs(base - 0.5) <= 0.10 and elapsed < 900
    assert verdict(
        6, ok,
        f"full {full:.3f} vs no_temporal {static:.3f}, threshold baseline {base:.3f} "
        f"(per seed {', '.join(f'{b:.3f}' for b in baseline)}), {elapsed:.0f}s",
    )


@pytest.mark.slow
def test_criterion_7_position_embeddings_matter(verdict, camouflage_runs):
    runs, _, _ = camouflage_runs
    full = np.mean([m.f1 for m in runs["full"]])
    ablated = {name: np.mean([m.f1 for m in runs[name]]) for name in ("no_p_at", "no_p_lcc", "no_p_blr")}
    ok = all(v < full for v in ablated.values())
    detail = f"mean F1 full {full:.3f}, " + ", ".join(f"{k} {v:.3f}" for k, v in ablated.items())
    assert verdict(7, ok, detail)


@pytest.mark.slow
def test_criterion_8_granularity(verdict, tmp_path, capsys):
    assert main(["synth", "--out", str(tmp_path / "data"), "--num-humans", "200", "--num-bots", "200",
                 "--num-snapshots", "6", "--camouflage", "--seed", "0"]) == 0
    capsys.readouterr()
    rc = main(["sweep-granularity", "--manifest", str(tmp_path / "data" / "manifest.txt"), "--seed", "0",
               "--intervals", "2190,1095,730,365", "--epochs", "80", *DESK_FLAGS])
    rows = list(csv.DictReader(io.StringIO(capsys.readouterr().out)))
    f1 = {int(r["num_snapshots"]): float(r["f1"]) for r in rows}
    ok = rc == 0 and sorted(f1) == [1, 2, 3, 6] and f1[1] < max(f1.values())
    assert verdict(8, ok, "F1 by snapshot count " + ", ".join(f"N={k}: {v:.3f}" for k, v in sorted(f1.items())))


def test_criterion_9_determinism(verdict, tmp_path, capsys):
    assert main(["synth", "--out", str(tmp_path / "data"), "--num-humans", "40", "--num-bots", "40",
                 "--num-snapshots", "4", "--cluster-size", "5", "--camouflage", "--seed", "5"]) == 0
    manifest = str(tmp_path / "data" / "manifest.txt")
    for run in ("a", "b"):
        assert main(["train", "--manifest", manifest, "--out", str(tmp_path / run), "--seed", "5",
                     "--epochs", "10", *DESK_FLAGS]) == 0
        assert main(["eval", "--manifest", manifest, "--out", str(tmp_path / run), "--baseline",
                     "--checkpoint", str(tmp_path / run / "checkpoint.bin")]) == 0
    capsys.readouterr()
    names = ("epoch_log.csv", "checkpoint.bin", "report.json", "config.json", "eval.json")
    same = [(tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes() for f in names]
    assert verdict(9, all(same), ", ".join(f"{f} {'identical' if s else 'DIFFERS'}" for f, s in zip(names, same)))
