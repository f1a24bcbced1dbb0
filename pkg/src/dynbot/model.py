"""End-to-end bot/human classifier over a dynamic graph.

Structural encoding per snapshot, fusion with position embeddings, causal
temporal attention per node, and a two-layer softmax head.  ``train`` runs
full-batch epochs and keeps the parameters with the best validation F1.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import autodiff as ad
from . import structural, temporal
from .autodiff import Tensor
from .dyngraph import DynamicGraph, SnapshotMetrics, compute_metrics

ABLATIONS = ("no_temporal", "no_p_at", "no_p_lcc", "no_p_blr")
EPS = 1e-12
HUMAN, BOT = 0, 1


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int, loss: float):
        super().__init__(f"training diverged at epoch {epoch} (loss={loss})")
        self.epoch = epoch


@dataclass(frozen=True)
class ModelConfig:
    hidden_dim: int = 64
    structural_layers: int = 2
    structural_heads: int = 4
    temporal_heads: int = 4
    head_hidden: int = 32
    bucket_count: int = temporal.DEFAULT_BUCKETS
    slope: float = ad.DEFAULT_SLOPE
    self_loops: bool = True
    residual: bool = False
    layer_norm: bool = False

    def structural(self, input_dim: int) -> structural.StructuralConfig:
        return structural.StructuralConfig(
            input_dim=input_dim,
            hidden_dim=self.hidden_dim,
            num_layers=self.structural_layers,
            num_heads=self.structural_heads,
            slope=self.slope,
            self_loops=self.self_loops,
            residual=self.residual,
            layer_norm=self.layer_norm,
        )

    def temporal(self) -> temporal.TemporalConfig:
        return temporal.TemporalConfig(self.hidden_dim, self.temporal_heads, self.bucket_count)


@dataclass(frozen=True)
class TrainingConfig:
    epochs: int = 200
    learning_rate: float = 1e-3
    weight_decay: float = 1e-5
    seed: int = 0
    optimizer: str = "adam"
    loss_scope: str = "all"
    ablation: frozenset = frozenset()
    model: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.loss_scope not in ("all", "final"):
            raise ValueError(f"unknown loss scope {self.loss_scope!r}")
        object.__setattr__(self, "ablation", frozenset(self.ablation))
        unknown = self.ablation - set(ABLATIONS)
        if unknown:
            raise ValueError(f"unknown ablation(s): {sorted(unknown)}")

    def describe(self) -> dict:
        d = asdict(self)
        d["ablation"] = sorted(self.ablation)
        return d


# ---------------------------------------------------------------- parameters


def param_shapes(config: ModelConfig, input_dim: int, num_snapshots: int) -> list[tuple[str, tuple[int, ...]]]:
    F, H = config.hidden_dim, config.head_hidden
    return (
        structural.param_names(config.structural(input_dim))
        + temporal.param_names(config.temporal(), num_snapshots)
        + [("head.W_1", (H, F)), ("head.b_1", (H,)), ("head.W_2", (2, H)), ("head.b_2", (2,))]
    )


def init_params(config: ModelConfig, input_dim: int, num_snapshots: int, seed: int = 0) -> dict[str, Tensor]:
    """Glorot-uniform matrices, zero biases, N(0, 0.02) embedding tables."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_shapes(config, input_dim, num_snapshots):
        leaf = name.rsplit(".", 1)[1]
        if leaf.startswith("b"):
            value = np.zeros(shape)
        elif leaf.startswith("E_"):
            value = rng.normal(0.0, 0.02, size=shape)
        else:
            bound = math.sqrt(6.0 / (shape[0] + shape[1]))
            value = rng.uniform(-bound, bound, size=shape)
        params[name] = Tensor(value, requires_grad=True, name=name)
    return params


def copy_params(params: dict[str, Tensor]) -> dict[str, Tensor]:
    return {k: Tensor(v.data.copy(), requires_grad=True, name=k) for k, v in params.items()}


# ---------------------------------------------------------------- inputs


@dataclass
class GraphBatch:
    """Model-ready arrays for one dynamic graph."""

    num_nodes: int
    num_snapshots: int
    features: np.ndarray  # (N * n, input_dim), snapshot-major
    edges: tuple[np.ndarray, np.ndarray]
    active: np.ndarray  # (n, N) bool
    lcc_buckets: np.ndarray  # (n, N)
    blr_buckets: np.ndarray  # (n, N)

    @property
    def input_dim(self) -> int:
        return self.features.shape[1]

    @property
    def edge_plans(self) -> tuple[ad.Segments, ad.Segments]:
        plans = self.__dict__.get("_plans")
        if plans is None:
            plans = structural.edge_plans(self.edges, self.num_nodes * self.num_snapshots)
            self.__dict__["_plans"] = plans
        return plans


def prepare_batch(
    graph: DynamicGraph,
    features: np.ndarray,
    metrics: SnapshotMetrics | None = None,
    bucket_count: int = temporal.DEFAULT_BUCKETS,
    self_loops: bool = True,
) -> GraphBatch:
    """Stack snapshots block-diagonally.  Static ``(n, F_in)`` features are replicated per snapshot."""
    n, N = graph.num_nodes, len(graph.snapshots)
    features = np.asarray(features, dtype=float)
    if features.ndim == 2:
        if features.shape[0] != n:
            raise ValueError(f"features have {features.shape[0]} rows for {n} nodes")
        features = np.broadcast_to(features, (N,) + features.shape)
    elif features.shape[:2] != (N, n):
        raise ValueError(f"per-snapshot features must be shaped ({N}, {n}, F), got {features.shape}")
    if metrics is None:
        metrics = compute_metrics(graph)
    srcs, dsts = [], []
    for k, snap in enumerate(graph.snapshots):
        s, d = structural.message_edges(snap, self_loops, offset=k * n)
        srcs.append(s)
        dsts.append(d)
    return GraphBatch(
        num_nodes=n,
        num_snapshots=N,
        features=np.ascontiguousarray(features.reshape(N * n, -1)),
        edges=(np.concatenate(srcs), np.concatenate(dsts)),
        active=graph.active_matrix().T.copy(),
        lcc_buckets=temporal.bucketize_array(metrics.lcc, bucket_count).T.copy(),
        blr_buckets=temporal.bucketize_array(metrics.blr, bucket_count).T.copy(),
    )


# ---------------------------------------------------------------- forward


@dataclass
class ForwardResult:
    probs: Tensor  # (n, N, 2): (p_human, p_bot)
    z: Tensor  # (n, N, F) classifier inputs
    s: Tensor  # (n, N, d) structural outputs
    s_hat: Tensor | None
    attention: np.ndarray | None  # (n, D, N, N)
    active: np.ndarray


def classify(z: Tensor, params: dict[str, Tensor], slope: float = ad.DEFAULT_SLOPE) -> Tensor:
    """softmax(W_2 . sigma(W_1 . z + b_1) + b_2) over the last axis."""
    hidden = ad.leaky_relu(ad.matmul(z, ad.transpose(params["head.W_1"])) + params["head.b_1"], slope)
    logits = ad.matmul(hidden, ad.transpose(params["head.W_2"])) + params["head.b_2"]
    return ad.softmax_rows(logits)


def forward(
    batch: GraphBatch,
    params: dict[str, Tensor],
    config: ModelConfig,
    ablation=frozenset(),
    keep_attention: bool = False,
) -> ForwardResult:
    n, N = batch.num_nodes, batch.num_snapshots
    scfg = config.structural(batch.input_dim)
    x = Tensor(batch.features)
    st = structural.forward(x, batch.edge_plans, params, scfg)
    active_rows = batch.active.T.reshape(-1).astype(float)[:, None]
    s = ad.transpose(ad.reshape(st.s * active_rows, (N, n, config.hidden_dim)), (1, 0, 2))

    if "no_temporal" in ablation:
        return ForwardResult(classify(s, params, config.slope), s, s, None, None, batch.active)

    emb = temporal.embedding_sum(
        params,
        batch.lcc_buckets,
        batch.blr_buckets,
        use_at="no_p_at" not in ablation,
        use_lcc="no_p_lcc" not in ablation,
        use_blr="no_p_blr" not in ablation,
    )
    s_hat = s if emb is None else temporal.fuse_inputs(s, emb * batch.active[:, :, None].astype(float))
    mask = temporal.causal_mask(N, batch.active)
    z, att = temporal.temporal_attention(s_hat, params, config.temporal(), mask, keep_attention)
    return ForwardResult(classify(z, params, config.slope), z, s, s_hat, att, batch.active)


# ---------------------------------------------------------------- predictions, loss, metrics


@dataclass
class Prediction:
    probs: np.ndarray  # (n, N, 2)
    active: np.ndarray  # (n, N)

    @property
    def labels(self) -> np.ndarray:
        """Argmax per (node, snapshot); an exact tie goes to bot."""
        return (self.probs[..., BOT] >= self.probs[..., HUMAN]).astype(np.int64)


def _scored_pairs(active: np.ndarray, nodes: np.ndarray, scope) -> list[tuple[int, np.ndarray]]:
    N = active.shape[1]
    if scope == "all":
        ks = range(N)
    elif scope == "final":
        ks = [N - 1]
    else:
        ks = [int(scope)]
    out = []
    for k in ks:
        who = nodes[active[nodes, k]]
        if len(who):
            out.append((k, who))
    return out


def bce_loss(probs: Tensor, labels: np.ndarray, nodes, active: np.ndarray, scope="all") -> Tensor:
    """Negated binary cross-entropy on the bot probability.

    Each scored snapshot contributes the mean over its active ``nodes``; the
    loss is the mean of those per-snapshot means.  ``scope`` is ``"all"``,
    ``"final"`` or a snapshot index.
    """
    nodes = np.asarray(nodes, dtype=np.int64)
    labels = np.asarray(labels)
    missing = nodes[labels[nodes] < 0]
    if len(missing):
        raise ValueError(f"missing label for node {int(missing[0])}")
    pairs = _scored_pairs(active, nodes, scope)
    if not pairs:
        raise ValueError("no active labelled nodes in loss scope")
    n, N, _ = probs.shape
    flat, y, w = [], [], []
    for k, who in pairs:
        flat.append((who * N + k) * 2 + BOT)
        y.append(labels[who].astype(float))
        w.append(np.full(len(who), 1.0 / (len(who) * len(pairs))))
    flat, y, w = np.concatenate(flat), np.concatenate(y), np.concatenate(w)
    p = ad.clip(ad.take(probs, flat), EPS, 1.0 - EPS)
    ll = ad.mul(ad.log(p), y) + ad.mul(ad.log(1.0 - p), 1.0 - y)
    return ad.scale(ad.sum(ad.mul(ll, w)), -1.0)


@dataclass
class Metrics:
    accuracy: float
    precision: float
    recall: float
    f1: float
    tp: int
    fp: int
    tn: int
    fn: int

    @classmethod
    def from_counts(cls, tp: int, fp: int, tn: int, fn: int) -> "Metrics":
        total = tp + fp + tn + fn
        precision = tp / (tp + fp) if tp + fp else 0.0
        recall = tp / (tp + fn) if tp + fn else 0.0
        f1 = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
        return cls((tp + tn) / total, precision, recall, f1, tp, fp, tn, fn)

    def as_dict(self) -> dict:
        return asdict(self)


def confusion_metrics(predicted: np.ndarray, truth: np.ndarray) -> Metrics:
    predicted, truth = np.asarray(predicted).astype(bool), np.asarray(truth).astype(bool)
    tp = int((predicted & truth).sum())
    fp = int((predicted & ~truth).sum())
    tn = int((~predicted & ~truth).sum())
    fn = int((~predicted & truth).sum())
    return Metrics.from_counts(tp, fp, tn, fn)


def evaluate(prediction: Prediction, labels: np.ndarray, nodes, at_snapshot: int = -1) -> Metrics:
    nodes = np.asarray(nodes, dtype=np.int64)
    if len(nodes) == 0:
        raise ValueError("cannot evaluate an empty split")
    k = at_snapshot % prediction.probs.shape[1]
    inactive = nodes[~prediction.active[nodes, k]]
    if len(inactive):
        raise ValueError(f"node {int(inactive[0])} is not active at snapshot {k}")
    return confusion_metrics(prediction.labels[nodes, k], np.asarray(labels)[nodes])


# ---------------------------------------------------------------- optimizers


class SGD:
    def __init__(self, params: dict[str, Tensor], lr: float, weight_decay: float = 0.0):
        self.params, self.lr, self.weight_decay = params, lr, weight_decay

    def step(self):
        for p in self.params.values():
            g = p.grad if p.grad is not None else 0.0
            p.data = p.data - self.lr * (g + self.weight_decay * p.data)


class Adam:
    def __init__(self, params: dict[str, Tensor], lr: float, weight_decay: float = 0.0,
                 betas=(0.9, 0.999), eps: float = 1e-8):
        self.params, self.lr, self.weight_decay = params, lr, weight_decay
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self):
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for k, p in self.params.items():
            g = (p.grad if p.grad is not None else 0.0) + self.weight_decay * p.data
            self.m[k] = self.beta1 * self.m[k] + (1 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1 - self.beta2) * g * g
            p.data = p.data - self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


# ---------------------------------------------------------------- training


@dataclass
class Dataset:
    graph: DynamicGraph
    features: np.ndarray
    labels: np.ndarray  # (n,) with 0 human, 1 bot, -1 unlabeled
    splits: dict[str, np.ndarray]
    metrics: SnapshotMetrics | None = None

    def __post_init__(self):
        if self.metrics is None:
            self.metrics = compute_metrics(self.graph)

    def batch(self, config: ModelConfig) -> GraphBatch:
        return prepare_batch(self.graph, self.features, self.metrics, config.bucket_count, config.self_loops)


@dataclass
class EpochLog:
    epoch: int
    train_loss: float
    val_accuracy: float
    val_f1: float
    val_precision: float
    val_recall: float

    HEADER = "epoch,train_loss,val_accuracy,val_f1,val_precision,val_recall"

    def csv(self) -> str:
        return (
            f"{self.epoch},{self.train_loss:.10f},{self.val_accuracy:.6f},"
            f"{self.val_f1:.6f},{self.val_precision:.6f},{self.val_recall:.6f}"
        )


@dataclass
class TrainResult:
    params: dict[str, Tensor]
    log: list[EpochLog]
    best_epoch: int
    config: TrainingConfig

    def log_csv(self) -> str:
        return "\n".join([EpochLog.HEADER] + [e.csv() for e in self.log]) + "\n"


def predict(batch: GraphBatch, params: dict[str, Tensor], config: ModelConfig, ablation=frozenset()) -> Prediction:
    out = forward(batch, params, config, ablation)
    return Prediction(out.probs.data, batch.active)


def train(dataset: Dataset, config: TrainingConfig, params: dict[str, Tensor] | None = None,
          verbose: bool = False) -> TrainResult:
    """Full-batch training; returns the parameters of the best-validation-F1 epoch.

    Epoch ``e`` logs the loss and validation metrics of the parameters *before*
    that epoch's update, so the returned parameters are exactly those scored.
    """
    train_nodes = np.asarray(dataset.splits.get("train", []), dtype=np.int64)
    val_nodes = np.asarray(dataset.splits.get("val", []), dtype=np.int64)
    if len(train_nodes) == 0:
        raise ValueError("empty train split")
    lab = dataset.labels[train_nodes]
    if not np.isin(lab, (0, 1)).all():
        raise ValueError("train labels must be binary")

    mcfg = config.model
    batch = dataset.batch(mcfg)
    if params is None:
        params = init_params(mcfg, batch.input_dim, batch.num_snapshots, config.seed)
    if config.optimizer == "adam":
        opt = Adam(params, config.learning_rate, config.weight_decay)
    else:
        opt = SGD(params, config.learning_rate, config.weight_decay)

    log: list[EpochLog] = []
    best_key, best_epoch, best_params = None, 0, copy_params(params)
    for epoch in range(1, config.epochs + 1):
        for p in params.values():
            p.grad = None
        out = forward(batch, params, mcfg, config.ablation)
        loss = bce_loss(out.probs, dataset.labels, train_nodes, batch.active, config.loss_scope)
        value = loss.item()
        if not math.isfinite(value):
            raise TrainingDiverged(epoch, value)
        if len(val_nodes):
            m = evaluate(Prediction(out.probs.data, batch.active), dataset.labels, val_nodes)
        else:
            m = Metrics(math.nan, math.nan, math.nan, math.nan, 0, 0, 0, 0)
        log.append(EpochLog(epoch, value, m.accuracy, m.f1, m.precision, m.recall))
        key = (m.f1, m.accuracy) if len(val_nodes) else (epoch, 0)
        if best_key is None or key >= best_key:
            best_key, best_epoch, best_params = key, epoch, copy_params(params)
        if verbose:
            print(log[-1].csv())
        ad.backward(loss)
        opt.step()
    for p in best_params.values():
        p.grad = None
    return TrainResult(best_params, log, best_epoch, config)


def with_ablation(config: TrainingConfig, *names: str) -> TrainingConfig:
    return replace(config, ablation=frozenset(names))
