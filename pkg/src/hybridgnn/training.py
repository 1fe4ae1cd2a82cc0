"""Loss, optimizers, metrics, and subject-exclusive cross-validation.

The training objective is cross-entropy on the class probabilities plus an
entropy-minimization term on every region-assignment matrix, pushing each
channel's membership distribution toward one-hot. Folds split by subject so
no individual contributes segments to both sides of a fold.
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .data import SegmentSet
from .model import ModelConfig, ModelParams, forward_batch, init_model
from .rng import subseed, substream


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 5e-3
    max_epochs: int = 10
    batch_size: int = 128
    lam: float = 1e-5  # entropy regularization coefficient
    seed: int = 0
    optimizer: str = "adam"

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.lam < 0:
            raise ValueError("lam must be >= 0")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"optimizer must be 'sgd' or 'adam', got {self.optimizer!r}")

    def to_dict(self) -> dict:
        return {
            "learning_rate": self.learning_rate,
            "max_epochs": self.max_epochs,
            "batch_size": self.batch_size,
            "lam": self.lam,
            "seed": self.seed,
            "optimizer": self.optimizer,
        }


class TrainingDivergedError(RuntimeError):
    """Loss became non-finite; carries the batch index and parameter norms."""

    def __init__(self, batch_index: int, param_norms: dict):
        self.batch_index = batch_index
        self.param_norms = param_norms
        worst = max(param_norms.items(), key=lambda kv: kv[1])
        super().__init__(
            f"non-finite loss at batch {batch_index}; largest parameter norm "
            f"{worst[0]}={worst[1]:.3e}"
        )


def loss(probs: ad.Node, label: int, r_list, lam: float) -> ad.Node:
    """Per-sample objective: -log p[label] - lam * sum(R log R) over matrices."""
    n_classes = probs.value.shape[-1]
    if not 0 <= label < n_classes:
        raise ValueError(f"label {label} out of range for {n_classes} classes")
    out = ad.scale(ad.log(ad.slice_(probs, (int(label),))), -1.0)
    for r in r_list:
        out = ad.add(out, ad.scale(ad.reduce_sum(ad.mul(r, ad.log(r))), -lam))
    return ad.reshape(out, ())


def batch_loss(probs: ad.Node, labels: np.ndarray, r_list, lam: float) -> ad.Node:
    """Mean of the per-sample objective over a batch (probs shaped (B, C))."""
    n, n_classes = probs.value.shape
    labels = np.asarray(labels)
    if labels.min() < 0 or labels.max() >= n_classes:
        raise ValueError("label out of range")
    onehot = np.zeros((n, n_classes))
    onehot[np.arange(n), labels] = 1.0
    out = ad.scale(ad.reduce_sum(ad.mul(ad.constant(onehot), ad.log(probs))), -1.0 / n)
    for r in r_list:
        out = ad.add(out, ad.scale(ad.reduce_sum(ad.mul(r, ad.log(r))), -lam / n))
    return out


def _make_optimizer(tcfg: TrainConfig):
    if tcfg.optimizer == "sgd":
        return _Sgd(tcfg.learning_rate)
    return _Adam(tcfg.learning_rate)


class _Sgd:
    def __init__(self, lr: float):
        self.lr = lr

    def step(self, named_tensors):
        for _name, node in named_tensors:
            if node.grad is not None:
                node.value = node.value - self.lr * node.grad


class _Adam:
    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.state = {}

    def step(self, named_tensors):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        correct1 = 1.0 - b1**self.t
        correct2 = 1.0 - b2**self.t
        for name, node in named_tensors:
            if node.grad is None:
                continue
            m, v = self.state.get(name, (0.0, 0.0))
            m = b1 * m + (1 - b1) * node.grad
            v = b2 * v + (1 - b2) * node.grad**2
            self.state[name] = (m, v)
            node.value = node.value - self.lr * (m / correct1) / (np.sqrt(v / correct2) + self.eps)


def train_epoch(
    params: ModelParams,
    mcfg: ModelConfig,
    tcfg: TrainConfig,
    x: np.ndarray,
    y: np.ndarray,
    optimizer,
    shuffle_rng: np.random.Generator,
) -> dict:
    """One shuffled pass over the data; returns mean loss and mean grad norm."""
    if len(x) == 0:
        raise ValueError("train_epoch: empty shard")
    order = shuffle_rng.permutation(len(x))
    named = params.named_tensors()
    losses = []
    grad_norms = []
    for start in range(0, len(order), tcfg.batch_size):
        idx = order[start : start + tcfg.batch_size]
        probs, diag = forward_batch(x[idx], params, mcfg)
        objective = batch_loss(probs, y[idx], diag["assign"], tcfg.lam)
        value = float(objective.value)
        if not math.isfinite(value):
            norms = {name: float(np.linalg.norm(node.value)) for name, node in named}
            raise TrainingDivergedError(start // tcfg.batch_size, norms)
        ad.zero_grads(node for _n, node in named)
        ad.backward(objective)
        sq = 0.0
        for _name, node in named:
            if node.grad is not None:
                sq += float((node.grad**2).sum())
        grad_norms.append(math.sqrt(sq))
        optimizer.step(named)
        losses.append(value)
    return {"mean_loss": float(np.mean(losses)), "grad_norm": float(np.mean(grad_norms))}


def train_model(x: np.ndarray, y: np.ndarray, mcfg: ModelConfig, tcfg: TrainConfig, log=None):
    """Train a fresh model; returns (params, per-epoch history)."""
    params = init_model(mcfg, subseed(tcfg.seed, "params"))
    optimizer = _make_optimizer(tcfg)
    shuffle_rng = substream(tcfg.seed, "shuffle")
    history = []
    for epoch in range(tcfg.max_epochs):
        summary = train_epoch(params, mcfg, tcfg, x, y, optimizer, shuffle_rng)
        summary = {"epoch": epoch, **summary}
        history.append(summary)
        if log is not None:
            log(f"epoch {epoch} loss {summary['mean_loss']:.6f} grad {summary['grad_norm']:.6f}")
    return params, history


@dataclass
class Metrics:
    tp: int
    fp: int
    fn: int
    tn: int
    acc: float = field(init=False)
    rec: float = field(init=False)
    pre: float = field(init=False)
    f1: float = field(init=False)

    def __post_init__(self):
        total = self.tp + self.fp + self.fn + self.tn
        self.acc = (self.tp + self.tn) / total if total else 0.0
        self.rec = self.tp / (self.tp + self.fn) if (self.tp + self.fn) else 0.0
        self.pre = self.tp / (self.tp + self.fp) if (self.tp + self.fp) else 0.0
        self.f1 = (
            2 * self.pre * self.rec / (self.pre + self.rec) if (self.pre + self.rec) else 0.0
        )

    def to_dict(self) -> dict:
        return {
            "tp": self.tp, "fp": self.fp, "fn": self.fn, "tn": self.tn,
            "acc": self.acc, "rec": self.rec, "pre": self.pre, "f1": self.f1,
        }


def evaluate(params: ModelParams, mcfg: ModelConfig, x: np.ndarray, y: np.ndarray,
             batch_size: int = 256) -> Metrics:
    """Argmax predictions over a shard; positive class is index 1 (patient)."""
    if len(x) == 0:
        raise ValueError("evaluate: empty shard")
    preds = predict(params, mcfg, x, batch_size)
    y = np.asarray(y)
    tp = int(np.sum((preds == 1) & (y == 1)))
    fp = int(np.sum((preds == 1) & (y == 0)))
    fn = int(np.sum((preds == 0) & (y == 1)))
    tn = int(np.sum((preds == 0) & (y == 0)))
    return Metrics(tp=tp, fp=fp, fn=fn, tn=tn)


def predict(params: ModelParams, mcfg: ModelConfig, x: np.ndarray, batch_size: int = 256):
    preds = []
    for start in range(0, len(x), batch_size):
        probs, _diag = forward_batch(x[start : start + batch_size], params, mcfg)
        preds.append(np.argmax(probs.value, axis=-1))
    return np.concatenate(preds)


def mean_assignment_entropy(params: ModelParams, mcfg: ModelConfig, x: np.ndarray,
                            batch_size: int = 256) -> float:
    """Mean over samples, pooling stages, and channels of the entropy of each
    assignment row. Returns nan for variants without pooling."""
    total = 0.0
    count = 0
    for start in range(0, len(x), batch_size):
        _probs, diag = forward_batch(x[start : start + batch_size], params, mcfg)
        for r in diag["assign"]:
            rv = r.value
            ent = -(rv * np.log(np.maximum(rv, ad.LOG_FLOOR))).sum(axis=-1)
            total += float(ent.sum())
            count += ent.size
    return total / count if count else float("nan")


@dataclass
class FoldReport:
    folds: list  # Metrics per fold
    fold_subjects: list  # test subjects per fold
    pooled: Metrics
    mean: dict
    std: dict
    model_config: dict
    train_config: dict

    @classmethod
    def from_folds(cls, folds, fold_subjects, mcfg: ModelConfig, tcfg: TrainConfig):
        keys = ("acc", "rec", "pre", "f1")
        mean = {k: float(np.mean([getattr(m, k) for m in folds])) for k in keys}
        std = {k: float(np.std([getattr(m, k) for m in folds])) for k in keys}
        pooled = Metrics(
            tp=sum(m.tp for m in folds),
            fp=sum(m.fp for m in folds),
            fn=sum(m.fn for m in folds),
            tn=sum(m.tn for m in folds),
        )
        return cls(
            folds=list(folds),
            fold_subjects=[sorted(s) for s in fold_subjects],
            pooled=pooled,
            mean=mean,
            std=std,
            model_config=mcfg.to_dict(),
            train_config=tcfg.to_dict(),
        )

    def to_json_dict(self) -> dict:
        return {
            "folds": [
                {**m.to_dict(), "test_subjects": subj}
                for m, subj in zip(self.folds, self.fold_subjects)
            ],
            "mean": self.mean,
            "std": self.std,
            "pooled": self.pooled.to_dict(),
            "model_config": self.model_config,
            "train_config": self.train_config,
        }

    def to_table(self) -> str:
        lines = [f"{'fold':>4}  {'ACC':>8}  {'REC':>8}  {'PRE':>8}  {'F1':>8}"]
        for i, m in enumerate(self.folds):
            lines.append(f"{i:>4}  {m.acc:8.4f}  {m.rec:8.4f}  {m.pre:8.4f}  {m.f1:8.4f}")
        lines.append(
            f"{'mean':>4}  {self.mean['acc']:8.4f}  {self.mean['rec']:8.4f}  "
            f"{self.mean['pre']:8.4f}  {self.mean['f1']:8.4f}"
        )
        lines.append(
            f"{'std':>4}  {self.std['acc']:8.4f}  {self.std['rec']:8.4f}  "
            f"{self.std['pre']:8.4f}  {self.std['f1']:8.4f}"
        )
        p = self.pooled
        lines.append(f"{'pool':>4}  {p.acc:8.4f}  {p.rec:8.4f}  {p.pre:8.4f}  {p.f1:8.4f}")
        return "\n".join(lines)


def partition_subjects(subjects, seed: int, n_folds: int = 10):
    """Shuffle the unique subject list by seed and split into near-equal groups."""
    unique = sorted(set(subjects))
    if len(unique) < n_folds:
        raise ValueError(f"need at least {n_folds} subjects for {n_folds}-fold CV, have {len(unique)}")
    order = substream(seed, "folds").permutation(len(unique))
    shuffled = [unique[i] for i in order]
    return [list(part) for part in np.array_split(shuffled, n_folds)]


def _run_fold(segset: SegmentSet, mcfg: ModelConfig, tcfg: TrainConfig, test_subjects, k: int):
    test_mask = np.isin(segset.subjects, list(test_subjects))
    fold_cfg = replace(tcfg, seed=subseed(tcfg.seed, "fold", str(k)))
    params, _history = train_model(segset.x[~test_mask], segset.y[~test_mask], mcfg, fold_cfg)
    return evaluate(params, mcfg, segset.x[test_mask], segset.y[test_mask])


_WORKER_STATE = {}


def _worker_init(segset, mcfg, tcfg):
    _WORKER_STATE["args"] = (segset, mcfg, tcfg)


def _worker_run(test_subjects, k):
    segset, mcfg, tcfg = _WORKER_STATE["args"]
    m = _run_fold(segset, mcfg, tcfg, test_subjects, k)
    return (m.tp, m.fp, m.fn, m.tn)


def ten_fold_cv(
    segset: SegmentSet,
    mcfg: ModelConfig,
    tcfg: TrainConfig,
    n_folds: int = 10,
    n_jobs: int = 1,
    log=None,
) -> FoldReport:
    """Subject-exclusive cross-validation with per-fold re-initialization.

    Folds are independent; `n_jobs > 1` runs them in worker processes and
    produces metrics identical to the serial order.
    """
    groups = partition_subjects(segset.subjects, tcfg.seed, n_folds)
    folds = []
    if n_jobs > 1:
        with ProcessPoolExecutor(
            max_workers=n_jobs, initializer=_worker_init, initargs=(segset, mcfg, tcfg)
        ) as pool:
            for k, counts in enumerate(pool.map(_worker_run, groups, range(len(groups)))):
                folds.append(Metrics(*counts))
                if log is not None:
                    log(f"fold {k} acc {folds[-1].acc:.4f}")
    else:
        for k, group in enumerate(groups):
            folds.append(_run_fold(segset, mcfg, tcfg, group, k))
            if log is not None:
                log(f"fold {k} acc {folds[-1].acc:.4f}")
    return FoldReport.from_folds(folds, groups, mcfg, tcfg)
