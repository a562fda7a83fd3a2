"""Optimization loops: masked-expression pretraining and both fine-tunes.

Losses are summed per cell (the masked regression is a plain sum of
squared errors over masked positions) and averaged across the batch so
the learning rate does not depend on batch size.  The masking probability
for pretraining is redrawn per batch from its allowed range.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import (
    MEM_P_MAX,
    MEM_P_MIN,
    ExpressionMatrix,
    MaskPlan,
    make_imputation_mask,
    make_mem_mask,
    split_indices,
)
from .errors import ConfigurationError, ContractError, NonFiniteGradientError, TrainingDivergedError
from .model import ModelParams, forward_classify, forward_mem


@dataclass
class TrainConfig:
    task: str  # pretrain | classify | impute
    epochs: int
    batch_size: int = 8
    lr: float = 1e-4
    weight_decay: float = 0.01
    validation_fraction: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.task not in ("pretrain", "classify", "impute"):
            raise ContractError(f"unknown task {self.task!r}")
        if self.task != "pretrain" and not 0.0 < self.validation_fraction < 1.0:
            raise ContractError(
                f"validation_fraction must be in (0, 1), got {self.validation_fraction}"
            )

    @staticmethod
    def pretraining(**kw) -> "TrainConfig":
        kw.setdefault("epochs", 2)
        kw.setdefault("lr", 1e-4)
        return TrainConfig(task="pretrain", **kw)

    @staticmethod
    def finetuning(task: str, **kw) -> "TrainConfig":
        kw.setdefault("epochs", 5)
        kw.setdefault("lr", 1e-5)
        return TrainConfig(task=task, **kw)


# ---------------------------------------------------------------------------
# losses


def mem_loss(predicted: Tensor, target, mask: MaskPlan) -> Tensor | None:
    """Sum of squared errors over masked positions; None signals an empty
    mask (the sample contributes no gradient)."""
    if len(mask) == 0:
        return None
    target = np.asarray(target, dtype=np.float64).reshape(-1)
    pred_col = ad.reshape(predicted, (predicted.data.size, 1))
    sel = ad.gather_rows(pred_col, mask.positions)
    diff = ad.sub(sel, Tensor(target[mask.positions][:, None]))
    return ad.tensor_sum(ad.mul(diff, diff))


def classify_loss(logits: Tensor, label: int) -> Tensor:
    """Numerically stable softmax cross-entropy against an integer label."""
    return ad.cross_entropy(logits, label)


# ---------------------------------------------------------------------------
# optimizer


class AdamW:
    """Bias-corrected Adam with decoupled weight decay.

    The decay term subtracts ``lr * weight_decay * theta`` (pre-update
    value) independently of the gradient-based step.  Decay applies only
    to 2-d weight matrices, excluding the gene embedding table; vectors
    (biases, norm gains, embeddings, rates) are left alone.
    """

    def __init__(self, named_params, lr: float, weight_decay: float = 0.01,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(named_params)
        self.lr = lr
        self.weight_decay = weight_decay
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m = {name: np.zeros_like(p.data) for name, p in self.params}
        self.v = {name: np.zeros_like(p.data) for name, p in self.params}
        self.decayed = {
            name for name, p in self.params
            if p.data.ndim == 2 and name.split(".")[-1] != "gene_table"
        }

    def step(self) -> None:
        self.step_count += 1
        c1 = 1.0 - self.beta1**self.step_count
        c2 = 1.0 - self.beta2**self.step_count
        for name, p in self.params:
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            if not np.isfinite(g).all():
                raise NonFiniteGradientError(f"non-finite gradient in {name}")
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            update = self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            if self.weight_decay and name in self.decayed:
                update = update + self.lr * self.weight_decay * p.data
            p.data -= update


def adamw_step(optimizer: AdamW) -> None:
    """One optimizer step over the parameters bound at construction."""
    optimizer.step()


# ---------------------------------------------------------------------------
# loop helpers


def best_epoch(metrics, maximize: bool) -> int:
    """Index of the best validation metric; first occurrence wins ties."""
    metrics = list(metrics)
    if not metrics:
        raise ContractError("no metrics to select from")
    pick = max(metrics) if maximize else min(metrics)
    return metrics.index(pick)


def _check_corpus(corpus: ExpressionMatrix) -> None:
    if not corpus.normalized:
        raise ContractError("training expects a preprocessed (normalized) corpus")
    if corpus.provenance == "test":
        raise ContractError("refusing to train on a test-tagged corpus")


def _batches(order: np.ndarray, size: int):
    for start in range(0, order.size, size):
        yield order[start : start + size]


def _mean_loss(losses: list[Tensor]) -> Tensor:
    total = losses[0]
    for item in losses[1:]:
        total = ad.add(total, item)
    return ad.scale(total, 1.0 / len(losses))


@dataclass
class PretrainResult:
    model: ModelParams
    trace: list[dict] = field(default_factory=list)


@dataclass
class FinetuneResult:
    model: ModelParams
    history: list[dict] = field(default_factory=list)
    best_epoch: int = 0
    classes: list[str] | None = None


# ---------------------------------------------------------------------------
# pretraining


def pretrain(corpus: ExpressionMatrix, config: TrainConfig, model: ModelParams) -> PretrainResult:
    """Masked-expression pretraining over the whole corpus.

    Per batch: draw one masking probability uniformly from the allowed
    range, mask each cell's nonzero values at that rate, regress the
    hidden values, and take one optimizer step on the batch-mean loss.
    """
    if config.task != "pretrain":
        raise ContractError(f"pretrain called with task {config.task!r}")
    _check_corpus(corpus)
    rng = np.random.default_rng(config.seed)
    opt = AdamW(model.named_parameters(), lr=config.lr, weight_decay=config.weight_decay)
    trace: list[dict] = []
    step = 0
    for epoch in range(config.epochs):
        order = rng.permutation(corpus.n_cells)
        for batch in _batches(order, config.batch_size):
            p = float(rng.uniform(MEM_P_MIN, MEM_P_MAX))
            losses = []
            for i in batch:
                values = corpus.row_dense(int(i))
                mask = make_mem_mask(values, p, rng)
                if len(mask) == 0:
                    continue
                loss = mem_loss(forward_mem(values, mask, model), values, mask)
                losses.append(loss)
            if not losses:
                continue
            total = _mean_loss(losses)
            loss_value = float(total.data)
            if not np.isfinite(loss_value):
                raise TrainingDivergedError(
                    f"non-finite loss at step {step} (epoch {epoch})", trace
                )
            model.zero_grad()
            ad.backward(total)
            opt.step()
            trace.append({"step": step, "epoch": epoch, "loss": loss_value,
                          "lr": config.lr, "p": p})
            step += 1
    return PretrainResult(model=model, trace=trace)


# ---------------------------------------------------------------------------
# fine-tuning


def _label_vocabulary(labels: list[str]) -> list[str]:
    return sorted(set(labels))


def _validation_metric_classify(model, corpus, cells, label_ids):
    from .evaluate import f1_report  # local import to avoid a cycle

    preds = []
    with ad.no_grad():
        for i in cells:
            logits = forward_classify(corpus.row_dense(int(i)), model)
            preds.append(int(np.argmax(logits.data)))
    truth = [label_ids[int(i)] for i in cells]
    return f1_report(truth, preds, model.config.n_classes).macro_f1


def _validation_metric_impute(model, corpus, cells, masks):
    sq = 0.0
    n = 0
    with ad.no_grad():
        for i, mask in zip(cells, masks):
            if len(mask) == 0:
                continue
            values = corpus.row_dense(int(i))
            preds = forward_mem(values, mask, model).data
            err = preds[mask.positions] - values[mask.positions]
            sq += float(err @ err)
            n += len(mask)
    return sq / max(n, 1)


def finetune(corpus: ExpressionMatrix, config: TrainConfig, model: ModelParams) -> FinetuneResult:
    """Fine-tune for classification or imputation with best-epoch selection.

    A seeded fraction of the corpus is held out; classification tracks
    validation macro-F1 (higher wins), imputation tracks masked MSE on
    fixed validation masks (lower wins).  The returned model carries the
    best epoch's weights.
    """
    if config.task not in ("classify", "impute"):
        raise ContractError(f"finetune called with task {config.task!r}")
    _check_corpus(corpus)
    rng = np.random.default_rng(config.seed)
    train_idx, val_idx = split_indices(corpus.n_cells, config.validation_fraction, config.seed)

    classes = None
    label_ids = None
    if config.task == "classify":
        if corpus.labels is None:
            raise ContractError("classification fine-tuning needs labels")
        if model.cls_head_w is None:
            raise ConfigurationError("model has no classification head")
        classes = _label_vocabulary(corpus.labels)
        if len(classes) > model.config.n_classes:
            raise ConfigurationError(
                f"{len(classes)} classes exceed head size {model.config.n_classes}"
            )
        label_ids = [classes.index(lab) for lab in corpus.labels]
        present = {label_ids[int(i)] for i in train_idx}
        missing = [classes[c] for c in range(len(classes)) if c not in present]
        if missing:
            warnings.warn(
                f"classes absent from the training split (retained in head): {missing}"
            )
        val_masks = None
    else:
        # fixed validation masks so epoch metrics are comparable
        mask_rng = np.random.default_rng(config.seed + 1)
        val_masks = [make_imputation_mask(corpus.row_dense(int(i)), mask_rng)
                     for i in val_idx]

    opt = AdamW(model.named_parameters(), lr=config.lr, weight_decay=config.weight_decay)
    maximize = config.task == "classify"
    history: list[dict] = []
    snapshots: list[dict] = []
    for epoch in range(config.epochs):
        order = train_idx[rng.permutation(train_idx.size)]
        epoch_losses = []
        for batch in _batches(order, config.batch_size):
            losses = []
            for i in batch:
                values = corpus.row_dense(int(i))
                if config.task == "classify":
                    logits = forward_classify(values, model)
                    losses.append(classify_loss(logits, label_ids[int(i)]))
                else:
                    mask = make_imputation_mask(values, rng)
                    if len(mask) == 0:
                        continue
                    losses.append(mem_loss(forward_mem(values, mask, model), values, mask))
            if not losses:
                continue
            total = _mean_loss(losses)
            loss_value = float(total.data)
            if not np.isfinite(loss_value):
                raise TrainingDivergedError(
                    f"non-finite loss in epoch {epoch}", history
                )
            model.zero_grad()
            ad.backward(total)
            opt.step()
            epoch_losses.append(loss_value)
        if config.task == "classify":
            metric = _validation_metric_classify(model, corpus, val_idx, label_ids)
        else:
            metric = _validation_metric_impute(model, corpus, val_idx, val_masks)
        history.append({
            "epoch": epoch,
            "train_loss": float(np.mean(epoch_losses)) if epoch_losses else float("nan"),
            "val_metric": metric,
        })
        snapshots.append(model.copy_values())
    best = best_epoch([h["val_metric"] for h in history], maximize=maximize)
    model.load_values(snapshots[best])
    return FinetuneResult(model=model, history=history, best_epoch=best, classes=classes)
