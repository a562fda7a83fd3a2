"""Metrics, matrix imputation, and embedding export.

Evaluation over cells is embarrassingly parallel; the worker count is
capped by the ``SCHYENA_THREADS`` environment variable.  Results are
order-preserving and independent of the worker count.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .data import ExpressionMatrix, MaskPlan, partition_eval_groups
from .errors import ConfigurationError, ContractError
from .model import ModelParams, extract_cell_embedding, forward_mem


def worker_count() -> int:
    env = os.environ.get("SCHYENA_THREADS")
    if env:
        return max(1, int(env))
    return max(1, os.cpu_count() or 1)


def _map_cells(fn, items):
    n = worker_count()
    items = list(items)
    if n == 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, items))


# ---------------------------------------------------------------------------
# classification metrics


@dataclass
class ClassificationReport:
    confusion: np.ndarray  # rows: true labels, cols: predictions
    per_class_f1: np.ndarray
    macro_f1: float
    micro_f1: float
    weighted_f1: float
    degenerate_classes: list[int] = field(default_factory=list)

    @property
    def accuracy(self) -> float:
        return float(np.trace(self.confusion) / max(self.confusion.sum(), 1))


def f1_report(labels, predictions, n_classes: int) -> ClassificationReport:
    """Confusion matrix plus per-class and averaged F1 scores.

    Classes with an undefined precision or recall score 0 by convention;
    classes that appear in neither truth nor predictions are flagged.
    """
    labels = np.asarray(labels, dtype=np.int64)
    predictions = np.asarray(predictions, dtype=np.int64)
    if labels.shape != predictions.shape:
        raise ContractError(
            f"{labels.shape[0]} labels vs {predictions.shape[0]} predictions"
        )
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes
                        or predictions.min() < 0 or predictions.max() >= n_classes):
        raise ContractError("class index out of range")
    confusion = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(confusion, (labels, predictions), 1)
    tp = np.diag(confusion).astype(np.float64)
    support = confusion.sum(axis=1).astype(np.float64)
    predicted = confusion.sum(axis=0).astype(np.float64)
    with np.errstate(invalid="ignore", divide="ignore"):
        precision = np.where(predicted > 0, tp / predicted, 0.0)
        recall = np.where(support > 0, tp / support, 0.0)
        pr = precision + recall
        f1 = np.where(pr > 0, 2.0 * precision * recall / np.where(pr > 0, pr, 1.0), 0.0)
    total = max(labels.size, 1)
    micro = float(tp.sum() / total)
    weighted = float((f1 * support).sum() / max(support.sum(), 1.0))
    degenerate = [c for c in range(n_classes) if support[c] == 0 and predicted[c] == 0]
    return ClassificationReport(
        confusion=confusion,
        per_class_f1=f1,
        macro_f1=float(f1.mean()),
        micro_f1=micro,
        weighted_f1=weighted,
        degenerate_classes=degenerate,
    )


# ---------------------------------------------------------------------------
# regression metrics


def mse_pearson(true_vals, imputed_vals):
    """(MSE, Pearson r); r is None when either vector has zero variance."""
    a = np.asarray(true_vals, dtype=np.float64).reshape(-1)
    b = np.asarray(imputed_vals, dtype=np.float64).reshape(-1)
    if a.size == 0 or a.shape != b.shape:
        raise ContractError(f"need equal nonempty vectors, got {a.shape} and {b.shape}")
    diff = a - b
    mse = float(diff @ diff / a.size)
    ca = a - a.mean()
    cb = b - b.mean()
    va = float(ca @ ca)
    vb = float(cb @ cb)
    if va == 0.0 or vb == 0.0:
        return mse, None
    return mse, float((ca @ cb) / np.sqrt(va * vb))


# ---------------------------------------------------------------------------
# imputation


@dataclass
class GroupScore:
    kind: str  # nonzero-eval | zero-impute
    n: int
    mse: float
    pearson: float | None


@dataclass
class ImputationReport:
    rows: list[GroupScore]


def model_predictor(model: ModelParams):
    """Adapt a model to the predictor protocol: (values, mask) -> length-L array."""

    def predict(values: np.ndarray, mask: MaskPlan) -> np.ndarray:
        with ad.no_grad():
            return forward_mem(values, mask, model).data

    return predict


def gene_mean_predictor(reference: ExpressionMatrix):
    """Baseline: predict each gene's mean over the cells where it is observed.

    Genes never observed in the reference predict 0.
    """
    totals = np.zeros(reference.n_genes)
    counts = np.zeros(reference.n_genes)
    for idx, vals in reference.rows:
        nz = vals != 0.0
        np.add.at(totals, idx[nz], vals[nz])
        np.add.at(counts, idx[nz], 1.0)
    means = np.where(counts > 0, totals / np.maximum(counts, 1.0), 0.0)

    def predict(values: np.ndarray, mask: MaskPlan) -> np.ndarray:
        return means.copy()

    return predict


def _as_predictor(model_or_predictor):
    if isinstance(model_or_predictor, ModelParams):
        return model_predictor(model_or_predictor)
    return model_or_predictor


def _group_by_cell(group: np.ndarray) -> dict[int, np.ndarray]:
    by_cell: dict[int, list[int]] = {}
    for cell, gene in group:
        by_cell.setdefault(int(cell), []).append(int(gene))
    return {c: np.array(sorted(g), dtype=np.int64) for c, g in by_cell.items()}


def evaluate_imputation(m: ExpressionMatrix, model_or_predictor, seed: int = 0) -> ImputationReport:
    """Score masked-nonzero recovery over the 5-sub-group protocol.

    For each group, its nonzero entries are masked cell by cell, predicted,
    clamped at zero, and scored (MSE and Pearson pooled over the group's
    masked slots).
    """
    if not m.normalized:
        raise ContractError("evaluation expects a preprocessed matrix")
    predict = _as_predictor(model_or_predictor)
    groups = partition_eval_groups(m, "nonzero", np.random.default_rng(seed))
    rows = []
    for group in groups:
        by_cell = _group_by_cell(group)

        def score_cell(item):
            cell, genes = item
            values = m.row_dense(cell)
            mask = MaskPlan(genes, np.zeros(genes.size, dtype=bool), p_nonzero=0.0)
            preds = np.maximum(predict(values, mask), 0.0)
            return values[genes], preds[genes]

        pairs = _map_cells(score_cell, sorted(by_cell.items()))
        truth = np.concatenate([t for t, _ in pairs]) if pairs else np.empty(0)
        pred = np.concatenate([p for _, p in pairs]) if pairs else np.empty(0)
        if truth.size == 0:
            rows.append(GroupScore("nonzero-eval", 0, 0.0, None))
            continue
        mse, r = mse_pearson(truth, pred)
        rows.append(GroupScore("nonzero-eval", int(truth.size), mse, r))
    return ImputationReport(rows=rows)


def impute_matrix(m: ExpressionMatrix, model_or_predictor, seed: int = 0) -> np.ndarray:
    """Fill every zero entry by masked prediction; observed values pass through.

    Zeros are split into 10 sub-groups; each group is masked and predicted
    in its own pass so the model always sees most of the cell unmasked.
    Negative predictions clamp to 0.
    """
    if isinstance(model_or_predictor, ModelParams) and model_or_predictor.config.n_genes != m.n_genes:
        raise ConfigurationError(
            f"model covers {model_or_predictor.config.n_genes} genes, matrix has {m.n_genes}"
        )
    if not m.normalized:
        raise ContractError("imputation expects a preprocessed matrix")
    predict = _as_predictor(model_or_predictor)
    out = m.to_dense()
    groups = partition_eval_groups(m, "zero", np.random.default_rng(seed))
    for group in groups:
        by_cell = _group_by_cell(group)

        def impute_cell(item):
            cell, genes = item
            values = m.row_dense(cell)
            mask = MaskPlan(genes, np.ones(genes.size, dtype=bool),
                            p_nonzero=0.0, p_zero=0.0)
            preds = np.maximum(predict(values, mask), 0.0)
            return cell, genes, preds[genes]

        for cell, genes, preds in _map_cells(impute_cell, sorted(by_cell.items())):
            out[cell, genes] = preds
    return out


# ---------------------------------------------------------------------------
# embedding export


def export_embeddings(m: ExpressionMatrix, model: ModelParams, path: str) -> None:
    """One CSV row per cell: id, label, batch, then the embedding values."""
    width = model.config.width
    embeddings = _map_cells(
        lambda i: extract_cell_embedding(m.row_dense(i), model), range(m.n_cells)
    )
    with open(path, "w") as f:
        f.write("cell_id,label,batch," + ",".join(f"e{d}" for d in range(width)) + "\n")
        for i, emb in enumerate(embeddings):
            label = m.labels[i] if m.labels else ""
            batch = m.batches[i] if m.batches else ""
            f.write(f"{m.cell_id(i)},{label},{batch}," + ",".join(repr(float(v)) for v in emb) + "\n")
