"""Count-matrix ingestion, preprocessing, masking, and synthetic corpora.

File formats:

* Matrix Market coordinate ``.mtx`` (1-based ``cell gene value`` triples,
  cells as rows).  Optional sidecars next to ``name.mtx``: ``name.genes.txt``
  (one gene id per line) and ``name.labels.csv`` (``cell_id,label,batch``).
* Dense CSV, cells x genes, header row of gene ids; trailing columns named
  ``label`` and/or ``batch`` carry per-cell metadata.
* Gene-vocabulary mapping: two-column whitespace-separated text,
  ``source_id  target_id``.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, EmptyCorpusError, ParseError


@dataclass
class ExpressionMatrix:
    """Sparse cells-by-genes matrix with optional per-cell metadata.

    Each row stores ascending gene indices and their values.  Values are
    raw non-negative counts until :func:`preprocess` marks the matrix
    normalized.
    """

    n_genes: int
    gene_ids: list[str]
    rows: list[tuple[np.ndarray, np.ndarray]]
    labels: list[str] | None = None
    batches: list[str] | None = None
    cell_ids: list[str] | None = None
    normalized: bool = False
    provenance: str | None = None

    def __post_init__(self):
        if len(set(self.gene_ids)) != len(self.gene_ids):
            raise ContractError("duplicate gene ids")
        if len(self.gene_ids) != self.n_genes:
            raise ContractError(
                f"{len(self.gene_ids)} gene ids for {self.n_genes} genes"
            )

    @property
    def n_cells(self) -> int:
        return len(self.rows)

    def cell_id(self, i: int) -> str:
        return self.cell_ids[i] if self.cell_ids else f"cell{i}"

    def row_dense(self, i: int) -> np.ndarray:
        out = np.zeros(self.n_genes)
        idx, vals = self.rows[i]
        out[idx] = vals
        return out

    def to_dense(self) -> np.ndarray:
        out = np.zeros((self.n_cells, self.n_genes))
        for i, (idx, vals) in enumerate(self.rows):
            out[i, idx] = vals
        return out

    def subset(self, cell_indices, provenance: str | None = None) -> "ExpressionMatrix":
        cell_indices = list(cell_indices)
        pick = lambda xs: [xs[i] for i in cell_indices] if xs is not None else None
        return ExpressionMatrix(
            n_genes=self.n_genes,
            gene_ids=list(self.gene_ids),
            rows=[(self.rows[i][0].copy(), self.rows[i][1].copy()) for i in cell_indices],
            labels=pick(self.labels),
            batches=pick(self.batches),
            cell_ids=[self.cell_id(i) for i in cell_indices],
            normalized=self.normalized,
            provenance=provenance if provenance is not None else self.provenance,
        )

    @staticmethod
    def from_dense(dense, gene_ids=None, labels=None, batches=None,
                   cell_ids=None, normalized: bool = False) -> "ExpressionMatrix":
        dense = np.asarray(dense, dtype=np.float64)
        n_cells, n_genes = dense.shape
        if gene_ids is None:
            gene_ids = default_gene_ids(n_genes)
        rows = []
        for i in range(n_cells):
            idx = np.flatnonzero(dense[i])
            rows.append((idx.astype(np.int64), dense[i, idx].copy()))
        return ExpressionMatrix(n_genes, list(gene_ids), rows, labels, batches,
                                cell_ids, normalized)


def default_gene_ids(n: int) -> list[str]:
    return [f"g{i:05d}" for i in range(n)]


@dataclass
class MaskPlan:
    """Masked positions for one cell, with value provenance per position."""

    positions: np.ndarray
    was_zero: np.ndarray
    p_nonzero: float
    p_zero: float = 0.0

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.int64)
        self.was_zero = np.asarray(self.was_zero, dtype=bool)
        if self.positions.size != np.unique(self.positions).size:
            raise ContractError("mask positions must be unique")
        if self.was_zero.shape != self.positions.shape:
            raise ContractError("provenance flags must match positions")

    def __len__(self) -> int:
        return int(self.positions.size)


@dataclass
class SyntheticSpec:
    """Generator settings for a learnable toy corpus.

    Each cell type owns a disjoint contiguous block of ``program_size``
    genes whose negative-binomial mean is ``boost`` times the baseline;
    every sampled count is then independently zeroed with probability
    ``dropout``.  Optional per-batch multiplicative shifts apply to a
    random gene subset, mimicking technical batch effects.
    """

    n_cells: int
    n_genes: int
    n_types: int
    program_size: int
    baseline_rate: float = 1.0
    boost: float = 20.0
    dropout: float = 0.3
    batch_shifts: list[float] = field(default_factory=list)
    batch_gene_fraction: float = 0.1
    dispersion: float = 2.0
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.dropout <= 1.0:
            raise ContractError(f"dropout must be in [0, 1], got {self.dropout}")
        if not 0.0 <= self.batch_gene_fraction <= 1.0:
            raise ContractError("batch_gene_fraction must be in [0, 1]")
        if self.n_types * self.program_size > self.n_genes:
            raise ContractError("type programs do not fit in the gene count")


# ---------------------------------------------------------------------------
# preprocessing

MIN_TOTAL_COUNT = 200
TARGET_TOTAL = 10_000.0


def preprocess(m: ExpressionMatrix) -> ExpressionMatrix:
    """Filter shallow cells, scale each cell to a fixed total, apply log1p.

    Cells with raw total below 200 are dropped (a total of exactly 200 is
    kept); survivors are scaled so counts sum to 10,000 and transformed
    elementwise by log(x + 1).  Zero entries remain zero.
    """
    if m.normalized:
        raise ContractError("matrix is already normalized")
    keep = [i for i, (_, vals) in enumerate(m.rows) if vals.sum() >= MIN_TOTAL_COUNT]
    if not keep:
        raise EmptyCorpusError(
            f"no cells with total count >= {MIN_TOTAL_COUNT} (of {m.n_cells})"
        )
    out = m.subset(keep)
    out.rows = [
        (idx, np.log1p(vals * (TARGET_TOTAL / vals.sum())))
        for idx, vals in out.rows
    ]
    out.normalized = True
    return out


# ---------------------------------------------------------------------------
# masking

MEM_P_MIN = 0.05
MEM_P_MAX = 0.4
IMPUTE_P_NONZERO = 0.4
IMPUTE_P_ZERO = 0.04


def make_mem_mask(values: np.ndarray, p: float, rng: np.random.Generator) -> MaskPlan:
    """Mask each nonzero position independently with probability p.

    Zero positions are never masked: a zero count cannot be told apart
    from a dropout, so there is no trustworthy regression target there.
    """
    if not MEM_P_MIN <= p <= MEM_P_MAX:
        raise ContractError(f"masking probability {p} outside [{MEM_P_MIN}, {MEM_P_MAX}]")
    values = np.asarray(values).reshape(-1)
    nonzero = np.flatnonzero(values)
    sel = nonzero[rng.random(nonzero.size) < p]
    return MaskPlan(sel, np.zeros(sel.size, dtype=bool), p_nonzero=p)


def make_imputation_mask(values: np.ndarray, rng: np.random.Generator,
                         p_nonzero: float = IMPUTE_P_NONZERO,
                         p_zero: float = IMPUTE_P_ZERO) -> MaskPlan:
    """Mask nonzero and zero positions at their own independent rates."""
    values = np.asarray(values).reshape(-1)
    draws = rng.random(values.size)
    is_zero = values == 0.0
    sel = np.flatnonzero(np.where(is_zero, draws < p_zero, draws < p_nonzero))
    return MaskPlan(sel, is_zero[sel], p_nonzero=p_nonzero, p_zero=p_zero)


def partition_eval_groups(m: ExpressionMatrix, kind: str,
                          rng: np.random.Generator) -> list[np.ndarray]:
    """Random near-equal partition of all (cell, gene) entries of one kind.

    ``kind`` is ``"nonzero"`` (5 groups) or ``"zero"`` (10 groups); group
    arrays have shape (k, 2) holding cell and gene indices, are mutually
    disjoint, and jointly cover every entry of the kind.
    """
    if kind == "nonzero":
        n_groups = 5
    elif kind == "zero":
        n_groups = 10
    else:
        raise ContractError(f"unknown partition kind {kind!r}")
    cells = []
    genes = []
    for i, (idx, vals) in enumerate(m.rows):
        pos = idx[vals != 0.0] if kind == "nonzero" else np.setdiff1d(
            np.arange(m.n_genes), idx[vals != 0.0]
        )
        cells.append(np.full(pos.size, i, dtype=np.int64))
        genes.append(pos.astype(np.int64))
    entries = np.stack(
        [np.concatenate(cells) if cells else np.empty(0, np.int64),
         np.concatenate(genes) if genes else np.empty(0, np.int64)],
        axis=1,
    )
    entries = entries[rng.permutation(entries.shape[0])]
    return list(np.array_split(entries, n_groups))


# ---------------------------------------------------------------------------
# synthetic corpus


def generate_synthetic(spec: SyntheticSpec) -> ExpressionMatrix:
    """Deterministic (per seed) negative-binomial corpus with typed programs."""
    rng = np.random.default_rng(spec.seed)
    types = rng.integers(0, spec.n_types, spec.n_cells)
    n_batches = len(spec.batch_shifts)
    batch_of = rng.integers(0, n_batches, spec.n_cells) if n_batches else None
    batch_gene_sets = [
        rng.choice(spec.n_genes, max(1, int(spec.batch_gene_fraction * spec.n_genes)),
                   replace=False)
        for _ in range(n_batches)
    ]
    r = spec.dispersion
    rows = []
    for i in range(spec.n_cells):
        mean = np.full(spec.n_genes, spec.baseline_rate)
        t = int(types[i])
        mean[t * spec.program_size : (t + 1) * spec.program_size] *= spec.boost
        if n_batches:
            mean[batch_gene_sets[batch_of[i]]] *= spec.batch_shifts[batch_of[i]]
        counts = rng.negative_binomial(r, r / (r + mean)).astype(np.float64)
        counts[rng.random(spec.n_genes) < spec.dropout] = 0.0
        idx = np.flatnonzero(counts)
        rows.append((idx.astype(np.int64), counts[idx]))
    return ExpressionMatrix(
        n_genes=spec.n_genes,
        gene_ids=default_gene_ids(spec.n_genes),
        rows=rows,
        labels=[f"type_{t}" for t in types],
        batches=[f"batch_{b}" for b in batch_of] if n_batches else None,
    )


# ---------------------------------------------------------------------------
# persistence


def save_matrix(m: ExpressionMatrix, path: str, fmt: str = "mtx") -> None:
    if fmt == "mtx":
        _save_mtx(m, path)
    elif fmt == "csv":
        _save_csv(m, path)
    else:
        raise ContractError(f"unknown format {fmt!r}")


def load_matrix(path: str, fmt: str = "mtx") -> ExpressionMatrix:
    if fmt == "mtx":
        return _load_mtx(path)
    if fmt == "csv":
        return _load_csv(path)
    raise ContractError(f"unknown format {fmt!r}")


def _sidecar(path: str, suffix: str) -> str:
    stem, _ = os.path.splitext(path)
    return f"{stem}.{suffix}"


def _save_mtx(m: ExpressionMatrix, path: str) -> None:
    nnz = sum(idx.size for idx, _ in m.rows)
    with open(path, "w") as f:
        f.write("%%MatrixMarket matrix coordinate real general\n")
        if m.normalized:
            f.write("% schyena: normalized\n")
        f.write(f"{m.n_cells} {m.n_genes} {nnz}\n")
        for i, (idx, vals) in enumerate(m.rows):
            for j, v in zip(idx, vals):
                f.write(f"{i + 1} {j + 1} {float(v)!r}\n")
    with open(_sidecar(path, "genes.txt"), "w") as f:
        f.write("\n".join(m.gene_ids) + "\n")
    if m.labels is not None or m.batches is not None:
        with open(_sidecar(path, "labels.csv"), "w") as f:
            f.write("cell_id,label,batch\n")
            for i in range(m.n_cells):
                label = m.labels[i] if m.labels else ""
                batch = m.batches[i] if m.batches else ""
                f.write(f"{m.cell_id(i)},{label},{batch}\n")


def _load_mtx(path: str) -> ExpressionMatrix:
    with open(path) as f:
        lines = f.readlines()
    body = []
    normalized = False
    for lineno, raw in enumerate(lines, start=1):
        text = raw.strip()
        if text.startswith("%"):
            if "schyena: normalized" in text:
                normalized = True
            continue
        if not text:
            continue
        body.append((lineno, text))
    if not body:
        raise ParseError("missing size line", len(lines))
    lineno, size_line = body[0]
    parts = size_line.split()
    if len(parts) != 3:
        raise ParseError(f"expected 'rows cols nnz', got {size_line!r}", lineno)
    try:
        n_cells, n_genes, nnz = (int(p) for p in parts)
    except ValueError:
        raise ParseError(f"non-integer size field in {size_line!r}", lineno) from None
    if len(body) - 1 != nnz:
        raise ParseError(f"declared {nnz} entries, found {len(body) - 1}", lineno)
    per_cell: list[list[tuple[int, float]]] = [[] for _ in range(n_cells)]
    for lineno, text in body[1:]:
        parts = text.split()
        if len(parts) != 3:
            raise ParseError(f"expected 'cell gene value', got {text!r}", lineno)
        try:
            i, j, v = int(parts[0]), int(parts[1]), float(parts[2])
        except ValueError:
            raise ParseError(f"malformed entry {text!r}", lineno) from None
        if not (1 <= i <= n_cells and 1 <= j <= n_genes):
            raise ParseError(f"coordinate ({i}, {j}) out of range", lineno)
        per_cell[i - 1].append((j - 1, v))
    rows = []
    for entries in per_cell:
        entries.sort()
        idx = np.array([e[0] for e in entries], dtype=np.int64)
        vals = np.array([e[1] for e in entries], dtype=np.float64)
        rows.append((idx, vals))
    gene_ids = None
    genes_path = _sidecar(path, "genes.txt")
    if os.path.exists(genes_path):
        with open(genes_path) as f:
            gene_ids = [line.strip() for line in f if line.strip()]
        if len(gene_ids) != n_genes:
            raise ParseError(
                f"{genes_path} lists {len(gene_ids)} genes, matrix has {n_genes}", None
            )
    labels = batches = cell_ids = None
    labels_path = _sidecar(path, "labels.csv")
    if os.path.exists(labels_path):
        cell_ids, labels, batches = _load_labels_sidecar(labels_path, n_cells)
    return ExpressionMatrix(
        n_genes=n_genes,
        gene_ids=gene_ids if gene_ids is not None else default_gene_ids(n_genes),
        rows=rows,
        labels=labels,
        batches=batches,
        cell_ids=cell_ids,
        normalized=normalized,
    )


def _load_labels_sidecar(path: str, n_cells: int):
    with open(path) as f:
        lines = [line.rstrip("\n") for line in f]
    if not lines or lines[0] != "cell_id,label,batch":
        raise ParseError(f"expected header 'cell_id,label,batch' in {path}", 1)
    rows = [line.split(",") for line in lines[1:] if line]
    if len(rows) != n_cells:
        raise ParseError(f"{path} has {len(rows)} rows for {n_cells} cells", None)
    cell_ids = [r[0] for r in rows]
    labels = [r[1] for r in rows]
    batches = [r[2] for r in rows]
    if all(label == "" for label in labels):
        labels = None
    if all(batch == "" for batch in batches):
        batches = None
    return cell_ids, labels, batches


def _save_csv(m: ExpressionMatrix, path: str) -> None:
    with open(path, "w") as f:
        if m.normalized:
            f.write("# schyena: normalized\n")
        header = list(m.gene_ids)
        if m.labels is not None:
            header.append("label")
        if m.batches is not None:
            header.append("batch")
        f.write(",".join(header) + "\n")
        for i in range(m.n_cells):
            cells = [repr(float(v)) for v in m.row_dense(i)]
            if m.labels is not None:
                cells.append(m.labels[i])
            if m.batches is not None:
                cells.append(m.batches[i])
            f.write(",".join(cells) + "\n")


def _load_csv(path: str) -> ExpressionMatrix:
    with open(path) as f:
        lines = [line.rstrip("\n") for line in f]
    normalized = any(line.startswith("#") and "schyena: normalized" in line
                     for line in lines[:2])
    first_body = 0
    while first_body < len(lines) and lines[first_body].startswith("#"):
        first_body += 1
    lines = lines[first_body:]
    if not lines:
        raise ParseError("empty file", 1)
    header = lines[0].split(",")
    meta_cols = []
    while header and header[-1] in ("label", "batch"):
        meta_cols.insert(0, header.pop())
    gene_ids = header
    if not gene_ids:
        raise ParseError("no gene columns in header", 1)
    n_genes = len(gene_ids)
    rows = []
    labels = [] if "label" in meta_cols else None
    batches = [] if "batch" in meta_cols else None
    for lineno, line in enumerate(lines[1:], start=first_body + 2):
        if not line:
            continue
        parts = line.split(",")
        if len(parts) != n_genes + len(meta_cols):
            raise ParseError(
                f"expected {n_genes + len(meta_cols)} fields, got {len(parts)}", lineno
            )
        try:
            dense = np.array([float(p) for p in parts[:n_genes]])
        except ValueError:
            raise ParseError(f"non-numeric expression value in {line!r}", lineno) from None
        idx = np.flatnonzero(dense)
        rows.append((idx.astype(np.int64), dense[idx]))
        meta = parts[n_genes:]
        for col, value in zip(meta_cols, meta):
            if col == "label":
                labels.append(value)
            else:
                batches.append(value)
    return ExpressionMatrix(n_genes=n_genes, gene_ids=gene_ids, rows=rows,
                            labels=labels, batches=batches, normalized=normalized)


# ---------------------------------------------------------------------------
# gene-vocabulary mapping


def load_gene_mapping(path: str) -> dict[str, str]:
    mapping = {}
    with open(path) as f:
        for lineno, line in enumerate(f, start=1):
            text = line.strip()
            if not text or text.startswith("#"):
                continue
            parts = text.split()
            if len(parts) != 2:
                raise ParseError(f"expected 'source target', got {text!r}", lineno)
            mapping[parts[0]] = parts[1]
    return mapping


def apply_gene_mapping(m: ExpressionMatrix, mapping: dict[str, str]):
    """Rename genes to a stable vocabulary; returns (matrix, rejected ids).

    Unmatched source ids are dropped and reported.  When several sources
    map to one target, their counts are summed into a single column.
    """
    rejected = [g for g in m.gene_ids if g not in mapping]
    target_order: list[str] = []
    target_pos: dict[str, int] = {}
    col_map = np.full(m.n_genes, -1, dtype=np.int64)
    for j, g in enumerate(m.gene_ids):
        if g not in mapping:
            continue
        t = mapping[g]
        if t not in target_pos:
            target_pos[t] = len(target_order)
            target_order.append(t)
        col_map[j] = target_pos[t]
    rows = []
    for idx, vals in m.rows:
        dest = col_map[idx]
        keep = dest >= 0
        acc = np.zeros(len(target_order))
        np.add.at(acc, dest[keep], vals[keep])
        nz = np.flatnonzero(acc)
        rows.append((nz.astype(np.int64), acc[nz]))
    out = ExpressionMatrix(
        n_genes=len(target_order),
        gene_ids=target_order,
        rows=rows,
        labels=list(m.labels) if m.labels else None,
        batches=list(m.batches) if m.batches else None,
        cell_ids=list(m.cell_ids) if m.cell_ids else None,
        normalized=m.normalized,
    )
    return out, rejected


# ---------------------------------------------------------------------------
# splitting


def split_indices(n: int, test_fraction: float, seed: int):
    if not 0.0 < test_fraction < 1.0:
        raise ContractError(f"test_fraction must be in (0, 1), got {test_fraction}")
    rng = np.random.default_rng(seed)
    order = rng.permutation(n)
    n_test = int(round(n * test_fraction))
    test = np.sort(order[:n_test])
    train = np.sort(order[n_test:])
    return train, test


def split_train_test(m: ExpressionMatrix, test_fraction: float, seed: int):
    """Seeded uniform cell partition; tags each half with its provenance."""
    train_idx, test_idx = split_indices(m.n_cells, test_fraction, seed)
    return (
        m.subset(train_idx, provenance="train"),
        m.subset(test_idx, provenance="test"),
    )
