"""Full network: expression adaptor, gene embeddings, block stack, heads.

A cell enters as its vector of log-normalized expression values, one per
gene.  Each position is embedded as ``value * w + b`` through a linear
adaptor (no binning), the gene's own embedding is added in place of any
positional encoding, and masked positions carry a learned mask embedding
instead of their value.  Bidirectional blocks then mix the whole
sequence; task heads read either every position (expression regression)
or a prepended classification token.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigurationError
from .fftconv import ConvMode
from .hyena import HyenaBlock, block_forward


@dataclass
class ModelConfig:
    n_genes: int
    width: int = 128
    n_blocks: int = 4
    order: int = 3
    filter_hidden: int = 32
    filter_freqs: int = 8
    n_classes: int | None = None

    def __post_init__(self):
        if self.n_genes < 1 or self.width < 2 or self.n_blocks < 1 or self.order < 1:
            raise ConfigurationError(f"invalid model config: {self}")

    def to_dict(self) -> dict:
        return {
            "n_genes": self.n_genes,
            "width": self.width,
            "n_blocks": self.n_blocks,
            "order": self.order,
            "filter_hidden": self.filter_hidden,
            "filter_freqs": self.filter_freqs,
            "n_classes": self.n_classes,
        }

    @staticmethod
    def from_dict(d: dict) -> "ModelConfig":
        return ModelConfig(**d)


@dataclass
class ModelParams:
    """All learnable state, plus the config that shaped it."""

    config: ModelConfig
    adaptor_w: Tensor
    adaptor_b: Tensor
    gene_table: Tensor
    mask_embedding: Tensor
    cls_embedding: Tensor
    blocks: list[HyenaBlock]
    mem_head_w: Tensor
    mem_head_b: Tensor
    cls_head_w: Tensor | None = None
    cls_head_b: Tensor | None = None
    init_seed: int | None = None

    @staticmethod
    def init(config: ModelConfig, seed: int = 0) -> "ModelParams":
        rng = np.random.default_rng(seed)
        d = config.width
        cls_w = cls_b = None
        if config.n_classes is not None:
            cls_w = Tensor(rng.normal(0.0, d**-0.5, (d, config.n_classes)), requires_grad=True)
            cls_b = Tensor(np.zeros(config.n_classes), requires_grad=True)
        return ModelParams(
            config=config,
            adaptor_w=Tensor(rng.normal(0.0, 0.2, d), requires_grad=True),
            adaptor_b=Tensor(np.zeros(d), requires_grad=True),
            gene_table=Tensor(rng.normal(0.0, 0.2, (config.n_genes, d)), requires_grad=True),
            mask_embedding=Tensor(rng.normal(0.0, 0.2, d), requires_grad=True),
            cls_embedding=Tensor(rng.normal(0.0, 0.2, d), requires_grad=True),
            blocks=[
                HyenaBlock.init(d, config.order, config.filter_hidden, config.filter_freqs, rng)
                for _ in range(config.n_blocks)
            ],
            mem_head_w=Tensor(rng.normal(0.0, d**-0.5, (d, 1)), requires_grad=True),
            mem_head_b=Tensor(np.zeros(1), requires_grad=True),
            cls_head_w=cls_w,
            cls_head_b=cls_b,
            init_seed=seed,
        )

    def named_parameters(self):
        yield "adaptor_w", self.adaptor_w
        yield "adaptor_b", self.adaptor_b
        yield "gene_table", self.gene_table
        yield "mask_embedding", self.mask_embedding
        yield "cls_embedding", self.cls_embedding
        for i, blk in enumerate(self.blocks):
            yield from blk.named_parameters(f"blocks.{i}")
        yield "mem_head_w", self.mem_head_w
        yield "mem_head_b", self.mem_head_b
        if self.cls_head_w is not None:
            yield "cls_head_w", self.cls_head_w
            yield "cls_head_b", self.cls_head_b

    def zero_grad(self) -> None:
        for _, t in self.named_parameters():
            t.grad = None

    def copy_values(self) -> dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self.named_parameters()}

    def load_values(self, values: dict[str, np.ndarray]) -> None:
        for name, t in self.named_parameters():
            t.data[...] = values[name]

    def clone(self) -> "ModelParams":
        return copy.deepcopy(self)


def embed(expressions: np.ndarray, mask, include_cls: bool, params: ModelParams) -> Tensor:
    """Embed one cell; masked positions are value-blind by construction.

    Position i carries ``C_i * w + b + G_i``; a masked position carries
    ``mask_embedding + G_i`` instead.  With ``include_cls`` the class
    token is prepended at position 0 with no gene embedding.
    """
    values = np.asarray(expressions, dtype=np.float64).reshape(-1)
    n = params.config.n_genes
    if values.shape[0] != n:
        raise ConfigurationError(f"expected {n} expression values, got {values.shape[0]}")
    keep = np.ones(n)
    masked = np.zeros(n)
    if mask is not None and len(mask.positions):
        pos = np.asarray(mask.positions, dtype=np.int64)
        bad = pos[(pos < 0) | (pos >= n)]
        if bad.size:
            raise IndexError(f"mask position {int(bad[0])} out of range [0, {n})")
        keep[pos] = 0.0
        masked[pos] = 1.0
    values = values * keep
    d = params.config.width
    e = ad.matmul(Tensor(values[:, None]), ad.reshape(params.adaptor_w, (1, d)))
    e = ad.add(e, ad.matmul(Tensor(keep[:, None]), ad.reshape(params.adaptor_b, (1, d))))
    e = ad.add(e, ad.matmul(Tensor(masked[:, None]), ad.reshape(params.mask_embedding, (1, d))))
    e = ad.add(e, params.gene_table)
    if include_cls:
        e = ad.concat_rows(ad.reshape(params.cls_embedding, (1, d)), e)
    return e


def _run_blocks(e: Tensor, params: ModelParams, backend: str = "fft") -> Tensor:
    for blk in params.blocks:
        e = block_forward(e, blk, ConvMode.BIDIRECTIONAL, backend)
    return e


def forward_mem(expressions, mask, params: ModelParams, backend: str = "fft") -> Tensor:
    """Predict an expression value at every position (length n_genes)."""
    e = _run_blocks(embed(expressions, mask, False, params), params, backend)
    out = ad.add_rowvec(ad.matmul(e, params.mem_head_w), params.mem_head_b)
    return ad.reshape(out, (params.config.n_genes,))


def forward_classify(expressions, params: ModelParams, backend: str = "fft") -> Tensor:
    """Class logits read from the prepended classification token."""
    if params.cls_head_w is None:
        raise ConfigurationError("model has no classification head (n_classes unset)")
    e = _run_blocks(embed(expressions, None, True, params), params, backend)
    token = ad.slice_rows(e, 0, 1)
    logits = ad.add_rowvec(ad.matmul(token, params.cls_head_w), params.cls_head_b)
    return ad.reshape(logits, (params.config.n_classes,))


def extract_cell_embedding(expressions, params: ModelParams) -> np.ndarray:
    """Mean over the position outputs of the final block (no class token)."""
    with ad.no_grad():
        e = _run_blocks(embed(expressions, None, False, params), params)
    return e.data.mean(axis=0)
