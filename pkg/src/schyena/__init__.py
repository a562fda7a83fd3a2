"""Bidirectional Hyena model over full-length gene-expression vectors.

Subpackage map:

* :mod:`schyena.autodiff` — float64 tensors with reverse-mode gradients.
* :mod:`schyena.fftconv` — exact long convolution (FFT fast path, Toeplitz oracle).
* :mod:`schyena.hyena` — implicit filters, the gated operator, residual blocks.
* :mod:`schyena.model` — adaptor, gene embeddings, block stack, task heads.
* :mod:`schyena.data` — ingestion, preprocessing, masking, synthetic corpora.
* :mod:`schyena.training` — masked-expression pretraining and both fine-tunes.
* :mod:`schyena.evaluate` — F1 / MSE / Pearson reports, imputation, embeddings.
* :mod:`schyena.checkpoint` — manifest + raw-tensor persistence.
* :mod:`schyena.cli` — the ``schyena`` command.
"""

from .autodiff import Tensor, backward, finite_diff_grad, no_grad
from .data import (
    ExpressionMatrix,
    MaskPlan,
    SyntheticSpec,
    generate_synthetic,
    load_matrix,
    make_imputation_mask,
    make_mem_mask,
    partition_eval_groups,
    preprocess,
    save_matrix,
    split_train_test,
)
from .evaluate import evaluate_imputation, export_embeddings, f1_report, impute_matrix, mse_pearson
from .fftconv import ConvMode, Filter, fft, fft_conv, ifft, toeplitz_conv
from .checkpoint import load_checkpoint, save_checkpoint
from .hyena import (
    HyenaBlock,
    HyenaParams,
    ImplicitFilter,
    block_forward,
    hyena_forward,
    hyena_recurrence,
    materialize_filter,
    project_input,
)
from .model import (
    ModelConfig,
    ModelParams,
    embed,
    extract_cell_embedding,
    forward_classify,
    forward_mem,
)
from .training import AdamW, TrainConfig, classify_loss, finetune, mem_loss, pretrain

__version__ = "0.1.0"

__all__ = [
    "AdamW",
    "ConvMode",
    "ExpressionMatrix",
    "Filter",
    "HyenaBlock",
    "HyenaParams",
    "ImplicitFilter",
    "MaskPlan",
    "ModelConfig",
    "ModelParams",
    "SyntheticSpec",
    "Tensor",
    "TrainConfig",
    "backward",
    "block_forward",
    "classify_loss",
    "embed",
    "evaluate_imputation",
    "export_embeddings",
    "extract_cell_embedding",
    "f1_report",
    "fft",
    "fft_conv",
    "finetune",
    "finite_diff_grad",
    "forward_classify",
    "forward_mem",
    "generate_synthetic",
    "hyena_forward",
    "hyena_recurrence",
    "ifft",
    "materialize_filter",
    "project_input",
    "impute_matrix",
    "load_checkpoint",
    "load_matrix",
    "make_imputation_mask",
    "make_mem_mask",
    "mem_loss",
    "mse_pearson",
    "no_grad",
    "partition_eval_groups",
    "preprocess",
    "pretrain",
    "save_checkpoint",
    "save_matrix",
    "split_train_test",
    "toeplitz_conv",
]
