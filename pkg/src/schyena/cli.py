"""Command-line surface.

Every subcommand accepts ``--config <json>`` and ``--seed``; commands that
write files take ``--out <dir>``.  Failures exit nonzero with one
machine-readable JSON line on stderr.

Config document sections (each command reads what it needs)::

    {
      "data":      {"path": "corpus.mtx", "format": "mtx", "mapping": null},
      "model":     {"width": 64, "n_blocks": 4, "order": 3,
                    "filter_hidden": 32, "filter_freqs": 8, "n_classes": 9},
      "train":     {"epochs": 2, "batch_size": 8, "lr": 1e-4,
                    "weight_decay": 0.01, "validation_fraction": 0.1, "seed": 0},
      "synthetic": {"n_cells": 400, "n_genes": 256, "n_types": 4,
                    "program_size": 16, "boost": 20.0, "dropout": 0.3, "seed": 0},
      "checkpoint": "runs/pretrain/checkpoint",
      "baseline":  true
    }
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .data import (
    ExpressionMatrix,
    SyntheticSpec,
    apply_gene_mapping,
    generate_synthetic,
    load_gene_mapping,
    load_matrix,
    preprocess,
    save_matrix,
)
from .errors import ConfigurationError
from .evaluate import (
    evaluate_imputation,
    export_embeddings,
    f1_report,
    gene_mean_predictor,
    impute_matrix,
)
from .fftconv import bench_conv
from .gradcheck import run_gradient_suite
from .model import ModelConfig, ModelParams, forward_classify
from .training import TrainConfig, finetune, pretrain
from . import autodiff as ad


def _load_config(args) -> dict:
    if not args.config:
        raise ConfigurationError("this command needs --config <json>")
    with open(args.config) as f:
        return json.load(f)


def _outdir(args) -> str:
    out = args.out or "."
    os.makedirs(out, exist_ok=True)
    return out


def _load_corpus(config: dict, normalize: bool = True) -> ExpressionMatrix:
    data = config.get("data")
    if not data or "path" not in data:
        raise ConfigurationError("config needs a data section with a path")
    m = load_matrix(data["path"], data.get("format", "mtx"))
    mapping_path = data.get("mapping")
    if mapping_path:
        m, rejected = apply_gene_mapping(m, load_gene_mapping(mapping_path))
        if rejected:
            print(f"gene mapping dropped {len(rejected)} unmatched ids", file=sys.stderr)
    if normalize and not m.normalized:
        m = preprocess(m)
    return m


def _model_config(config: dict, n_genes: int) -> ModelConfig:
    section = dict(config.get("model", {}))
    section.setdefault("n_genes", n_genes)
    if section["n_genes"] != n_genes:
        raise ConfigurationError(
            f"model covers {section['n_genes']} genes, corpus has {n_genes}"
        )
    return ModelConfig(**section)


def _train_config(config: dict, task: str, seed_override) -> TrainConfig:
    section = dict(config.get("train", {}))
    section.pop("task", None)
    if seed_override is not None:
        section["seed"] = seed_override
    if task == "pretrain":
        return TrainConfig.pretraining(**section)
    return TrainConfig.finetuning(task, **section)


def _load_model(config: dict, corpus: ExpressionMatrix, seed) -> tuple[ModelParams, dict]:
    ckpt = config.get("checkpoint")
    if ckpt:
        model, extra = load_checkpoint(ckpt)
        if model.config.n_genes != corpus.n_genes:
            raise ConfigurationError(
                f"checkpoint covers {model.config.n_genes} genes, corpus has {corpus.n_genes}"
            )
        return model, extra
    return ModelParams.init(_model_config(config, corpus.n_genes), seed=seed or 0), {}


def _write_trace(trace: list[dict], path: str) -> None:
    with open(path, "w") as f:
        f.write("step,loss,lr,p\n")
        for row in trace:
            f.write(f"{row['step']},{row['loss']!r},{row['lr']!r},{row['p']!r}\n")


def _write_history(history: list[dict], path: str) -> None:
    with open(path, "w") as f:
        f.write("epoch,train_loss,val_metric\n")
        for row in history:
            f.write(f"{row['epoch']},{row['train_loss']!r},{row['val_metric']!r}\n")


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth(args) -> int:
    config = _load_config(args)
    section = dict(config.get("synthetic", {}))
    if args.seed is not None:
        section["seed"] = args.seed
    spec = SyntheticSpec(**section)
    m = generate_synthetic(spec)
    out = _outdir(args)
    path = os.path.join(out, "matrix.mtx")
    save_matrix(m, path, "mtx")
    print(f"wrote {path}: {m.n_cells} cells x {m.n_genes} genes")
    return 0


def cmd_preprocess(args) -> int:
    config = _load_config(args)
    m = _load_corpus(config, normalize=False)
    m = preprocess(m)
    out = _outdir(args)
    fmt = config.get("data", {}).get("format", "mtx")
    path = os.path.join(out, f"preprocessed.{fmt}")
    save_matrix(m, path, fmt)
    print(f"wrote {path}: {m.n_cells} cells kept")
    return 0


def cmd_pretrain(args) -> int:
    config = _load_config(args)
    corpus = _load_corpus(config)
    train_cfg = _train_config(config, "pretrain", args.seed)
    model = ModelParams.init(_model_config(config, corpus.n_genes), seed=train_cfg.seed)
    result = pretrain(corpus, train_cfg, model)
    out = _outdir(args)
    save_checkpoint(result.model, os.path.join(out, "checkpoint"))
    _write_trace(result.trace, os.path.join(out, "loss_trace.csv"))
    final = result.trace[-1]["loss"] if result.trace else float("nan")
    print(f"pretrained {len(result.trace)} steps, final loss {final:.4f}")
    return 0


def _cmd_finetune(args, task: str) -> int:
    config = _load_config(args)
    corpus = _load_corpus(config)
    train_cfg = _train_config(config, task, args.seed)
    model, extra = _load_model(config, corpus, train_cfg.seed)
    if task == "classify" and model.cls_head_w is None:
        raise ConfigurationError(
            "checkpoint has no classification head; set model.n_classes and retrain"
        )
    result = finetune(corpus, train_cfg, model)
    out = _outdir(args)
    if result.classes is not None:
        extra = dict(extra)
        extra["classes"] = result.classes
    save_checkpoint(result.model, os.path.join(out, "checkpoint"), extra=extra)
    _write_history(result.history, os.path.join(out, "history.csv"))
    best = result.history[result.best_epoch]["val_metric"]
    print(f"fine-tuned ({task}); best epoch {result.best_epoch}, val metric {best:.4f}")
    return 0


def cmd_classify(args) -> int:
    config = _load_config(args)
    corpus = _load_corpus(config)
    model, extra = _load_model(config, corpus, args.seed)
    classes = extra.get("classes")
    if classes is None:
        classes = [str(c) for c in range(model.config.n_classes or 0)]
    out = _outdir(args)
    preds = []
    with ad.no_grad():
        for i in range(corpus.n_cells):
            logits = forward_classify(corpus.row_dense(i), model)
            preds.append(int(np.argmax(logits.data)))
    path = os.path.join(out, "predictions.csv")
    with open(path, "w") as f:
        f.write("cell_id,predicted,label\n")
        for i, p in enumerate(preds):
            label = corpus.labels[i] if corpus.labels else ""
            f.write(f"{corpus.cell_id(i)},{classes[p]},{label}\n")
    print(f"wrote {path}")
    if corpus.labels is not None:
        truth = [classes.index(lab) for lab in corpus.labels]
        report = f1_report(truth, preds, len(classes))
        report_path = os.path.join(out, "report.json")
        with open(report_path, "w") as f:
            json.dump(
                {
                    "classes": classes,
                    "confusion": report.confusion.tolist(),
                    "per_class_f1": report.per_class_f1.tolist(),
                    "macro_f1": report.macro_f1,
                    "micro_f1": report.micro_f1,
                    "weighted_f1": report.weighted_f1,
                    "degenerate_classes": report.degenerate_classes,
                },
                f,
                indent=2,
            )
        print(f"macro-F1 {report.macro_f1:.4f}, micro-F1 {report.micro_f1:.4f}")
    return 0


def cmd_impute(args) -> int:
    config = _load_config(args)
    corpus = _load_corpus(config)
    model, _ = _load_model(config, corpus, args.seed)
    dense = impute_matrix(corpus, model, seed=args.seed or 0)
    imputed = ExpressionMatrix.from_dense(
        dense, corpus.gene_ids, corpus.labels, corpus.batches,
        [corpus.cell_id(i) for i in range(corpus.n_cells)], normalized=True,
    )
    out = _outdir(args)
    path = os.path.join(out, "imputed.csv")
    save_matrix(imputed, path, "csv")
    print(f"wrote {path}")
    return 0


def cmd_eval_impute(args) -> int:
    config = _load_config(args)
    corpus = _load_corpus(config)
    model, _ = _load_model(config, corpus, args.seed)
    seed = args.seed or 0
    report = evaluate_imputation(corpus, model, seed=seed)
    rows = [("model", g, s) for g, s in enumerate(report.rows)]
    if config.get("baseline"):
        base = evaluate_imputation(corpus, gene_mean_predictor(corpus), seed=seed)
        rows += [("gene-mean", g, s) for g, s in enumerate(base.rows)]
    out = _outdir(args)
    path = os.path.join(out, "impute_report.csv")
    with open(path, "w") as f:
        f.write("predictor,group,kind,n,mse,pearson\n")
        for predictor, group, score in rows:
            r = "" if score.pearson is None else repr(score.pearson)
            f.write(f"{predictor},{group},{score.kind},{score.n},{score.mse!r},{r}\n")
    for predictor, group, score in rows:
        r = "nan" if score.pearson is None else f"{score.pearson:.4f}"
        print(f"{predictor} group {group}: n={score.n} mse={score.mse:.4f} r={r}")
    print(f"wrote {path}")
    return 0


def cmd_embed(args) -> int:
    config = _load_config(args)
    corpus = _load_corpus(config)
    model, _ = _load_model(config, corpus, args.seed)
    out = _outdir(args)
    path = os.path.join(out, "embeddings.csv")
    export_embeddings(corpus, model, path)
    print(f"wrote {path}: {corpus.n_cells} rows")
    return 0


def cmd_gradcheck(args) -> int:
    results = run_gradient_suite(seed=args.seed or 0)
    ok = True
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        print(f"{status} {r.name}: max rel err {r.error:.3e} (tol {r.tolerance:.0e})")
        ok &= r.passed
    return 0 if ok else 1


def cmd_bench_conv(args) -> int:
    lengths = [int(x) for x in args.lengths.split(",")]
    rows = bench_conv(lengths, reps=args.reps, seed=args.seed or 0)
    out = _outdir(args)
    path = os.path.join(out, "bench_conv.csv")
    with open(path, "w") as f:
        f.write("length,fft_seconds,toeplitz_seconds\n")
        for row in rows:
            f.write(f"{row['length']},{row['fft_seconds']!r},{row['toeplitz_seconds']!r}\n")
    for row in rows:
        print(
            f"L={row['length']}: fft {row['fft_seconds']*1e3:.2f} ms, "
            f"toeplitz {row['toeplitz_seconds']*1e3:.2f} ms"
        )
    print(f"wrote {path}")
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="schyena",
        description="Bidirectional long-convolution model for full-length expression vectors.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    commands = {
        "synth": ("generate a synthetic corpus", cmd_synth),
        "preprocess": ("filter, normalize, and log-transform a corpus", cmd_preprocess),
        "pretrain": ("masked-expression pretraining", cmd_pretrain),
        "finetune-classify": ("fine-tune for cell-type classification",
                              lambda a: _cmd_finetune(a, "classify")),
        "finetune-impute": ("fine-tune for imputation", lambda a: _cmd_finetune(a, "impute")),
        "classify": ("predict cell types with a checkpoint", cmd_classify),
        "impute": ("fill zero entries with model predictions", cmd_impute),
        "eval-impute": ("score masked-nonzero imputation", cmd_eval_impute),
        "embed": ("export per-cell embeddings", cmd_embed),
        "gradcheck": ("run the gradient verification battery", cmd_gradcheck),
        "bench-conv": ("time FFT vs Toeplitz convolution", cmd_bench_conv),
    }
    for name, (help_text, handler) in commands.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="JSON config document")
        p.add_argument("--seed", type=int, default=None, help="seed override")
        p.add_argument("--out", help="output directory")
        if name == "bench-conv":
            p.add_argument("--lengths", default="1024,8192",
                           help="comma-separated sequence lengths")
            p.add_argument("--reps", type=int, default=3, help="timing repetitions")
        p.set_defaults(handler=handler)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.handler(args)
    except Exception as e:  # noqa: BLE001 - single reporting point for the CLI
        print(json.dumps({"error": type(e).__name__, "message": str(e)}), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
