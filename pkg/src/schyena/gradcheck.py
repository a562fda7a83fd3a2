"""Gradient verification battery shared by the test suite and the CLI.

Every check compares a reverse-mode gradient against central finite
differences on the same scalar.  The reported error is the max absolute
difference scaled by the largest finite-difference magnitude, with an
absolute fallback when the reference gradient is essentially zero.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import MaskPlan
from .fftconv import ConvMode, long_conv, tap_count
from .hyena import ImplicitFilter, materialize_filter, project_input
from .model import ModelConfig, ModelParams, forward_classify, forward_mem
from .training import classify_loss, mem_loss

FD_STEP = 1e-5


def max_rel_err(computed: np.ndarray, reference: np.ndarray, floor: float = 1e-8) -> float:
    computed = np.asarray(computed, dtype=np.float64)
    reference = np.asarray(reference, dtype=np.float64)
    scale = max(float(np.abs(reference).max(initial=0.0)), floor)
    return float(np.abs(computed - reference).max(initial=0.0)) / scale


@dataclass
class CheckResult:
    name: str
    error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.error < self.tolerance


def _check(name: str, loss_fn, tensors: dict[str, Tensor], tolerance: float) -> CheckResult:
    """Backward once, then finite-difference each tensor through loss_fn."""
    for t in tensors.values():
        t.grad = None
    loss = loss_fn()
    ad.backward(loss)
    worst = 0.0
    for t in tensors.values():
        fd = ad.finite_diff_grad(lambda _: loss_fn(), t, FD_STEP)
        got = t.grad if t.grad is not None else np.zeros_like(t.data)
        worst = max(worst, max_rel_err(got, fd))
    return CheckResult(name=name, error=worst, tolerance=tolerance)


def check_matmul(rng) -> CheckResult:
    a = Tensor(rng.uniform(-2, 2, (3, 4)), requires_grad=True)
    b = Tensor(rng.uniform(-2, 2, (4, 2)), requires_grad=True)
    return _check("matmul", lambda: ad.tensor_sum(ad.matmul(a, b)), {"a": a, "b": b}, 1e-6)


def check_elementwise(rng) -> CheckResult:
    a = Tensor(rng.uniform(-2, 2, (5, 3)), requires_grad=True)
    b = Tensor(rng.uniform(-2, 2, (5, 3)), requires_grad=True)
    return _check(
        "elementwise",
        lambda: ad.tensor_sum(ad.mul(ad.add(a, b), b)),
        {"a": a, "b": b},
        1e-6,
    )


def check_layer_norm(rng) -> CheckResult:
    x = Tensor(rng.uniform(-2, 2, (4, 6)), requires_grad=True)
    gain = Tensor(rng.uniform(0.5, 1.5, 6), requires_grad=True)
    bias = Tensor(rng.uniform(-0.5, 0.5, 6), requires_grad=True)
    w = rng.uniform(-1, 1, (4, 6))
    return _check(
        "layer_norm",
        lambda: ad.tensor_sum(ad.mul(ad.layer_norm(x, gain, bias), Tensor(w))),
        {"x": x, "gain": gain, "bias": bias},
        1e-5,
    )


def check_gather(rng) -> CheckResult:
    table = Tensor(rng.uniform(-2, 2, (4, 3)), requires_grad=True)
    idx = [1, 1, 3, 0]
    w = rng.uniform(-1, 1, (4, 3))
    return _check(
        "gather_rows",
        lambda: ad.tensor_sum(ad.mul(ad.gather_rows(table, idx), Tensor(w))),
        {"table": table},
        1e-6,
    )


def check_conv(mode: ConvMode, rng) -> CheckResult:
    length = 6
    u = Tensor(rng.uniform(-2, 2, (length, 2)), requires_grad=True)
    taps = Tensor(rng.uniform(-2, 2, (tap_count(mode, length), 2)), requires_grad=True)
    w = rng.uniform(-1, 1, (length, 2))
    return _check(
        f"long_conv[{mode.value}]",
        lambda: ad.tensor_sum(ad.mul(long_conv(u, taps, mode), Tensor(w))),
        {"u": u, "taps": taps},
        1e-6,
    )


def check_implicit_filter(rng) -> CheckResult:
    f = ImplicitFilter.init(channels=3, hidden=8, n_freqs=4, rng=rng)
    tensors = dict(f.named_parameters("filter"))
    w = rng.uniform(-1, 1, (2 * 5 - 1, 3))
    return _check(
        "implicit_filter",
        lambda: ad.tensor_sum(
            ad.mul(materialize_filter(f, 5, ConvMode.BIDIRECTIONAL), Tensor(w))
        ),
        tensors,
        1e-4,
    )


def check_projection(rng) -> CheckResult:
    from .hyena import HyenaParams

    p = HyenaParams.init(width=3, order=2, filter_hidden=8, filter_freqs=4, rng=rng)
    u = Tensor(rng.uniform(-2, 2, (5, 3)), requires_grad=True)
    tensors = dict(p.named_parameters("hyena"))
    tensors["u"] = u
    weights = [rng.uniform(-1, 1, (5, 3)) for _ in range(3)]

    def loss_fn():
        streams = project_input(u, p)
        total = ad.tensor_sum(ad.mul(streams[0], Tensor(weights[0])))
        for s, w in zip(streams[1:], weights[1:]):
            total = ad.add(total, ad.tensor_sum(ad.mul(s, Tensor(w))))
        return total

    return _check("project_input", loss_fn, tensors, 1e-4)


def check_model(rng, n_genes: int = 8, width: int = 4, n_blocks: int = 2,
                order: int = 2) -> CheckResult:
    """Every parameter of a small stacked model, through both task losses."""
    config = ModelConfig(n_genes=n_genes, width=width, n_blocks=n_blocks, order=order,
                         filter_hidden=8, filter_freqs=4, n_classes=3)
    model = ModelParams.init(config, seed=int(rng.integers(1 << 31)))
    values = rng.uniform(0.0, 2.0, n_genes)
    values[rng.random(n_genes) < 0.3] = 0.0
    masked = rng.choice(n_genes, size=max(2, n_genes // 3), replace=False)
    mask = MaskPlan(np.sort(masked), values[np.sort(masked)] == 0.0, p_nonzero=0.0)
    label = int(rng.integers(config.n_classes))

    def loss_fn():
        mem = mem_loss(forward_mem(values, mask, model), values, mask)
        cls = classify_loss(forward_classify(values, model), label)
        return ad.add(mem, cls)

    return _check("model", loss_fn, dict(model.named_parameters()), 1e-4)


def run_gradient_suite(seed: int = 0) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    return [
        check_matmul(rng),
        check_elementwise(rng),
        check_layer_norm(rng),
        check_gather(rng),
        check_conv(ConvMode.CAUSAL, rng),
        check_conv(ConvMode.BIDIRECTIONAL, rng),
        check_implicit_filter(rng),
        check_projection(rng),
        check_model(rng),
    ]
