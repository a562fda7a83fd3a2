"""The bidirectional Hyena operator and its residual block.

One operator applies ``order`` rounds of gated long convolution: the
input is linearly projected into ``order + 1`` streams, sharpened by a
width-3 depthwise convolution, then the value stream is repeatedly
convolved with an implicitly parameterized long filter and gated
elementwise by the next stream.

Filters are not stored as taps.  A small network maps the normalized lag
to one tap per channel, windowed by a per-channel exponential decay, so
the parameter count is independent of sequence length and the same
operator materializes filters for any length it is asked to process.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import DimensionError
from .fftconv import ConvMode, long_conv, tap_count


@dataclass
class ImplicitFilter:
    """Lag-to-tap network: sinusoidal lag features -> sine FFN -> channels.

    Decay rates are stored in log space so they stay positive under
    unconstrained optimization; materialized taps are
    ``ffn(features(t/L)) * exp(-alpha * |t| / L)``.
    """

    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor
    log_decay: Tensor
    n_freqs: int

    @staticmethod
    def init(channels: int, hidden: int, n_freqs: int, rng: np.random.Generator) -> "ImplicitFilter":
        feat_dim = 1 + 2 * n_freqs
        return ImplicitFilter(
            w1=Tensor(rng.normal(0.0, feat_dim**-0.5, (feat_dim, hidden)), requires_grad=True),
            b1=Tensor(np.zeros(hidden), requires_grad=True),
            w2=Tensor(rng.normal(0.0, hidden**-0.5, (hidden, channels)), requires_grad=True),
            b2=Tensor(np.zeros(channels), requires_grad=True),
            log_decay=Tensor(np.log(np.linspace(0.5, 8.0, channels)), requires_grad=True),
            n_freqs=n_freqs,
        )

    def named_parameters(self, prefix: str):
        for name in ("w1", "b1", "w2", "b2", "log_decay"):
            yield f"{prefix}.{name}", getattr(self, name)

    @property
    def n_params(self) -> int:
        return sum(t.data.size for _, t in self.named_parameters(""))


def _lag_features(length: int, mode: ConvMode, n_freqs: int) -> tuple[np.ndarray, np.ndarray]:
    if mode is ConvMode.CAUSAL:
        lags = np.arange(length, dtype=np.float64)
    else:
        lags = np.arange(-(length - 1), length, dtype=np.float64)
    z = lags / length
    cols = [z]
    for k in range(1, n_freqs + 1):
        cols.append(np.sin(2.0 * np.pi * k * z))
        cols.append(np.cos(2.0 * np.pi * k * z))
    return np.stack(cols, axis=1), np.abs(z)


def materialize_filter(f: ImplicitFilter, length: int, mode: ConvMode) -> Tensor:
    """Evaluate the filter network at every lag of the mode's range.

    Returns a (taps x channels) tensor: length rows for causal mode,
    2*length - 1 for bidirectional.  Differentiable in all filter
    parameters.

    Taps are scaled by 1/length so the convolution stays a decaying
    weighted average whatever the sequence length; without this the
    output magnitude grows with length and the gated recurrence blows up
    on long inputs.
    """
    mode = ConvMode(mode)
    feats, abs_z = _lag_features(length, mode, f.n_freqs)
    hidden = ad.sin(ad.add_rowvec(ad.matmul(Tensor(feats), f.w1), f.b1))
    raw = ad.add_rowvec(ad.matmul(hidden, f.w2), f.b2)
    alpha = ad.exp(f.log_decay)
    window = ad.exp(ad.matmul(Tensor(-abs_z[:, None]), ad.reshape(alpha, (1, alpha.data.shape[0]))))
    return ad.scale(ad.mul(raw, window), 1.0 / length)


@dataclass
class HyenaParams:
    """One operator: projections, short depthwise conv, filters, output map."""

    order: int
    in_proj_w: Tensor
    in_proj_b: Tensor
    short_conv: Tensor  # (order+1)*width x 3, one kernel per projected channel
    filters: list[ImplicitFilter]
    out_w: Tensor
    out_b: Tensor

    @staticmethod
    def init(width: int, order: int, filter_hidden: int, filter_freqs: int,
             rng: np.random.Generator) -> "HyenaParams":
        proj = (order + 1) * width
        return HyenaParams(
            order=order,
            in_proj_w=Tensor(rng.normal(0.0, width**-0.5, (width, proj)), requires_grad=True),
            in_proj_b=Tensor(np.zeros(proj), requires_grad=True),
            short_conv=Tensor(rng.normal(0.0, 3**-0.5, (proj, 3)), requires_grad=True),
            filters=[ImplicitFilter.init(width, filter_hidden, filter_freqs, rng)
                     for _ in range(order)],
            out_w=Tensor(rng.normal(0.0, width**-0.5, (width, width)), requires_grad=True),
            out_b=Tensor(np.zeros(width), requires_grad=True),
        )

    def named_parameters(self, prefix: str):
        for name in ("in_proj_w", "in_proj_b", "short_conv"):
            yield f"{prefix}.{name}", getattr(self, name)
        for i, f in enumerate(self.filters):
            yield from f.named_parameters(f"{prefix}.filters.{i}")
        for name in ("out_w", "out_b"):
            yield f"{prefix}.{name}", getattr(self, name)


def depthwise_conv3(z: Tensor, kernels: Tensor) -> Tensor:
    """Width-3 per-channel convolution, symmetric zero padding (non-causal)."""
    if z.data.ndim != 2 or kernels.data.shape != (z.data.shape[1], 3):
        raise DimensionError(
            f"depthwise_conv3: input {z.data.shape} needs kernels "
            f"({z.data.shape[1] if z.data.ndim == 2 else '?'}, 3), got {kernels.data.shape}"
        )
    length = z.data.shape[0]
    zp = np.zeros((length + 2, z.data.shape[1]))
    zp[1 : length + 1] = z.data
    k = kernels.data
    out = zp[:length] * k[:, 0] + zp[1 : length + 1] * k[:, 1] + zp[2 : length + 2] * k[:, 2]

    def backward(g):
        if z.requires_grad:
            acc = np.zeros((length + 2, z.data.shape[1]))
            acc[:length] += g * k[:, 0]
            acc[1 : length + 1] += g * k[:, 1]
            acc[2 : length + 2] += g * k[:, 2]
            z._accumulate(acc[1 : length + 1])
        if kernels.requires_grad:
            dk = np.stack(
                [
                    (zp[:length] * g).sum(axis=0),
                    (zp[1 : length + 1] * g).sum(axis=0),
                    (zp[2 : length + 2] * g).sum(axis=0),
                ],
                axis=1,
            )
            kernels._accumulate(dk)

    return ad._result(out, (z, kernels), backward)


def project_input(u: Tensor, p: HyenaParams) -> list[Tensor]:
    """Linear map to (order+1) streams, then the short depthwise conv."""
    z = ad.add_rowvec(ad.matmul(u, p.in_proj_w), p.in_proj_b)
    z = depthwise_conv3(z, p.short_conv)
    width = u.data.shape[1]
    return [ad.slice_cols(z, n * width, (n + 1) * width) for n in range(p.order + 1)]


def hyena_recurrence(value: Tensor, gates: list[Tensor], taps_list: list[Tensor],
                     mode: ConvMode, backend: str = "fft") -> Tensor:
    """The core recurrence: convolve, then gate, once per round.

    ``z_0`` is the value stream; ``z_n = gates[n-1] * conv(z_{n-1},
    taps_list[n-1])``.  Exposed separately so explicit taps (impulses,
    hand-built filters) can drive it directly.
    """
    if len(gates) != len(taps_list):
        raise DimensionError(f"{len(gates)} gates for {len(taps_list)} filters")
    z = value
    for gate, taps in zip(gates, taps_list):
        z = ad.mul(gate, long_conv(z, taps, mode, backend))
    return z


def hyena_forward(u: Tensor, p: HyenaParams, mode: ConvMode, backend: str = "fft") -> Tensor:
    """Project, materialize filters, run the recurrence, map back out."""
    mode = ConvMode(mode)
    length = u.data.shape[0]
    streams = project_input(u, p)
    taps_list = [materialize_filter(f, length, mode) for f in p.filters]
    z = hyena_recurrence(streams[0], streams[1:], taps_list, mode, backend)
    return ad.add_rowvec(ad.matmul(z, p.out_w), p.out_b)


@dataclass
class HyenaBlock:
    """Pre-norm residual block: operator sublayer then 4x-wide GELU FFN."""

    norm1_gain: Tensor
    norm1_bias: Tensor
    hyena: HyenaParams
    norm2_gain: Tensor
    norm2_bias: Tensor
    ffn_w1: Tensor
    ffn_b1: Tensor
    ffn_w2: Tensor
    ffn_b2: Tensor

    @staticmethod
    def init(width: int, order: int, filter_hidden: int, filter_freqs: int,
             rng: np.random.Generator) -> "HyenaBlock":
        return HyenaBlock(
            norm1_gain=Tensor(np.ones(width), requires_grad=True),
            norm1_bias=Tensor(np.zeros(width), requires_grad=True),
            hyena=HyenaParams.init(width, order, filter_hidden, filter_freqs, rng),
            norm2_gain=Tensor(np.ones(width), requires_grad=True),
            norm2_bias=Tensor(np.zeros(width), requires_grad=True),
            ffn_w1=Tensor(rng.normal(0.0, width**-0.5, (width, 4 * width)), requires_grad=True),
            ffn_b1=Tensor(np.zeros(4 * width), requires_grad=True),
            ffn_w2=Tensor(rng.normal(0.0, (4 * width) ** -0.5, (4 * width, width)), requires_grad=True),
            ffn_b2=Tensor(np.zeros(width), requires_grad=True),
        )

    def named_parameters(self, prefix: str):
        for name in ("norm1_gain", "norm1_bias"):
            yield f"{prefix}.{name}", getattr(self, name)
        yield from self.hyena.named_parameters(f"{prefix}.hyena")
        for name in ("norm2_gain", "norm2_bias", "ffn_w1", "ffn_b1", "ffn_w2", "ffn_b2"):
            yield f"{prefix}.{name}", getattr(self, name)


def block_forward(u: Tensor, b: HyenaBlock, mode: ConvMode, backend: str = "fft") -> Tensor:
    h = ad.add(u, hyena_forward(ad.layer_norm(u, b.norm1_gain, b.norm1_bias), b.hyena, mode, backend))
    f = ad.layer_norm(h, b.norm2_gain, b.norm2_bias)
    f = ad.gelu(ad.add_rowvec(ad.matmul(f, b.ffn_w1), b.ffn_b1))
    f = ad.add_rowvec(ad.matmul(f, b.ffn_w2), b.ffn_b2)
    return ad.add(h, f)
