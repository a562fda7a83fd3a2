"""Exact long linear convolution, causal or bidirectional.

The fast path pads both signals to a power of two at least as long as
the full linear-convolution output, multiplies radix-2 FFT spectra, and
slices the mode's output window.  A quadratic Toeplitz matrix-vector
product provides the reference oracle.

FFT roundoff would otherwise leak tiny nonzeros into lags the filter
cannot reach, so ``_full_conv`` zeroes everything outside the exact
support interval implied by its operands.  That keeps causality claims
exact: the gradient of a causal output with respect to a later input is
0.0, not 1e-17.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from enum import Enum

import numpy as np

from . import autodiff as ad
from .errors import ContractError, DimensionError


class ConvMode(Enum):
    CAUSAL = "causal"
    BIDIRECTIONAL = "bidirectional"


def tap_count(mode: ConvMode, length: int) -> int:
    """Filter length for a target sequence length: lags [0, L) or (-L, L)."""
    return length if mode is ConvMode.CAUSAL else 2 * length - 1


@dataclass
class Filter:
    """Convolution taps indexed by lag.

    Causal taps cover lags 0 .. L-1; bidirectional taps cover lags
    -(L-1) .. L-1, stored in ascending lag order (index lag + L - 1).
    """

    taps: np.ndarray
    mode: ConvMode
    length: int

    def __post_init__(self):
        self.taps = np.asarray(self.taps, dtype=np.float64)
        self.mode = ConvMode(self.mode)
        expected = tap_count(self.mode, self.length)
        if self.taps.shape != (expected,):
            raise DimensionError(
                f"filter for L={self.length} ({self.mode.value}) needs "
                f"{expected} taps, got shape {self.taps.shape}"
            )


# ---------------------------------------------------------------------------
# radix-2 FFT


_REV_CACHE: dict[int, np.ndarray] = {}
_TWIDDLE_CACHE: dict[tuple[int, bool], np.ndarray] = {}


def _bit_reversal(n: int) -> np.ndarray:
    rev = _REV_CACHE.get(n)
    if rev is None:
        bits = n.bit_length() - 1
        idx = np.arange(n)
        rev = np.zeros(n, dtype=np.int64)
        for b in range(bits):
            rev |= ((idx >> b) & 1) << (bits - 1 - b)
        _REV_CACHE[n] = rev
    return rev


def _twiddles(size: int, inverse: bool) -> np.ndarray:
    key = (size, inverse)
    tw = _TWIDDLE_CACHE.get(key)
    if tw is None:
        sign = 1.0 if inverse else -1.0
        tw = np.exp(sign * 2j * np.pi * np.arange(size // 2) / size)[None, :, None]
        _TWIDDLE_CACHE[key] = tw
    return tw


def _fft_core(x: np.ndarray, inverse: bool) -> np.ndarray:
    n = x.shape[0]
    if n & (n - 1):
        raise ContractError(f"fft: length {n} is not a power of two")
    orig_shape = x.shape
    y = np.array(x, dtype=np.complex128, copy=True).reshape(n, -1)
    if n > 1:
        y = np.ascontiguousarray(y[_bit_reversal(n)])
        size = 2
        while size <= n:
            half = size // 2
            tw = _twiddles(size, inverse)
            v = y.reshape(n // size, size, -1)
            even = v[:, :half]
            odd = v[:, half:]
            t = odd * tw
            np.subtract(even, t, out=odd)
            even += t
            size *= 2
    y = y.reshape(orig_shape)
    if inverse:
        y = y / n
    return y


def fft(x) -> np.ndarray:
    """Radix-2 DFT of a power-of-two-length sequence (vectorized over columns)."""
    return _fft_core(np.asarray(x), inverse=False)


def ifft(x) -> np.ndarray:
    """Inverse of :func:`fft`; ``ifft(fft(x)) == x`` to 1e-10."""
    return _fft_core(np.asarray(x), inverse=True)


# ---------------------------------------------------------------------------
# linear convolution


def _support(a: np.ndarray):
    """Per-column (first, last, any) nonzero rows of a 2-d array."""
    nz = a != 0.0
    has = nz.any(axis=0)
    first = nz.argmax(axis=0)
    last = a.shape[0] - 1 - nz[::-1].argmax(axis=0)
    return first, last, has


def _full_conv(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Full linear convolution along axis 0, exact outside the true support."""
    n, m = a.shape[0], b.shape[0]
    out_len = n + m - 1
    size = 1
    while size < out_len:
        size *= 2
    a2 = a.reshape(n, -1)
    b2 = b.reshape(m, -1)
    c = a2.shape[1]
    # one transform of both operands stacked side by side
    packed = np.zeros((size, 2 * c), dtype=np.complex128)
    packed[:n, :c] = a2
    packed[:m, c:] = b2
    spectra = fft(packed)
    y = ifft(spectra[:, :c] * spectra[:, c:]).real[:out_len]
    fa, la, ha = _support(a2)
    fb, lb, hb = _support(b2)
    rows = np.arange(out_len)[:, None]
    outside = (rows < (fa + fb)[None, :]) | (rows > (la + lb)[None, :])
    outside |= ~(ha & hb)[None, :]
    y[outside] = 0.0
    if a.ndim == 1:
        return y[:, 0]
    return y


def _mode_slice(mode: ConvMode, length: int) -> slice:
    # full conv of u (length L) with the mode's taps; the L outputs sit at
    # offset 0 (causal) or L-1 (bidirectional, where tap index 0 is lag 1-L)
    return slice(0, length) if mode is ConvMode.CAUSAL else slice(length - 1, 2 * length - 1)


def _conv_cols(u: np.ndarray, taps: np.ndarray, mode: ConvMode) -> np.ndarray:
    return _full_conv(u, taps)[_mode_slice(mode, u.shape[0])]


def _check_lengths(u: np.ndarray, h: Filter) -> None:
    if u.shape[0] != h.length:
        raise DimensionError(
            f"input length {u.shape[0]} does not match filter target length {h.length}"
        )


def fft_conv(u, h: Filter) -> np.ndarray:
    """O(L log L) convolution; equals :func:`toeplitz_conv` to 1e-9."""
    u = np.asarray(u, dtype=np.float64)
    _check_lengths(u, h)
    return _conv_cols(u, h.taps, h.mode)


def toeplitz_conv(u, h: Filter) -> np.ndarray:
    """O(L^2) reference: materialize the lag matrix in row blocks and multiply."""
    u = np.asarray(u, dtype=np.float64)
    _check_lengths(u, h)
    length = h.length
    out = np.empty(length, dtype=np.float64)
    cols = np.arange(length)
    block = max(1, 4_000_000 // max(length, 1))
    for start in range(0, length, block):
        stop = min(start + block, length)
        lag = np.arange(start, stop)[:, None] - cols[None, :]
        if h.mode is ConvMode.CAUSAL:
            valid = lag >= 0
            rows = np.where(valid, h.taps[np.where(valid, lag, 0)], 0.0)
        else:
            rows = h.taps[lag + (length - 1)]
        out[start:stop] = rows @ u
    return out


# ---------------------------------------------------------------------------
# differentiable multi-channel convolution (one filter per column)

_PHASE_CACHE: dict[tuple[int, int], np.ndarray] = {}


def _reversal_phase(size: int, m: int) -> np.ndarray:
    """For real x of length m zero-padded to ``size``:
    fft(reverse(x)) == phase * conj(fft(x)) with this phase."""
    key = (size, m)
    phase = _PHASE_CACHE.get(key)
    if phase is None:
        phase = np.exp(-2j * np.pi * np.arange(size) * (m - 1) / size)[:, None]
        _PHASE_CACHE[key] = phase
    return phase


def _zero_outside_support(y: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    fa, la, ha = _support(a)
    fb, lb, hb = _support(b)
    rows = np.arange(y.shape[0])[:, None]
    outside = (rows < (fa + fb)[None, :]) | (rows > (la + lb)[None, :])
    outside |= ~(ha & hb)[None, :]
    y[outside] = 0.0
    return y


def long_conv(u: ad.Tensor, taps: ad.Tensor, mode: ConvMode, backend: str = "fft") -> ad.Tensor:
    """Convolve each column of ``u`` (L x D) with its own filter column.

    Gradients: the input gradient is convolution with the lag-reversed
    filter; the tap gradient is the cross-correlation of the input with
    the output gradient.  The backward pass reuses the forward spectra
    (reversing a real signal only conjugates its spectrum up to a phase),
    so it costs one FFT of the output gradient plus one stacked inverse.
    """
    mode = ConvMode(mode)
    length = u.data.shape[0]
    expected = tap_count(mode, length)
    if u.data.ndim != 2 or taps.data.ndim != 2 or taps.data.shape != (expected, u.data.shape[1]):
        raise DimensionError(
            f"long_conv: input {u.data.shape} needs taps ({expected}, "
            f"{u.data.shape[1] if u.data.ndim == 2 else '?'}), got {taps.data.shape}"
        )
    channels = u.data.shape[1]
    out_len = length + expected - 1
    size = 1
    while size < out_len:
        size *= 2
    window = _mode_slice(mode, length)

    if backend == "fft":
        packed = np.zeros((size, 2 * channels), dtype=np.complex128)
        packed[:length, :channels] = u.data
        packed[:expected, channels:] = taps.data
        spectra = fft(packed)
        spec_u = spectra[:, :channels]
        spec_taps = spectra[:, channels:]
        full = ifft(spec_u * spec_taps).real[:out_len]
        _zero_outside_support(full, u.data, taps.data)
        data = full[window].copy()
    elif backend == "toeplitz":
        spec_u = spec_taps = None
        data = np.empty_like(u.data)
        for c in range(channels):
            data[:, c] = toeplitz_conv(u.data[:, c], Filter(taps.data[:, c], mode, length))
    else:
        raise ContractError(f"long_conv: unknown backend {backend!r}")

    def backward(g):
        nonlocal spec_u, spec_taps
        if spec_u is None:  # toeplitz forward still backpropagates via FFT
            packed = np.zeros((size, 2 * channels), dtype=np.complex128)
            packed[:length, :channels] = u.data
            packed[:expected, channels:] = taps.data
            spectra = fft(packed)
            spec_u = spectra[:, :channels]
            spec_taps = spectra[:, channels:]
        buf = np.zeros((size, channels), dtype=np.complex128)
        if mode is ConvMode.CAUSAL:
            # du = reverse(conv(reverse(g), taps)[:L]); reversal via phase trick
            buf[:length] = g
            spec_g = fft(buf)
            rev_g_spec = _reversal_phase(size, length) * np.conj(spec_g)
            prod_u = rev_g_spec * spec_taps
            prod_taps = spec_g * (_reversal_phase(size, length) * np.conj(spec_u))
        else:
            buf[:length] = g
            spec_g = fft(buf)
            prod_u = spec_g * (_reversal_phase(size, expected) * np.conj(spec_taps))
            prod_taps = spec_g * (_reversal_phase(size, length) * np.conj(spec_u))
        both = ifft(np.concatenate([prod_u, prod_taps], axis=1)).real
        if u.requires_grad:
            if mode is ConvMode.CAUSAL:
                du_full = _zero_outside_support(
                    both[: 2 * length - 1, :channels], g[::-1], taps.data
                )
                u._accumulate(du_full[:length][::-1])
            else:
                du_full = _zero_outside_support(
                    both[:out_len, :channels], g, taps.data[::-1]
                )
                u._accumulate(du_full[length - 1 : 2 * length - 1])
        if taps.requires_grad:
            dt_full = _zero_outside_support(
                both[: 2 * length - 1, channels:], g, u.data[::-1]
            )
            if mode is ConvMode.CAUSAL:
                taps._accumulate(dt_full[length - 1 : 2 * length - 1])
            else:
                taps._accumulate(dt_full)

    return ad._result(data, (u, taps), backward)


# ---------------------------------------------------------------------------
# scaling benchmark


def bench_conv(lengths, reps: int = 3, seed: int = 0) -> list[dict]:
    """Time both convolution paths (bidirectional mode) per length."""
    rng = np.random.default_rng(seed)
    rows = []
    for length in lengths:
        u = rng.standard_normal(length)
        h = Filter(rng.standard_normal(2 * length - 1), ConvMode.BIDIRECTIONAL, length)
        fft_conv(u, h)  # warm up
        t_fft = min(_timed(fft_conv, u, h) for _ in range(reps))
        t_toe = min(_timed(toeplitz_conv, u, h) for _ in range(reps))
        rows.append({"length": length, "fft_seconds": t_fft, "toeplitz_seconds": t_toe})
    return rows


def _timed(fn, *args) -> float:
    t0 = time.perf_counter()
    fn(*args)
    return time.perf_counter() - t0
