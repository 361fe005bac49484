"""Dominant-period detection and period folding for multi-phase signals.

The transform averages the single-sided amplitude spectra of the three
phases, ranks bins by amplitude (DC excluded), maps the top-k frequencies
to integer sample periods, and reshapes the signal into one 2-D view per
period: columns index position within a period, rows count periods.

Two frequency conventions are supported for the bin-to-period mapping:

* ``bin_index`` (default): f is the integer bin index, i.e. cycles per
  window, so p = ceil(L / f) is the true period in samples.
* ``paper_literal``: f is the frequency in hertz (requires the sample
  rate). For a 45 Hz tone in a 0.2 s window of 2048 samples this yields
  ceil(2048 / 45) = 46 samples, which is *not* the physical period of the
  tone (228 samples); the mode exists to reproduce that exact behavior and
  is flagged rather than silently corrected.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ArgumentError, DegenerateInputError, DimensionError, DomainError
from .tensorcore import Tensor, as_tensor, ops

CONVENTIONS = ("bin_index", "paper_literal")


@dataclass(frozen=True)
class PeriodSet:
    """Distinct candidate periods, sorted by descending spectral amplitude."""

    periods: tuple[int, ...]
    amplitudes: tuple[float, ...]
    convention: str

    def __post_init__(self):
        if len(self.periods) != len(set(self.periods)):
            raise ArgumentError("periods must be distinct")
        if any(p < 1 for p in self.periods):
            raise ArgumentError("periods must be positive")
        if list(self.amplitudes) != sorted(self.amplitudes, reverse=True):
            raise ArgumentError("amplitudes must be sorted descending")


@dataclass
class FoldedView:
    """One period-folded 2-D view: tensor [..., rows, period]."""

    tensor: Tensor
    period: int
    pad_len: int
    orig_len: int


def averaged_spectrum(x) -> np.ndarray:
    """Mean single-sided amplitude spectrum over channels: [C, L] -> [L//2 + 1].

    The DC bin is kept in the array but excluded from peak ranking by
    :func:`top_k_periods`.
    """
    data = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
    if data.ndim != 2:
        raise DimensionError(f"averaged_spectrum expects [C, L], got {data.shape}")
    if data.shape[1] < 2:
        raise ArgumentError("signal length must be at least 2")
    if not np.all(np.isfinite(data)):
        raise DomainError("averaged_spectrum requires finite input")
    return np.abs(np.fft.rfft(data, axis=1)).mean(axis=0)


def top_k_periods(
    amplitudes: np.ndarray,
    k: int,
    length: int,
    convention: str = "bin_index",
    sample_rate_hz: float | None = None,
) -> PeriodSet:
    """Pick the k distinct periods of the highest-amplitude spectral bins.

    Bins are ranked by amplitude (ties break toward the lower bin); each
    bin's frequency is mapped to p = ceil(L / f) and duplicate periods are
    skipped, continuing down the ranking until k distinct periods are found.
    """
    amps = np.asarray(amplitudes, dtype=np.float64)
    if amps.ndim != 1 or amps.size < 2:
        raise ArgumentError(f"amplitude array must be 1-D with at least 2 bins, got {amps.shape}")
    if k < 1:
        raise ArgumentError(f"k must be >= 1, got {k}")
    if convention not in CONVENTIONS:
        raise ArgumentError(f"unknown period convention '{convention}'")
    if convention == "paper_literal" and sample_rate_hz is None:
        raise ArgumentError("paper_literal convention needs sample_rate_hz to map bins to hertz")

    body = amps[1:]  # DC excluded from the peak search
    if not np.any(body > 0.0):
        raise DegenerateInputError("spectrum has no nonzero bins outside DC")

    # Stable ranking: descending amplitude, then ascending bin index.
    order = np.lexsort((np.arange(1, amps.size), -body)) + 1
    periods: list[int] = []
    peak_amps: list[float] = []
    for bin_idx in order:
        amp = amps[bin_idx]
        if amp <= 0.0:
            break
        if convention == "bin_index":
            p = -(-length // int(bin_idx))  # ceil(L / f) in exact integer arithmetic
        else:
            f_hz = bin_idx * float(sample_rate_hz) / length
            p = int(np.ceil(length / f_hz))
        if p not in periods:
            periods.append(p)
            peak_amps.append(float(amp))
            if len(periods) == k:
                break
    if len(periods) < k:
        raise DegenerateInputError(
            f"only {len(periods)} distinct periods available from nonzero bins, need {k}"
        )
    return PeriodSet(tuple(periods), tuple(peak_amps), convention)


def fold(x, period: int) -> FoldedView:
    """Reshape [..., L] into [..., rows, period], zero-padding the tail.

    Column index is the phase within a period (intra-period), row index the
    period count (inter-period). Differentiable: the gradient is the inverse
    reshape with the pad region dropped.
    """
    t = as_tensor(x)
    length = t.shape[-1]
    period = int(period)
    if not 1 <= period <= length:
        raise ArgumentError(f"period must be in 1..{length}, got {period}")
    rows = -(-length // period)
    pad = rows * period - length
    padded = ops.pad_last(t, pad)
    folded = ops.reshape(padded, t.shape[:-1] + (rows, period))
    return FoldedView(tensor=folded, period=period, pad_len=pad, orig_len=length)


def unfold(view: FoldedView, length: int) -> Tensor:
    """Inverse of :func:`fold`; values in the pad region are discarded."""
    t = view.tensor
    if t.ndim < 2:
        raise DimensionError(f"folded tensor must have rank >= 2, got {t.shape}")
    rows, period = t.shape[-2], t.shape[-1]
    if period != view.period or rows * period - view.pad_len != length or length != view.orig_len:
        raise DimensionError(
            f"folded view ({rows}x{period}, pad {view.pad_len}) is inconsistent with length {length}"
        )
    flat = ops.reshape(t, t.shape[:-2] + (rows * period,))
    return ops.slice_last(flat, length)
