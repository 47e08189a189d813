"""First-order low-pass smoother shared by the simulator and the decoder."""

from __future__ import annotations

import math

import numpy as np
from scipy.signal import lfilter

from .errors import InvalidArgumentError


def smoothing_coefficient(cutoff_hz: float, sample_rate: float) -> float:
    """Pole ``a = exp(-2*pi*cutoff/rate)`` of the one-pole smoother."""
    if sample_rate <= 0:
        raise InvalidArgumentError(f"sample_rate must be positive, got {sample_rate}")
    if cutoff_hz <= 0 or cutoff_hz >= sample_rate / 2:
        raise InvalidArgumentError(
            f"cutoff {cutoff_hz} Hz must lie in (0, Nyquist={sample_rate / 2} Hz)"
        )
    return math.exp(-2.0 * math.pi * cutoff_hz / sample_rate)


def first_order_lowpass(x: np.ndarray, cutoff_hz: float, sample_rate: float, axis: int = -1) -> np.ndarray:
    """Apply ``y[k] = a*y[k-1] + (1-a)*x[k]`` with zero initial state along ``axis``."""
    a = smoothing_coefficient(cutoff_hz, sample_rate)
    return lfilter([1.0 - a], [1.0, -a], np.asarray(x, dtype=float), axis=axis)
