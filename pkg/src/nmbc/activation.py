"""EMG conditioning: envelope, MVC normalization and the activation curve."""

import math

import numpy as np
from scipy.signal import butter, lfilter

from .errors import DataError
from .model import Trace

DEFAULT_CUTOFF_HZ = 2.0


def envelope(raw, cutoff_hz=DEFAULT_CUTOFF_HZ, channels=None):
    """Full-wave rectify then 2nd-order Butterworth low-pass, causal and
    starting from zero filter state."""
    fs = 1.0 / raw.dt
    if not 0 < cutoff_hz < fs / 2:
        raise DataError(f"cutoff {cutoff_hz} Hz must lie in (0, Nyquist={fs / 2} Hz)")
    b, a = butter(2, cutoff_hz, fs=fs)
    names = raw.names if channels is None else channels
    out = {}
    for n in raw.names:
        x = raw[n]
        out[n] = np.maximum(lfilter(b, a, np.abs(x)), 0.0) if n in names else x
    return Trace(raw.time, out)


def normalize_mvc(env, mvc, channels=None):
    """Excitation u = clamp(envelope / MVC, 0, 1) for each wired channel."""
    names = list(mvc) if channels is None else list(channels)
    out = {}
    for n in names:
        if n not in mvc:
            raise DataError(f"no MVC value for channel {n!r}")
        if not mvc[n] > 0:
            raise DataError(f"MVC for channel {n!r} must be positive")
        if n not in env.channels:
            raise DataError(f"EMG trace is missing channel {n!r}")
        out[n] = np.clip(env[n] / mvc[n], 0.0, 1.0)
    return Trace(env.time, out)


def activation(u_bar, E):
    """A = (exp(E*u) - 1) / (exp(E) - 1); works on scalars and arrays."""
    if not -3.0 <= E < 0.0:
        raise ValueError(f"shape factor E={E} outside [-3, 0)")
    # expm1 keeps precision as E approaches 0
    if np.ndim(u_bar) == 0:
        return math.expm1(E * u_bar) / math.expm1(E)
    return np.expm1(E * np.asarray(u_bar, dtype=float)) / math.expm1(E)
