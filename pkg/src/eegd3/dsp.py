"""Deterministic preprocessing: notch, zero-phase band-pass, FFT resampling,
standardisation + common average reference, and window sampling."""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from scipy import signal

from eegd3.io import RecordingBuffer

STD_EPS = 1e-8
NOTCH_Q = 30.0


class DspError(ValueError):
    pass


class FrequencyAboveNyquist(DspError):
    pass


class InvalidBand(DspError):
    pass


class SignalTooShort(DspError):
    pass


class UpsampleNotSupported(DspError):
    pass


class TrialTooShort(DspError):
    pass


@dataclass
class Window:
    samples: np.ndarray
    fs: float
    start: int = 0
    trial: object = None

    @property
    def n_times(self) -> int:
        return self.samples.shape[-1]

    @property
    def start_seconds(self) -> float:
        return self.start / self.fs

    @property
    def center_seconds(self) -> float:
        return (self.start + self.n_times / 2) / self.fs


def window_length(window_seconds: float, fs: float) -> int:
    return int(round(window_seconds * fs))


def notch_array(x: np.ndarray, fs: float, freqs, quality: float = NOTCH_Q) -> np.ndarray:
    y = np.asarray(x, dtype=np.float64)
    for f in freqs:
        if not 0 < f < fs / 2:
            raise FrequencyAboveNyquist(f"notch at {f} Hz outside (0, {fs / 2}) Hz")
        b, a = signal.iirnotch(f, quality, fs=fs)
        y = signal.filtfilt(b, a, y, axis=-1)
    return y


def notch(rec: RecordingBuffer, freqs) -> RecordingBuffer:
    """Zero-phase second-order notch (Q=30) at each frequency."""
    return replace(rec, samples=notch_array(rec.samples, rec.fs, freqs))


def bandpass_sos(lo: float, hi: float, fs: float, order: int = 3) -> np.ndarray:
    if not 0 < lo < hi < fs / 2:
        raise InvalidBand(f"need 0 < lo < hi < fs/2, got lo={lo}, hi={hi}, fs={fs}")
    return signal.butter(order, [lo, hi], btype="bandpass", fs=fs, output="sos")


def bandpass_array(x: np.ndarray, fs: float, lo: float, hi: float, order: int = 3,
                   sos: np.ndarray | None = None) -> np.ndarray:
    """Forward-backward Butterworth band-pass along the last axis.

    Edges are extended by odd reflection over ``3 * (order + 1)`` samples.
    """
    if sos is None:
        sos = bandpass_sos(lo, hi, fs, order)
    padlen = 3 * (order + 1)
    if x.shape[-1] <= padlen:
        raise SignalTooShort(f"{x.shape[-1]} samples, need more than {padlen}")
    return signal.sosfiltfilt(sos, x, axis=-1, padtype="odd", padlen=padlen)


def butter_bandpass_zerophase(rec: RecordingBuffer, lo: float, hi: float, order: int = 3) -> RecordingBuffer:
    return replace(rec, samples=bandpass_array(rec.samples, rec.fs, lo, hi, order))


def resample_array(x: np.ndarray, fs_in: float, fs_out: float) -> np.ndarray:
    if fs_out > fs_in:
        raise UpsampleNotSupported(f"cannot resample {fs_in} Hz up to {fs_out} Hz")
    n_in = x.shape[-1]
    n_out = int(round(n_in * fs_out / fs_in))
    if n_out == n_in:
        return np.array(x, dtype=np.float64)
    return signal.resample(x, n_out, axis=-1)


def resample_fft(rec: RecordingBuffer, fs_out: float) -> RecordingBuffer:
    """Downsample by truncating the spectrum (FFT method)."""
    return replace(rec, samples=resample_array(rec.samples, rec.fs, fs_out), fs=float(fs_out))


def rereference(rec: RecordingBuffer, channel: str) -> RecordingBuffer:
    """Subtract one electrode from all others and drop it."""
    idx = rec.channel_names.index(channel)
    keep = [i for i in range(rec.n_channels) if i != idx]
    samples = rec.samples[keep] - rec.samples[idx]
    return replace(rec, samples=samples, channel_names=[rec.channel_names[i] for i in keep],
                   reference=channel)


def standardize_then_car(x: np.ndarray) -> np.ndarray:
    """Standardise each electrode (population std), then subtract the
    across-electrode mean at every time point.

    Works on ``[E, T]`` or batched ``[..., E, T]`` arrays.
    """
    x = np.asarray(x, dtype=np.float64)
    z = (x - x.mean(axis=-1, keepdims=True)) / (x.std(axis=-1, keepdims=True) + STD_EPS)
    return z - z.mean(axis=-2, keepdims=True)


def seed_for(global_seed: int, index: int) -> np.random.Generator:
    """Per-trial generator derived from a global seed."""
    return np.random.default_rng(np.random.SeedSequence([global_seed, index]))


def sample_window(data: np.ndarray, fs: float, window_seconds: float, rng: np.random.Generator,
                  valid_span: tuple[int, int] | None = None, trial=None) -> Window:
    """Draw a window uniformly inside the valid (non-padded) span of a trial.

    ``data`` is the ``[E, L]`` trial array and ``valid_span`` is given in
    samples relative to its first column.
    """
    T = window_length(window_seconds, fs)
    lo, hi = valid_span if valid_span is not None else (0, data.shape[-1])
    last = hi - T
    if last < lo:
        raise TrialTooShort(f"valid span of {hi - lo} samples shorter than window of {T}")
    start = int(rng.integers(lo, last + 1))
    return Window(data[:, start:start + T], fs, start, trial)


def prepare_window(x: np.ndarray, fs: float, band: tuple[float, float] | None,
                   order: int = 3, sos=None) -> np.ndarray:
    """Training-time window treatment: optional band-pass, then standardise + CAR."""
    if band is not None:
        x = bandpass_array(x, fs, band[0], band[1], order, sos=sos)
    return standardize_then_car(x)
