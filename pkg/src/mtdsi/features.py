"""Spectral and modulation features: STFT, log-mel (MFSC), AMFB, splicing, MVN.

Frames are 25 ms long with a 10 ms shift at 16 kHz (400/160 samples),
transformed with a 512-point FFT.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import convolve1d
from scipy.signal import get_window

from .audio import AudioBuffer, SAMPLE_RATE, require_rate
from .errors import InsufficientFramesError, ShapeError, SignalLengthError

WIN_LEN = 400
HOP = 160
N_FFT = 512
FRAME_SHIFT = HOP / SAMPLE_RATE
LOG_FLOOR = 1e-10
MEL_FMIN = 64.0
MEL_FMAX = 8000.0

MFSC, AMFB, SPLICED = "MFSC", "AMFB", "SPLICED"


@dataclass(frozen=True)
class FeatureMatrix:
    """T frames x D dims feature matrix."""

    data: np.ndarray
    kind: str = MFSC
    frame_shift: float = FRAME_SHIFT

    def __post_init__(self):
        x = np.asarray(self.data, dtype=np.float64)
        if x.ndim != 2:
            raise ShapeError(f"feature matrix must be 2-D, got shape {x.shape}")
        if not np.all(np.isfinite(x)):
            raise ValueError("feature matrix contains non-finite entries")
        object.__setattr__(self, "data", x)

    @property
    def n_frames(self) -> int:
        return self.data.shape[0]

    @property
    def dim(self) -> int:
        return self.data.shape[1]


def stft(buffer: AudioBuffer, window_len: int = WIN_LEN, hop: int = HOP,
         n_fft: int = N_FFT) -> np.ndarray:
    """Hann-windowed STFT without centering; returns a complex (T, n_fft//2+1) array.

    ``T = 1 + (N - window_len) // hop``.
    """
    require_rate(buffer)
    x = buffer.samples
    if x.size < window_len:
        raise SignalLengthError(f"signal of {x.size} samples is shorter than one {window_len}-sample window")
    n_frames = 1 + (x.size - window_len) // hop
    idx = np.arange(window_len)[None, :] + hop * np.arange(n_frames)[:, None]
    frames = x[idx] * get_window("hann", window_len)
    return np.fft.rfft(frames, n=n_fft, axis=1)


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=float) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=float) / 2595.0) - 1.0)


def mel_filterbank(n_mels: int, n_fft: int = N_FFT, sample_rate: int = SAMPLE_RATE,
                   fmin: float = MEL_FMIN, fmax: float = MEL_FMAX) -> np.ndarray:
    """Triangular filters equidistant on the mel scale, shape (n_mels, n_fft//2+1)."""
    freqs = np.arange(n_fft // 2 + 1) * sample_rate / n_fft
    edges = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (freqs - lo) / (mid - lo)
    falling = (hi - freqs) / (hi - mid)
    return np.maximum(0.0, np.minimum(rising, falling))


def mfsc(spectrogram: np.ndarray, n_mels: int = 40) -> FeatureMatrix:
    """Log mel-weighted power per frame; log argument floored at 1e-10."""
    if n_mels not in (23, 40):
        raise ValueError(f"n_mels must be 23 or 40, got {n_mels}")
    spec = np.asarray(spectrogram)
    if spec.ndim != 2 or spec.shape[1] != N_FFT // 2 + 1:
        raise ShapeError(f"expected a (T, {N_FFT // 2 + 1}) spectrogram, got {spec.shape}")
    power = np.abs(spec) ** 2
    energies = power @ mel_filterbank(n_mels).T
    return FeatureMatrix(np.log(np.maximum(energies, LOG_FLOOR)), MFSC)


def mfsc_from_audio(buffer: AudioBuffer, n_mels: int = 40) -> FeatureMatrix:
    return mfsc(stft(buffer), n_mels)


@dataclass(frozen=True)
class AmfbConfig:
    """Amplitude modulation filterbank layout.

    ``window_lengths`` are Hann envelope lengths in frames (odd, so the
    centre frame is well defined); they shrink as the centre modulation
    frequency grows.
    """

    center_freqs: tuple = (0.0, 5.5, 10.15, 15.91, 27.03)
    window_lengths: tuple = (111, 61, 35, 21, 13)
    frame_shift: float = FRAME_SHIFT

    def __post_init__(self):
        if len(self.center_freqs) != len(self.window_lengths):
            raise ValueError("one window length per filter is required")
        if self.center_freqs[0] != 0.0:
            raise ValueError("the first filter must be the DC filter (0 Hz)")
        if any(w < 1 or w % 2 == 0 for w in self.window_lengths):
            raise ValueError("window lengths must be positive and odd")

    @property
    def n_streams(self) -> int:
        # DC filter contributes its real part only
        return 2 * len(self.center_freqs) - 1


def amfb_kernel(center_freq: float, window_len: int, frame_shift: float = FRAME_SHIFT) -> np.ndarray:
    """Complex Hann-windowed exponential q(n) = exp(i w (n - n0)) h(n), unit envelope sum."""
    n = np.arange(window_len)
    n0 = (window_len - 1) // 2
    omega = 2.0 * np.pi * center_freq * frame_shift
    h = 0.5 + 0.5 * np.cos(2.0 * np.pi * (n - n0) / (window_len + 1))
    s = np.exp(1j * omega * (n - n0))
    return s * h / h.sum()


def _filter_same(x: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Convolve every column of x with kernel along time; same length, edge replicated."""
    re = convolve1d(x, kernel.real, axis=0, mode="nearest")
    im = convolve1d(x, kernel.imag, axis=0, mode="nearest")
    return re + 1j * im


def amfb(mfsc40: FeatureMatrix, config: AmfbConfig | None = None, normalize: bool = True) -> FeatureMatrix:
    """Amplitude modulation filterbank features, (T, 9 * n_channels).

    Output blocks (each ``n_channels`` wide) are ordered: DC real, then
    real and imaginary part of each modulation filter. Real blocks are
    made zero-mean over the utterance; with ``normalize`` the result is
    additionally mean/variance normalized.
    """
    config = config or AmfbConfig()
    x = mfsc40.data
    if x.shape[1] != 40:
        raise ShapeError(f"AMFB expects 40-channel MFSC input, got {x.shape[1]} channels")
    blocks = []
    for freq, width in zip(config.center_freqs, config.window_lengths):
        y = _filter_same(x, amfb_kernel(freq, width, config.frame_shift))
        real = y.real - y.real.mean(axis=0)
        blocks.append(real)
        if freq != 0.0:
            blocks.append(y.imag)
    out = FeatureMatrix(np.hstack(blocks), AMFB, mfsc40.frame_shift)
    return mvn(out) if normalize else out


def splice(features: FeatureMatrix, context: int = 5) -> FeatureMatrix:
    """Stack frames t-context..t+context (edge replicated) into one row."""
    x = features.data
    t = np.arange(x.shape[0])
    cols = [x[np.clip(t + k, 0, x.shape[0] - 1)] for k in range(-context, context + 1)]
    return FeatureMatrix(np.hstack(cols), SPLICED, features.frame_shift)


def mvn(features: FeatureMatrix, eps: float = 1e-10, norm_vars: bool = True) -> FeatureMatrix:
    """Per-dimension utterance mean/variance normalization.

    Dimensions whose variance is below ``eps`` are only mean-centered
    (and therefore become exactly zero). ``norm_vars=False`` gives plain
    mean normalization.
    """
    x = features.data
    if x.shape[0] < 2:
        raise InsufficientFramesError("mean/variance normalization needs at least 2 frames")
    centered = x - x.mean(axis=0)
    if not norm_vars:
        return FeatureMatrix(centered, features.kind, features.frame_shift)
    var = np.mean(centered ** 2, axis=0)
    flat = var < eps
    centered[:, flat] = 0.0
    std = np.where(flat, 1.0, np.sqrt(var))
    return FeatureMatrix(centered / std, features.kind, features.frame_shift)


def extract(buffer: AudioBuffer, kind: str = "mfsc23", context: int | None = None,
            norm_vars: bool = False) -> FeatureMatrix:
    """Front ends used by the pipeline.

    ``mfsc23``: 23 log-mel channels, utterance mean normalization, spliced +-2
    (115 dims by default; ``norm_vars`` adds variance normalization).
    ``mfsc40``: same with 40 channels.
    ``amfb``: 40-channel MFSC -> AMFB (360 dims) -> spliced +-5 (3960 dims).
    """
    if kind in ("mfsc23", "mfsc40"):
        feats = mvn(mfsc_from_audio(buffer, 23 if kind == "mfsc23" else 40), norm_vars=norm_vars)
        return splice(feats, 2 if context is None else context)
    if kind == "amfb":
        feats = amfb(mfsc_from_audio(buffer, 40))
        return splice(feats, 5 if context is None else context)
    raise ValueError(f"unknown feature kind {kind!r}")
