"""Masker synthesis: speech-shaped noise and its modulated / vocoded variants.

Every generator is a pure function of its inputs and seed, and every
output is RMS-equalized to its source so that mixing at a given SNR means
the same thing for all maskers.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.signal import butter, get_window, hilbert, oaconvolve, sosfiltfilt, welch

from .audio import AudioBuffer, rms
from .errors import DegenerateSignalError, SignalLengthError

LTAS_FFT = 512
FB_FMIN = 80.0
FB_FMAX = 8000.0

SSN, SAM_SSN, BB_SSN, AFS_SSN, NV_SPEECH, RAW_SPEECH = (
    "SSN", "SAM_SSN", "BB_SSN", "AFS_SSN", "NV_SPEECH", "RAW_SPEECH")
KINDS = (SSN, SAM_SSN, BB_SSN, AFS_SSN, NV_SPEECH, RAW_SPEECH)


@dataclass(frozen=True)
class LtasProfile:
    """Long-term average magnitude spectrum on an rfft grid."""

    magnitudes: np.ndarray
    fft_size: int = LTAS_FFT
    sample_rate: int = 16000

    def __post_init__(self):
        m = np.asarray(self.magnitudes, dtype=float)
        if m.shape != (self.fft_size // 2 + 1,):
            raise ValueError(f"expected {self.fft_size // 2 + 1} bins, got {m.shape}")
        if np.any(m < 0) or not np.all(np.isfinite(m)):
            raise ValueError("LTAS magnitudes must be finite and non-negative")
        object.__setattr__(self, "magnitudes", m)

    @property
    def freqs(self) -> np.ndarray:
        return np.arange(self.fft_size // 2 + 1) * self.sample_rate / self.fft_size

    def save(self, path) -> None:
        np.savez(path, magnitudes=self.magnitudes, fft_size=self.fft_size, sample_rate=self.sample_rate)

    @classmethod
    def load(cls, path) -> "LtasProfile":
        with np.load(path) as z:
            return cls(z["magnitudes"], int(z["fft_size"]), int(z["sample_rate"]))


@dataclass(frozen=True)
class MaskerSpec:
    kind: str
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown masker kind {self.kind!r}")
        p = self.params
        if self.kind == SAM_SSN and p.get("rate", 8.0) <= 0:
            raise ValueError("SAM rate must be positive")
        if self.kind == AFS_SSN and p.get("n_channels", 32) % p.get("group", 4):
            raise ValueError("AFS channel count must be divisible by the group size")


def estimate_ltas(speech: AudioBuffer, fft_size: int = LTAS_FFT) -> LtasProfile:
    """Welch average (Hann, 50% overlap) of the magnitude spectrum.

    The profile is the square root of the averaged power spectral density,
    so summing ``magnitudes**2`` over bins gives a level proportional to
    the signal power.
    """
    if speech.duration < 1.0:
        raise SignalLengthError(f"LTAS needs at least 1 s of signal, got {speech.duration:.3f} s")
    _, psd = welch(speech.samples, fs=speech.sample_rate, window="hann", nperseg=fft_size,
                   noverlap=fft_size // 2, detrend=False, scaling="density")
    return LtasProfile(np.sqrt(psd), fft_size, speech.sample_rate)


def _shaping_filter(magnitudes: np.ndarray, fft_size: int) -> np.ndarray:
    """Linear-phase FIR whose magnitude response follows ``magnitudes``."""
    impulse = np.fft.irfft(magnitudes, n=fft_size)
    impulse = np.roll(impulse, fft_size // 2)
    return impulse * get_window("hann", fft_size, fftbins=False)


def gen_ssn(ltas: LtasProfile, duration: float, seed) -> AudioBuffer:
    """Gaussian noise filtered (FFT overlap-add) to the LTAS shape and level."""
    if duration <= 0:
        raise ValueError("duration must be positive")
    target_power = np.sum(ltas.magnitudes ** 2)
    if target_power == 0:
        raise DegenerateSignalError("cannot shape noise to a zero-energy LTAS")
    n = int(round(duration * ltas.sample_rate))
    rng = np.random.default_rng(seed)
    white = rng.standard_normal(n + ltas.fft_size)
    shaped = oaconvolve(white, _shaping_filter(ltas.magnitudes, ltas.fft_size), mode="valid")[:n]
    # PSD integrates to power: sum(psd) * df == variance
    level = np.sqrt(target_power * ltas.sample_rate / ltas.fft_size)
    return AudioBuffer(shaped * level / rms(shaped), ltas.sample_rate)


def gen_sam_ssn(ssn: AudioBuffer, rate: float = 8.0, depth: float = 1.0) -> AudioBuffer:
    """Sinusoidally amplitude-modulated copy of ``ssn`` with the same RMS."""
    if not 0.0 <= depth <= 1.0:
        raise ValueError("modulation depth must lie in [0, 1]")
    if rate <= 0:
        raise ValueError("modulation rate must be positive")
    t = np.arange(len(ssn)) / ssn.sample_rate
    out = ssn.samples * (1.0 + depth * np.sin(2.0 * np.pi * rate * t))
    return ssn.with_samples(out * rms(ssn) / rms(out))


def hilbert_envelope(signal, cutoff: float | None = None, sample_rate: int = 16000) -> np.ndarray:
    """Magnitude of the analytic signal, optionally low-pass smoothed.

    Accepts an AudioBuffer or an array; returns an array.
    """
    if isinstance(signal, AudioBuffer):
        sample_rate = signal.sample_rate
        signal = signal.samples
    x = np.asarray(signal, dtype=float)
    if x.size < 2:
        raise SignalLengthError("Hilbert envelope needs at least 2 samples")
    env = np.abs(hilbert(x))
    if cutoff is not None:
        sos = butter(4, cutoff, btype="low", fs=sample_rate, output="sos")
        env = np.maximum(sosfiltfilt(sos, env), 0.0)
    return env


def gen_bb_ssn(ssn: AudioBuffer, speech: AudioBuffer, envelope_cutoff: float | None = None) -> AudioBuffer:
    """SSN multiplied by the broadband Hilbert envelope of ``speech``."""
    n = min(len(ssn), len(speech))
    env = hilbert_envelope(speech.samples[:n], envelope_cutoff, speech.sample_rate)
    noise = ssn.samples[:n]
    out = noise * env
    if rms(out) == 0:
        raise DegenerateSignalError("speech envelope is zero; modulated masker would be silent")
    return AudioBuffer(out * rms(noise) / rms(out), ssn.sample_rate)


def erb_number(f):
    return 21.4 * np.log10(1.0 + 0.00437 * np.asarray(f, dtype=float))


def erb_number_to_hz(e):
    return (10.0 ** (np.asarray(e, dtype=float) / 21.4) - 1.0) / 0.00437


def band_weights(n_bands: int, n_fft: int, sample_rate: int = 16000,
                 fmin: float = FB_FMIN, fmax: float = FB_FMAX) -> np.ndarray:
    """Complementary zero-phase band gains on an rfft grid, shape (n_bands, n_fft//2+1).

    Band edges are equally spaced on the ERB-number scale between ``fmin``
    and ``fmax``; neighbouring bands cross over with sin^2/cos^2 ramps
    half a band wide, so the gains sum to exactly one at every frequency.
    Energy below ``fmin`` goes to the first band, above ``fmax`` to the last.
    """
    freqs = np.arange(n_fft // 2 + 1) * sample_rate / n_fft
    e = erb_number(freqs)
    edges = np.linspace(erb_number(fmin), erb_number(fmax), n_bands + 1)
    half = 0.25 * (edges[1] - edges[0])
    # step[i] rises from 0 to 1 around inner edge i
    steps = [np.ones_like(e)]
    for edge in edges[1:-1]:
        u = np.clip((e - (edge - half)) / (2 * half), 0.0, 1.0)
        steps.append(np.sin(0.5 * np.pi * u) ** 2)
    steps.append(np.zeros_like(e))
    return np.array([steps[b] - steps[b + 1] for b in range(n_bands)])


def split_bands(x: np.ndarray, n_bands: int, sample_rate: int = 16000) -> np.ndarray:
    """Split a signal into complementary bands; the rows sum back to ``x``."""
    spec = np.fft.rfft(x)
    weights = band_weights(n_bands, x.size, sample_rate)
    return np.array([np.fft.irfft(spec * w, n=x.size) for w in weights])


def draw_afs_offsets(n_groups: int, max_offset: int, seed) -> np.ndarray:
    """Distinct uniform envelope offsets, one per channel group."""
    if max_offset + 1 < n_groups:
        raise SignalLengthError(
            f"speech envelope leaves {max_offset + 1} offsets for {n_groups} groups"
        )
    rng = np.random.default_rng(seed)
    return rng.choice(max_offset + 1, size=n_groups, replace=False)


def gen_afs_ssn(ssn: AudioBuffer, speech: AudioBuffer, n_channels: int = 32, group: int = 4,
                seed=0, max_offset: int | None = None, envelope_cutoff: float | None = None,
                return_offsets: bool = False):
    """Across-frequency shifted modulated SSN.

    The SSN is split into ``n_channels`` complementary ERB bands; each run of
    ``group`` adjacent bands is multiplied by the speech Hilbert envelope
    read from its own seeded offset. Bands are summed and RMS-equalized to
    the SSN. ``speech`` must be at least ``len(ssn) + max_offset`` long.
    """
    if n_channels % group:
        raise ValueError("n_channels must be divisible by group")
    n = len(ssn)
    if max_offset is None:
        max_offset = len(speech) - n
    if max_offset < 0 or len(speech) < n + max_offset:
        raise SignalLengthError(
            f"speech of {len(speech)} samples is shorter than masker ({n}) plus offset range ({max_offset})"
        )
    n_groups = n_channels // group
    offsets = draw_afs_offsets(n_groups, max_offset, seed)
    env = hilbert_envelope(speech.samples, envelope_cutoff, speech.sample_rate)
    spec = np.fft.rfft(ssn.samples)
    weights = band_weights(n_channels, n, ssn.sample_rate)
    out = np.zeros(n)
    for g, off in enumerate(offsets):
        # summing a group's band gains first is the same as summing its bands
        group_band = np.fft.irfft(spec * weights[g * group:(g + 1) * group].sum(axis=0), n=n)
        out += group_band * env[off:off + n]
    if rms(out) == 0:
        raise DegenerateSignalError("speech envelope is zero; modulated masker would be silent")
    result = AudioBuffer(out * rms(ssn) / rms(out), ssn.sample_rate)
    return (result, offsets) if return_offsets else result


def vocoder_carrier(speech: AudioBuffer, ltas: LtasProfile, seed) -> AudioBuffer:
    """SSN carrier for vocoding ``speech``: same length and RMS as the speech."""
    noise = gen_ssn(ltas, len(speech) / speech.sample_rate, seed)
    x = noise.samples[:len(speech)]
    return AudioBuffer(x * rms(speech) / rms(x), speech.sample_rate)


def noise_vocode(speech: AudioBuffer, ltas: LtasProfile, n_bands: int = 12, seed=0,
                 envelope_cutoff: float | None = None) -> AudioBuffer:
    """Replace the fine structure of ``speech`` by noise, keeping band envelopes."""
    if n_bands < 1:
        raise ValueError("n_bands must be at least 1")
    if rms(speech) == 0:
        raise DegenerateSignalError("cannot vocode silent speech")
    carrier = vocoder_carrier(speech, ltas, seed).samples
    speech_bands = split_bands(speech.samples, n_bands, speech.sample_rate)
    carrier_bands = split_bands(carrier, n_bands, speech.sample_rate)
    out = np.zeros(len(speech))
    for sb, cb in zip(speech_bands, carrier_bands):
        out += cb * hilbert_envelope(sb, envelope_cutoff, speech.sample_rate)
    return AudioBuffer(out * rms(speech) / rms(out), speech.sample_rate)


def make_masker(spec: MaskerSpec, ref_speech: AudioBuffer, duration: float, seed=0,
                ltas: LtasProfile | None = None) -> AudioBuffer:
    """Build any masker kind from a reference speech signal.

    ``ref_speech`` provides the LTAS (unless ``ltas`` is given), the
    modulation envelope and, for the speech-like kinds, the signal itself.
    """
    p = dict(spec.params)
    seed = p.pop("seed", seed)
    ltas = ltas or estimate_ltas(ref_speech)
    n = int(round(duration * ref_speech.sample_rate))
    if spec.kind == RAW_SPEECH:
        return _loop_to(ref_speech, n)
    if spec.kind == NV_SPEECH:
        return noise_vocode(_loop_to(ref_speech, n), ltas, p.get("n_bands", 12), seed,
                            p.get("envelope_cutoff"))
    ssn = gen_ssn(ltas, duration, seed)
    if spec.kind == SSN:
        return ssn
    if spec.kind == SAM_SSN:
        return gen_sam_ssn(ssn, p.get("rate", 8.0), p.get("depth", 1.0))
    if spec.kind == BB_SSN:
        return gen_bb_ssn(ssn, _loop_to(ref_speech, n), p.get("envelope_cutoff"))
    # AFS: envelope sections are drawn from a looped copy twice the masker length
    return gen_afs_ssn(ssn, _loop_to(ref_speech, 2 * n), p.get("n_channels", 32), p.get("group", 4),
                       seed, envelope_cutoff=p.get("envelope_cutoff"))


def _loop_to(buffer: AudioBuffer, n: int) -> AudioBuffer:
    reps = -(-n // len(buffer))
    return buffer.with_samples(np.tile(buffer.samples, reps)[:n])
