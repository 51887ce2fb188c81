"""Audio buffers, WAV I/O, level arithmetic and SNR mixing."""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.io import wavfile

from .errors import (
    AudioFormatError,
    ChannelCountError,
    DegenerateSignalError,
    SampleRateError,
    SignalLengthError,
)

SAMPLE_RATE = 16000
_PCM16_SCALE = 32768.0


@dataclass(frozen=True)
class AudioBuffer:
    """Mono waveform with its sample rate.

    Samples are stored as a read-only float64 array. The [-1, 1] range is
    only enforced when writing PCM16, because intermediate signals (scaled
    maskers, unnormalized mixtures) may legitimately exceed it.
    """

    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        x = np.array(self.samples, dtype=np.float64).reshape(-1)
        if x.size < 1:
            raise SignalLengthError("audio buffer must contain at least one sample")
        if not np.all(np.isfinite(x)):
            raise ValueError("audio samples must be finite")
        if int(self.sample_rate) != self.sample_rate or self.sample_rate <= 0:
            raise ValueError(f"invalid sample rate {self.sample_rate!r}")
        x.setflags(write=False)
        object.__setattr__(self, "samples", x)
        object.__setattr__(self, "sample_rate", int(self.sample_rate))

    def __len__(self):
        return self.samples.size

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate

    def with_samples(self, samples) -> "AudioBuffer":
        return AudioBuffer(samples, self.sample_rate)


def require_rate(buffer: AudioBuffer, rate: int = SAMPLE_RATE) -> None:
    if buffer.sample_rate != rate:
        raise SampleRateError(
            f"expected {rate} Hz audio, got {buffer.sample_rate} Hz (no resampling is done)"
        )


def read_wav(path, expected_rate: int | None = SAMPLE_RATE) -> AudioBuffer:
    """Read a mono PCM16 or float32 WAV file.

    PCM16 is scaled by 1/32768, so full-scale positive 32767 maps to
    0.99997. Set ``expected_rate=None`` to accept any sample rate.
    """
    try:
        rate, data = wavfile.read(str(path))
    except (ValueError, EOFError) as exc:
        raise AudioFormatError(f"{path}: cannot parse WAV ({exc})") from exc
    if data.ndim != 1:
        raise ChannelCountError(f"{path}: expected mono audio, got {data.shape[1]} channels")
    if data.dtype == np.int16:
        samples = data.astype(np.float64) / _PCM16_SCALE
    elif data.dtype == np.float32:
        samples = data.astype(np.float64)
    else:
        raise AudioFormatError(f"{path}: unsupported sample format {data.dtype}")
    if expected_rate is not None and rate != expected_rate:
        raise SampleRateError(f"{path}: sample rate {rate} Hz, expected {expected_rate} Hz")
    if samples.size == 0:
        raise SignalLengthError(f"{path}: file contains no samples")
    return AudioBuffer(samples, rate)


def write_wav(buffer: AudioBuffer, path, subtype: str = "PCM_16") -> None:
    """Write ``buffer`` as a mono WAV file (``PCM_16`` or ``FLOAT``)."""
    x = buffer.samples
    if subtype == "PCM_16":
        if np.max(np.abs(x)) > 1.0:
            raise ValueError("samples outside [-1, 1] cannot be written as PCM16")
        data = np.clip(np.round(x * _PCM16_SCALE), -32768, 32767).astype(np.int16)
    elif subtype == "FLOAT":
        data = x.astype(np.float32)
    else:
        raise ValueError(f"unknown WAV subtype {subtype!r}")
    wavfile.write(str(Path(path)), buffer.sample_rate, data)


def rms(buffer) -> float:
    """Root mean square of a buffer or plain array."""
    x = buffer.samples if isinstance(buffer, AudioBuffer) else np.asarray(buffer, dtype=float)
    if x.size < 1:
        raise SignalLengthError("rms of an empty signal")
    return float(np.sqrt(np.mean(np.square(x))))


def snr_db(speech, noise) -> float:
    return 20.0 * np.log10(rms(speech) / rms(noise))


def select_noise_segment(noise: AudioBuffer, length: int, seed) -> tuple[AudioBuffer, int]:
    """Cut a contiguous ``length``-sample segment at a seeded uniform offset."""
    n = len(noise)
    if length < 1 or length > n:
        raise SignalLengthError(f"segment of {length} samples requested from {n}-sample noise")
    rng = np.random.default_rng(seed)
    offset = int(rng.integers(0, n - length + 1))
    return noise.with_samples(noise.samples[offset:offset + length]), offset


@dataclass(frozen=True)
class MixResult:
    """A speech+noise mixture and the numbers needed to reproduce it.

    ``speech_component`` and ``noise_component`` are the two summands of
    ``mixture`` after any anti-clipping rescale (``mixture_gain``).
    """

    mixture: AudioBuffer
    achieved_snr_db: float
    noise_gain: float
    noise_offset: int
    mixture_gain: float = 1.0
    speech_component: np.ndarray = field(default=None, repr=False)
    noise_component: np.ndarray = field(default=None, repr=False)


def mix_at_snr(speech: AudioBuffer, noise: AudioBuffer, snr_db: float, offset: int = 0) -> MixResult:
    """Add ``noise`` to ``speech`` so that the full-utterance RMS ratio is ``snr_db``.

    The noise is read from ``offset`` for ``len(speech)`` samples. If the sum
    would clip, the whole mixture (both components) is scaled down, which
    leaves the SNR untouched; the factor is kept in ``mixture_gain``.
    """
    if speech.sample_rate != noise.sample_rate:
        raise SampleRateError(
            f"speech at {speech.sample_rate} Hz but noise at {noise.sample_rate} Hz"
        )
    n = len(speech)
    if offset < 0 or offset + n > len(noise):
        raise SignalLengthError(
            f"noise of {len(noise)} samples cannot cover {n} speech samples from offset {offset}"
        )
    s = speech.samples
    v = noise.samples[offset:offset + n]
    rs, rv = rms(s), rms(v)
    if rs == 0.0 or rv == 0.0:
        raise DegenerateSignalError("SNR is undefined for silent speech or silent noise")

    noise_gain = (rs / rv) * 10.0 ** (-snr_db / 20.0)
    v = noise_gain * v
    mix = s + v
    peak = np.max(np.abs(mix))
    gain = 1.0 / peak if peak > 1.0 else 1.0
    s_out, v_out = gain * s, gain * v
    achieved = 20.0 * np.log10(rms(s_out) / rms(v_out))
    return MixResult(
        mixture=AudioBuffer(s_out + v_out, speech.sample_rate),
        achieved_snr_db=float(achieved),
        noise_gain=float(noise_gain),
        noise_offset=int(offset),
        mixture_gain=float(gain),
        speech_component=s_out,
        noise_component=v_out,
    )
