"""Synthetic speech corpus with frame-level phone labels.

Utterances are sequences of formant-synthesized vowels, a nasal,
band-noise fricatives and silences. Each "speaker" has its own F0 and
vocal-tract scale. The material is crude, but it has a speech-like LTAS,
a syllabic envelope, harmonic fine structure, and labels, which is all
the downstream machinery needs.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .audio import AudioBuffer, SAMPLE_RATE, read_wav, rms, write_wav
from .features import HOP, WIN_LEN

# name, type, formants (Hz) or noise band (Hz), relative level (dB)
PHONES = (
    ("SIL", "sil", (), -80.0),
    ("AA", "vowel", (730, 1090, 2440), 0.0),
    ("IY", "vowel", (270, 2290, 3010), -2.0),
    ("UW", "vowel", (300, 870, 2240), -2.0),
    ("EH", "vowel", (530, 1840, 2480), -1.0),
    ("AO", "vowel", (570, 840, 2410), 0.0),
    ("M", "nasal", (250, 1100, 2600), -8.0),
    ("S", "fric", (4500, 7800), -12.0),
    ("SH", "fric", (2000, 4200), -10.0),
    ("F", "fric", (800, 7000), -18.0),
)
PHONE_NAMES = tuple(p[0] for p in PHONES)
N_PHONES = len(PHONES)
_FORMANT_BW = (90.0, 130.0, 180.0)
_FORMANT_GAIN = (1.0, 0.5, 0.25)
_TARGET_RMS = 0.05
_RAMP = 0.012
_NOISE_FLOOR_DB = -45.0


@dataclass(frozen=True)
class ToyUtterance:
    audio: AudioBuffer
    labels: np.ndarray  # one phone index per 10 ms frame
    utt_id: str = ""


def _segments(rng, duration, sample_rate):
    """Random phone sequence as (phone index, start, stop) sample spans."""
    n_total = int(duration * sample_rate)
    segs = []
    pos = int(rng.uniform(0.12, 0.25) * sample_rate)
    segs.append((0, 0, pos))
    tail = int(rng.uniform(0.12, 0.25) * sample_rate)
    prev = 0
    while pos < n_total - tail:
        if prev != 0 and rng.random() < 0.12:
            ph = 0
        else:
            ph = int(rng.choice([k for k in range(1, N_PHONES) if k != prev]))
        kind = PHONES[ph][1]
        dur = rng.uniform(*{"vowel": (0.08, 0.2), "nasal": (0.06, 0.12),
                            "fric": (0.06, 0.14), "sil": (0.05, 0.1)}[kind])
        stop = min(pos + int(dur * sample_rate), n_total - tail)
        if stop - pos < int(0.03 * sample_rate):
            break
        segs.append((ph, pos, stop))
        pos, prev = stop, ph
    segs.append((0, pos, n_total))
    return segs


def _gain_track(n, start, stop, sample_rate):
    """Trapezoid that is 1 inside [start, stop) with short cosine ramps outside."""
    ramp = int(_RAMP * sample_rate)
    t = np.arange(max(0, start - ramp), min(n, stop + ramp))
    g = np.ones(t.size)
    rise = t < start
    g[rise] = 0.5 - 0.5 * np.cos(np.pi * (t[rise] - (start - ramp)) / ramp)
    fall = t >= stop
    g[fall] = 0.5 + 0.5 * np.cos(np.pi * (t[fall] - stop) / ramp)
    return t, g


def synthesize_utterance(seed, duration: float = 2.0, speaker_seed=None,
                         sample_rate: int = SAMPLE_RATE) -> ToyUtterance:
    """One labelled utterance; ``speaker_seed`` fixes F0 range and formant scale."""
    rng = np.random.default_rng(seed)
    spk = np.random.default_rng(seed if speaker_seed is None else speaker_seed)
    f0_base = spk.uniform(100.0, 220.0)
    vt_scale = spk.uniform(0.9, 1.12)

    n = int(duration * sample_rate)
    t = np.arange(n) / sample_rate
    f0 = f0_base * (1.08 - 0.16 * t / duration) * (1.0 + 0.04 * np.sin(2 * np.pi * rng.uniform(2, 4) * t))
    phase = 2.0 * np.pi * np.cumsum(f0) / sample_rate
    n_harm = int(7800.0 // (f0.min()))

    x = np.zeros(n)
    segs = _segments(rng, duration, sample_rate)
    for ph, start, stop in segs:
        name, kind, spec, level_db = PHONES[ph]
        if kind == "sil":
            continue
        idx, g = _gain_track(n, start, stop, sample_rate)
        level = 10.0 ** ((level_db + rng.uniform(-3, 3)) / 20.0)
        if kind in ("vowel", "nasal"):
            formants = np.array(spec) * vt_scale * rng.uniform(0.95, 1.05, size=3)
            seg = np.zeros(idx.size)
            for h in range(1, n_harm + 1):
                fh = h * f0[idx]
                amp = sum(gain * np.exp(-0.5 * ((fh - fc) / bw) ** 2)
                          for fc, bw, gain in zip(formants, _FORMANT_BW, _FORMANT_GAIN))
                amp = amp * (fh < 0.48 * sample_rate)
                seg += amp * np.cos(h * phase[idx])
            seg *= level / max(rms(seg), 1e-12)
        else:
            lo, hi = np.array(spec) * vt_scale
            noise = rng.standard_normal(idx.size)
            spec_n = np.fft.rfft(noise)
            f = np.fft.rfftfreq(idx.size, 1.0 / sample_rate)
            spec_n[(f < lo) | (f > hi)] = 0.0
            seg = np.fft.irfft(spec_n, n=idx.size)
            seg *= level / max(rms(seg), 1e-12)
        x[idx] += g * seg
    x *= _TARGET_RMS / rms(x)
    # recording noise floor, as in any real "clean" corpus
    x += _TARGET_RMS * 10.0 ** (_NOISE_FLOOR_DB / 20.0) * rng.standard_normal(n)

    n_frames = 1 + (n - WIN_LEN) // HOP
    centers = np.arange(n_frames) * HOP + WIN_LEN // 2
    labels = np.zeros(n_frames, dtype=np.int64)
    for ph, start, stop in segs:
        labels[(centers >= start) & (centers < stop)] = ph
    return ToyUtterance(AudioBuffer(x, sample_rate), labels)


def make_corpus(n_utts: int, seed=0, duration: float = 2.0, n_speakers: int = 4,
                prefix: str = "utt") -> list[ToyUtterance]:
    """``n_utts`` utterances spread over ``n_speakers`` synthetic speakers."""
    root = np.random.SeedSequence(seed)
    spk_seeds = [int(s.generate_state(1)[0]) for s in root.spawn(n_speakers)]
    utt_seeds = np.random.SeedSequence([seed, 1]).spawn(n_utts)
    out = []
    for i, ss in enumerate(utt_seeds):
        u = synthesize_utterance(int(ss.generate_state(1)[0]), duration, spk_seeds[i % n_speakers])
        out.append(ToyUtterance(u.audio, u.labels, f"{prefix}{i:04d}"))
    return out


def concatenate(utts) -> AudioBuffer:
    return AudioBuffer(np.concatenate([u.audio.samples for u in utts]), utts[0].audio.sample_rate)


def write_corpus(utts, directory) -> list[Path]:
    """Write ``<id>.wav`` and ``<id>.lab`` (one phone index per frame) files."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    (directory / "phones.txt").write_text("\n".join(PHONE_NAMES) + "\n", encoding="utf-8")
    paths = []
    for u in utts:
        wav = directory / f"{u.utt_id}.wav"
        write_wav(u.audio, wav)
        np.savetxt(directory / f"{u.utt_id}.lab", u.labels, fmt="%d")
        paths.append(wav)
    return paths


def read_labels(wav_path) -> np.ndarray:
    return np.loadtxt(Path(wav_path).with_suffix(".lab"), dtype=np.int64, ndmin=1)


def read_corpus(directory) -> list[ToyUtterance]:
    out = []
    for wav in sorted(Path(directory).glob("*.wav")):
        lab = wav.with_suffix(".lab")
        labels = read_labels(wav) if lab.exists() else None
        out.append(ToyUtterance(read_wav(wav), labels, wav.stem))
    return out
