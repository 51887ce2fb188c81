"""Experiment orchestration: manifests, posterior providers and batch SRT prediction.

Output layout of :func:`run_pipeline`::

    <out>/<masker>/manifest.csv   rows processed for this masker
    <out>/<masker>/rows.csv       per-row M, WER estimate and accuracy
    <out>/<masker>/points.csv     pooled per-SNR-bin points that are fitted
    <out>/<masker>/fit.csv        L50, slope, SRT80
    <out>/srt_summary.csv         one row per masker (input format of ``eval``)
"""
from __future__ import annotations

import csv
import json
import logging
import wave
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from functools import lru_cache
from pathlib import Path

import numpy as np

from . import features as feat
from . import maskers as mk
from . import toy
from .audio import SAMPLE_RATE, AudioBuffer, mix_at_snr, read_wav, write_wav
from .errors import PipelineError, UnidentifiableFitError
from .mmeasure import m_scalar
from .posteriorgram import FrameClassifier, Posteriorgram, load_posteriorgram, predict_posteriors, train_frame_classifier
from .prediction import (
    SrtPrediction,
    WerMap,
    accuracy_from_wer,
    calibrate_wer_map,
    fit_psychometric,
    srt,
    wer_from_m,
)

log = logging.getLogger(__name__)

MAX_SKIPPED_FRACTION = 0.10


def substream(seed, *names) -> np.random.Generator:
    """Independent generator for a named purpose, derived from the root seed."""
    key = [int(seed)] + [zlib.crc32(str(n).encode("utf-8")) for n in names]
    return np.random.default_rng(np.random.SeedSequence(key))


def substream_seed(seed, *names) -> int:
    return int(substream(seed, *names).integers(0, 2**31 - 1))


# -- configuration ------------------------------------------------------------------

@dataclass
class MaskerEntry:
    """One masker of an experiment: synthesized from ``kind`` or read from ``path``."""

    id: str
    kind: str = mk.SSN
    params: dict = field(default_factory=dict)
    gender: str = "female"
    path: str | None = None


@dataclass
class ExperimentConfig:
    corpus: str
    maskers: list = field(default_factory=list)
    snr_min: float = -30.0
    snr_max: float = 20.0
    n_snr_points: int = 400
    sentences_per_snr: int = 8
    seed: int = 0
    features: str = "mfsc23"
    wer_map: str = "constants"
    out_dir: str = "runs/experiment"
    reference_speech: str | None = None
    masker_duration: float = 60.0
    model: str | None = None
    pooling: str = "mean"
    bin_width: float = 1.0
    fit_method: str = "lsq"

    def __post_init__(self):
        self.maskers = [m if isinstance(m, MaskerEntry) else MaskerEntry(**m) for m in self.maskers]
        if not self.snr_min < self.snr_max:
            raise ValueError("snr_min must be below snr_max")
        if self.n_snr_points < 1 or self.sentences_per_snr < 1:
            raise ValueError("n_snr_points and sentences_per_snr must be at least 1")
        if self.pooling not in ("mean", "concat"):
            raise ValueError(f"unknown pooling mode {self.pooling!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        data = json.loads(Path(path).read_text(encoding="utf-8"))
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"{path}: unknown config keys {sorted(unknown)}")
        return cls(**data)


# -- manifest ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ManifestRow:
    utt_id: str
    speech_path: str
    masker_id: str
    noise_offset: int
    snr_db: float
    seed: int
    posteriorgram: str = ""


MANIFEST_FIELDS = [f.name for f in fields(ManifestRow)]


def corpus_files(corpus) -> list[Path]:
    files = sorted(Path(corpus).glob("*.wav"))
    if not files:
        raise ValueError(f"speech corpus {corpus} contains no .wav files")
    return files


def _n_samples(path) -> int:
    with wave.open(str(path), "rb") as w:
        return w.getnframes()


def _relative(path: Path, base) -> str:
    try:
        return path.relative_to(base).as_posix() if base else str(path)
    except ValueError:
        return str(path)


def build_manifest(config: ExperimentConfig, files=None) -> list[ManifestRow]:
    """Seeded SNR / sentence / noise-offset draws for every masker.

    Per masker: ``n_snr_points`` SNRs uniform in [snr_min, snr_max], each
    with ``sentences_per_snr`` sentences and noise offsets. Speech paths
    inside the corpus directory are stored relative to it.
    """
    files = [Path(f) for f in (files if files is not None else corpus_files(config.corpus))]
    if not files:
        raise ValueError("speech corpus is empty")
    lengths = [_n_samples(f) for f in files]
    noise_len = int(round(config.masker_duration * SAMPLE_RATE))
    rows = []
    for masker in config.maskers:
        snr_rng = substream(config.seed, "snr", masker.id)
        sent_rng = substream(config.seed, "sentences", masker.id)
        off_rng = substream(config.seed, "offsets", masker.id)
        snrs = snr_rng.uniform(config.snr_min, config.snr_max, size=config.n_snr_points)
        for snr in snrs:
            picks = sent_rng.choice(len(files), size=config.sentences_per_snr,
                                    replace=config.sentences_per_snr > len(files))
            for i in picks:
                row_seed = int(off_rng.integers(0, 2**31 - 1))
                span = noise_len - lengths[i]
                if span < 0:
                    raise ValueError(f"{files[i]} is longer than the {config.masker_duration} s masker")
                # same draw as audio.select_noise_segment(noise, len, row_seed)
                offset = int(np.random.default_rng(row_seed).integers(0, span + 1))
                rows.append(ManifestRow(files[i].stem, _relative(files[i], config.corpus), masker.id,
                                        offset, float(snr), row_seed))
    return rows


def write_manifest(rows, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=MANIFEST_FIELDS, lineterminator="\n")
        writer.writeheader()
        for r in rows:
            writer.writerow(asdict(r))


def read_manifest(path) -> list[ManifestRow]:
    """Read a manifest CSV; missing optional columns get defaults.

    A minimal manifest for imported posteriorgrams only needs
    ``posteriorgram`` and ``snr_db`` (``masker_id`` defaults to "masker").
    """
    rows = []
    with open(path, newline="", encoding="utf-8") as fh:
        for i, d in enumerate(csv.DictReader(fh)):
            rows.append(ManifestRow(
                utt_id=d.get("utt_id") or f"row{i}",
                speech_path=d.get("speech_path", ""),
                masker_id=d.get("masker_id") or "masker",
                noise_offset=int(d.get("noise_offset") or 0),
                snr_db=float(d["snr_db"]),
                seed=int(d.get("seed") or 0),
                posteriorgram=d.get("posteriorgram", "") or "",
            ))
    return rows


# -- posterior providers ----------------------------------------------------------------

class ClassifierProvider:
    """Mixes each row's speech with its masker and runs a frame classifier."""

    def __init__(self, model: FrameClassifier, masker_audio: dict, feature_kind: str = "mfsc23",
                 base_dir=None):
        self.model = model
        self.base_dir = Path(base_dir) if base_dir else None
        self.maskers = masker_audio
        self.feature_kind = feature_kind
        self._speech = lru_cache(maxsize=512)(read_wav)

    def __call__(self, row: ManifestRow) -> Posteriorgram:
        path = Path(row.speech_path)
        if self.base_dir is not None and not path.is_absolute():
            path = self.base_dir / path
        speech = self._speech(path)
        mixed = mix_at_snr(speech, self.maskers[row.masker_id], row.snr_db, row.noise_offset)
        return predict_posteriors(self.model, feat.extract(mixed.mixture, self.feature_kind))


class FileProvider:
    """Loads the posteriorgram file named in each manifest row."""

    def __init__(self, base_dir=None):
        self.base_dir = Path(base_dir) if base_dir else None

    def __call__(self, row: ManifestRow) -> Posteriorgram:
        path = Path(row.posteriorgram)
        if self.base_dir is not None and not path.is_absolute():
            path = self.base_dir / path
        return load_posteriorgram(path)


# -- running ---------------------------------------------------------------------------

@dataclass
class PipelineResult:
    predictions: dict
    failures: dict
    skipped: list


def resolve_wer_map(spec: str, base_dir=None) -> WerMap:
    """``constants``, a WerMap JSON file, or a CSV of ``m,wer`` calibration pairs."""
    if spec in (None, "", "constants"):
        return WerMap()
    path = Path(spec)
    if base_dir is not None and not path.is_absolute():
        path = Path(base_dir) / path
    if path.suffix == ".json":
        return WerMap.load(path)
    with open(path, newline="", encoding="utf-8") as fh:
        pairs = [(float(d["m"]), float(d["wer"])) for d in csv.DictReader(fh)]
    return calibrate_wer_map(pairs)


def _write_csv(path, header, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)


def _fmt(x) -> str:
    return repr(float(x))


def pool_points(rows, posts, wer_map: WerMap, bin_width: float = 1.0, pooling: str = "mean"):
    """Group rows into SNR bins; returns (snr, m, wer, accuracy, n) per bin."""
    bins: dict = {}
    for row, post in zip(rows, posts):
        bins.setdefault(int(np.round(row.snr_db / bin_width)), []).append((row, post))
    out = []
    for key in sorted(bins):
        members = bins[key]
        snr = float(np.mean([r.snr_db for r, _ in members]))
        if pooling == "mean":
            m = float(np.mean([m_scalar(p) for _, p in members]))
        else:
            probs = np.vstack([p.probs for _, p in members])
            m = m_scalar(Posteriorgram(probs, members[0][1].labels, members[0][1].frame_shift))
        wer = float(wer_from_m(m, wer_map))
        out.append((snr, m, wer, float(accuracy_from_wer(wer, wer_map.cap)), len(members)))
    return out


def run_pipeline(config: ExperimentConfig, manifest, provider, out_dir=None, jobs: int = 1,
                 wer_map: WerMap | None = None) -> PipelineResult:
    """Posteriorgram -> M -> WER -> accuracy -> psychometric fit, per masker.

    Rows whose provider call fails are skipped and logged; if more than 10%
    of a masker's rows fail the whole run raises PipelineError. Fit
    failures are collected in ``PipelineResult.failures``.
    """
    out_dir = Path(out_dir or config.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    wer_map = wer_map or resolve_wer_map(config.wer_map)

    def work(row):
        try:
            return provider(row), None
        except Exception as exc:  # recorded per row, see docstring
            return None, exc

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(work, manifest))
    else:
        results = [work(r) for r in manifest]

    predictions, failures, skipped = {}, {}, []
    summary = []
    masker_ids = list(dict.fromkeys(r.masker_id for r in manifest))
    genders = {m.id: m.gender for m in config.maskers}
    for mid in masker_ids:
        idx = [i for i, r in enumerate(manifest) if r.masker_id == mid]
        good = [(manifest[i], results[i][0]) for i in idx if results[i][1] is None]
        bad = [(manifest[i], results[i][1]) for i in idx if results[i][1] is not None]
        for row, exc in bad:
            log.warning("skipping %s/%s at %.2f dB: %s", mid, row.utt_id, row.snr_db, exc)
            skipped.append((row, repr(exc)))
        if len(bad) > MAX_SKIPPED_FRACTION * len(idx):
            raise PipelineError(f"masker {mid}: {len(bad)} of {len(idx)} rows failed")

        mdir = out_dir / mid
        mdir.mkdir(parents=True, exist_ok=True)
        write_manifest([manifest[i] for i in idx], mdir / "manifest.csv")
        row_table = []
        for row, post in good:
            m = m_scalar(post)
            wer = float(wer_from_m(m, wer_map))
            row_table.append([row.utt_id, _fmt(row.snr_db), _fmt(m), _fmt(wer),
                              _fmt(accuracy_from_wer(wer, wer_map.cap))])
        _write_csv(mdir / "rows.csv", ["utt_id", "snr_db", "m_scalar", "wer_est", "accuracy"], row_table)

        points = pool_points([r for r, _ in good], [p for _, p in good], wer_map,
                             config.bin_width, config.pooling)
        _write_csv(mdir / "points.csv", ["snr_db", "m_scalar", "wer_est", "accuracy", "n_rows"],
                   [[_fmt(s), _fmt(m), _fmt(w), _fmt(a), n] for s, m, w, a, n in points])
        try:
            snrs = np.array([p[0] for p in points])
            acc = np.array([p[3] for p in points])
            fit = fit_psychometric(snrs, acc, method=config.fit_method,
                                   n_trials=np.array([p[4] for p in points]))
        except UnidentifiableFitError as exc:
            failures[mid] = exc
            _write_csv(mdir / "fit.csv", ["status", "message"], [["failed", str(exc)]])
            continue
        pred = SrtPrediction(mid, srt(fit, 0.5), srt(fit, 0.8), fit, len(points))
        predictions[mid] = pred
        _write_csv(mdir / "fit.csv", ["L50", "slope", "srt80", "residual", "n_points"],
                   [[_fmt(fit.L50), _fmt(fit.s), _fmt(pred.srt80), _fmt(fit.residual), len(points)]])
        summary.append([genders.get(mid, ""), mid, _fmt(pred.srt50), _fmt(pred.srt80), _fmt(fit.s),
                        len(points)])
    _write_csv(out_dir / "srt_summary.csv", ["gender", "masker", "srt50", "srt80", "slope", "n_points"],
               summary)
    return PipelineResult(predictions, failures, skipped)


# -- maskers for an experiment --------------------------------------------------------------

def reference_speech(config: ExperimentConfig) -> AudioBuffer:
    src = config.reference_speech or config.corpus
    path = Path(src)
    if path.is_dir():
        bufs = [read_wav(f) for f in corpus_files(path)]
        return AudioBuffer(np.concatenate([b.samples for b in bufs]), bufs[0].sample_rate)
    return read_wav(path)


def masker_metadata(entry: MaskerEntry, seed: int, duration: float) -> dict:
    return {"id": entry.id, "kind": entry.kind, "params": entry.params, "seed": seed,
            "duration": duration, "gender": entry.gender}


def prepare_maskers(config: ExperimentConfig, out_dir=None) -> dict:
    """Synthesize (or load) each masker; writes WAV plus JSON sidecar files."""
    out = Path(out_dir or config.out_dir) / "maskers"
    out.mkdir(parents=True, exist_ok=True)
    ref = None
    audio = {}
    for entry in config.maskers:
        if entry.path:
            audio[entry.id] = read_wav(entry.path)
            continue
        if ref is None:
            ref = reference_speech(config)
        seed = substream_seed(config.seed, "masker", entry.id)
        buf = mk.make_masker(mk.MaskerSpec(entry.kind, entry.params), ref, config.masker_duration, seed)
        wav = out / f"{entry.id}.wav"
        # stored as float so levels above full scale survive
        write_wav(buf, wav, subtype="FLOAT")
        wav.with_suffix(".json").write_text(
            json.dumps(masker_metadata(entry, seed, config.masker_duration), indent=2) + "\n",
            encoding="utf-8")
        audio[entry.id] = read_wav(wav)
    return audio


# -- desk-scale experiment built on the synthetic corpus ---------------------------------------

def frame_error_rate(post: Posteriorgram, labels) -> float:
    """Percentage of frames whose argmax class differs from the reference label."""
    return 100.0 * float(np.mean(post.probs.argmax(axis=1) != np.asarray(labels)))


def word_error_rate(post: Posteriorgram, labels, phones_per_word: int = 3, silence: int = 0) -> float:
    """Label-based error rate of pseudo-words built from the reference segmentation.

    Every run of identical non-silence labels is a phone segment, recognized
    by majority vote of the frame argmax. Consecutive segments form words of
    ``phones_per_word`` phones; a word is wrong if any of its phones is.
    """
    labels = np.asarray(labels)
    best = post.probs.argmax(axis=1)
    bounds = np.flatnonzero(np.diff(labels)) + 1
    correct = []
    for seg in np.split(np.arange(labels.size), bounds):
        ref = labels[seg[0]]
        if ref == silence:
            continue
        votes = np.bincount(best[seg], minlength=post.n_classes)
        correct.append(votes.argmax() == ref)
    n_words = len(correct) // phones_per_word
    if n_words == 0:
        raise ValueError("utterance is too short to contain a pseudo-word")
    words = np.array(correct[:n_words * phones_per_word]).reshape(n_words, phones_per_word)
    return 100.0 * float(np.mean(~words.all(axis=1)))


def train_multicondition(utts, masker_audio: dict, seed=0, feature_kind="mfsc23",
                         noisy_copies: int = 2, snr_range=(-10.0, 20.0),
                         class_labels=toy.PHONE_NAMES) -> FrameClassifier:
    """Clean copy plus ``noisy_copies`` random-masker, random-SNR copies per utterance."""
    if noisy_copies and not masker_audio:
        raise ValueError("multi-condition training needs at least one masker")
    rng = substream(seed, "train")
    ids = sorted(masker_audio)
    xs, ys = [], []
    for u in utts:
        xs.append(feat.extract(u.audio, feature_kind))
        ys.append(u.labels)
        for _ in range(noisy_copies):
            noise = masker_audio[ids[int(rng.integers(len(ids)))]]
            offset = int(rng.integers(0, len(noise) - len(u.audio) + 1))
            mixed = mix_at_snr(u.audio, noise, float(rng.uniform(*snr_range)), offset)
            xs.append(feat.extract(mixed.mixture, feature_kind))
            ys.append(u.labels)
    return train_frame_classifier(xs, ys, len(class_labels), seed=substream_seed(seed, "init"),
                                  class_labels=tuple(class_labels))


def calibration_pairs(model: FrameClassifier, utts, masker_audio: dict, seed=0, feature_kind="mfsc23",
                      snr_range=(-30.0, 20.0), n_points: int = 11):
    """(M, pseudo-word error %) pairs on held-out utterances, one pair per SNR.

    Every utterance is mixed with a randomly chosen masker at each of
    ``n_points`` equally spaced SNRs; M and the error are averaged over
    utterances. The label-based error stands in for the measured WER of a
    decoder.
    """
    rng = substream(seed, "calibration")
    ids = sorted(masker_audio)
    pairs = []
    for snr in np.linspace(*snr_range, n_points):
        ms, wers = [], []
        for u in utts:
            noise = masker_audio[ids[int(rng.integers(len(ids)))]]
            offset = int(rng.integers(0, len(noise) - len(u.audio) + 1))
            mixed = mix_at_snr(u.audio, noise, float(snr), offset)
            post = predict_posteriors(model, feat.extract(mixed.mixture, feature_kind))
            ms.append(m_scalar(post))
            wers.append(word_error_rate(post, u.labels))
        pairs.append((float(np.mean(ms)), float(np.mean(wers))))
    return pairs


def setup_toy_experiment(out_dir, seed=0, maskers=("SSN", "SAM_SSN"), n_train=40, n_calib=20,
                         n_test=30, n_snr_points=20, sentences_per_snr=4, masker_duration=20.0,
                         feature_kind="mfsc23") -> ExperimentConfig:
    """Write a complete synthetic experiment (corpora, maskers, model, calibration, config)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    corpus_seed = substream_seed(seed, "corpus")
    train = toy.make_corpus(n_train, seed=corpus_seed, prefix="train")
    calib = toy.make_corpus(n_calib, seed=corpus_seed + 1, prefix="calib", n_speakers=2)
    test = toy.make_corpus(n_test, seed=corpus_seed + 2, prefix="test", n_speakers=1)
    toy.write_corpus(train, out / "corpus" / "train")
    toy.write_corpus(calib, out / "corpus" / "calib")
    toy.write_corpus(test, out / "corpus" / "test")

    config = ExperimentConfig(
        corpus=str(out / "corpus" / "test"),
        maskers=[MaskerEntry(k.lower(), k) for k in maskers],
        n_snr_points=n_snr_points,
        sentences_per_snr=sentences_per_snr,
        seed=seed,
        features=feature_kind,
        wer_map=str(out / "calibration.csv"),
        out_dir=str(out / "results"),
        reference_speech=str(out / "corpus" / "train"),
        masker_duration=masker_duration,
        model=str(out / "model.npz"),
    )
    masker_audio = prepare_maskers(config, out)
    model = train_multicondition(train, masker_audio, seed, feature_kind)
    model.save(out / "model.npz")
    pairs = calibration_pairs(model, calib, masker_audio, seed, feature_kind)
    _write_csv(out / "calibration.csv", ["m", "wer"], [[_fmt(m), _fmt(w)] for m, w in pairs])
    config.save(out / "config.json")
    return config


def run_experiment(config: ExperimentConfig, jobs: int = 1) -> PipelineResult:
    """Manifest, maskers and classifier provider for a config, then :func:`run_pipeline`."""
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = build_manifest(config)
    write_manifest(manifest, out / "manifest.csv")
    masker_audio = prepare_maskers(config, out)
    if not config.model:
        raise ValueError("config.model must name a trained classifier (.npz)")
    provider = ClassifierProvider(FrameClassifier.load(config.model), masker_audio, config.features,
                                  base_dir=config.corpus)
    return run_pipeline(config, manifest, provider, out, jobs=jobs)
