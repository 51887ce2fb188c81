import csv
import dataclasses
from pathlib import Path

import numpy as np
import pytest
from scipy.stats import kstest, spearmanr

from mtdsi import pipeline as pl
from mtdsi import toy
from mtdsi.errors import PipelineError, UnidentifiableFitError
from mtdsi.posteriorgram import Posteriorgram, save_posteriorgram
from mtdsi.prediction import WerMap

from conftest import random_posteriors


@pytest.fixture(scope="module")
def corpus_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("corpus")
    toy.write_corpus(toy.make_corpus(5, seed=3, duration=2.0), d)
    return d


def _config(corpus, **kw):
    base = dict(corpus=str(corpus), maskers=[{"id": "ssn", "kind": "SSN"}, {"id": "sam", "kind": "SAM_SSN"}])
    base.update(kw)
    return pl.ExperimentConfig(**base)


class TestSubstreams:
    def test_deterministic_and_independent(self):
        a = pl.substream(1, "snr", "ssn").random(5)
        np.testing.assert_array_equal(a, pl.substream(1, "snr", "ssn").random(5))
        assert not np.array_equal(a, pl.substream(1, "snr", "sam").random(5))
        assert not np.array_equal(a, pl.substream(2, "snr", "ssn").random(5))

    def test_seed_is_int(self):
        assert isinstance(pl.substream_seed(0, "x"), int)


class TestConfig:
    def test_round_trip(self, tmp_path, corpus_dir):
        cfg = _config(corpus_dir, seed=5, n_snr_points=7)
        cfg.save(tmp_path / "c.json")
        back = pl.ExperimentConfig.load(tmp_path / "c.json")
        assert back == cfg
        assert isinstance(back.maskers[0], pl.MaskerEntry)

    def test_unknown_key(self, tmp_path):
        (tmp_path / "c.json").write_text('{"corpus": "x", "snr_mni": 3}', encoding="utf-8")
        with pytest.raises(ValueError, match="snr_mni"):
            pl.ExperimentConfig.load(tmp_path / "c.json")

    @pytest.mark.parametrize("kw", [dict(snr_min=5.0, snr_max=5.0), dict(n_snr_points=0),
                                    dict(sentences_per_snr=0), dict(pooling="median")])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            pl.ExperimentConfig(corpus="x", **kw)


class TestManifest:
    def test_default_counts(self, corpus_dir):
        rows = pl.build_manifest(_config(corpus_dir))
        assert len(rows) == 2 * 400 * 8
        assert sum(r.masker_id == "ssn" for r in rows) == 3200

    def test_single_row(self, corpus_dir):
        rows = pl.build_manifest(_config(corpus_dir, n_snr_points=1, sentences_per_snr=1,
                                         maskers=[{"id": "ssn"}]))
        assert len(rows) == 1

    def test_deterministic(self, corpus_dir):
        cfg = _config(corpus_dir, n_snr_points=20)
        assert pl.build_manifest(cfg) == pl.build_manifest(cfg)
        other = pl.build_manifest(dataclasses.replace(cfg, seed=1))
        assert other != pl.build_manifest(cfg)

    def test_snr_uniformity(self, corpus_dir):
        cfg = _config(corpus_dir, sentences_per_snr=1, maskers=[{"id": "ssn"}])
        snrs = [r.snr_db for r in pl.build_manifest(cfg)]
        assert len(snrs) == 400
        assert min(snrs) >= -30 and max(snrs) <= 20
        assert kstest(snrs, "uniform", args=(-30, 50)).pvalue > 0.01

    def test_rows_grouped_by_snr(self, corpus_dir):
        rows = pl.build_manifest(_config(corpus_dir, n_snr_points=3, sentences_per_snr=4,
                                         maskers=[{"id": "ssn"}]))
        snrs = [r.snr_db for r in rows]
        assert len(set(snrs)) == 3
        assert all(len(set(snrs[i:i + 4])) == 1 for i in range(0, 12, 4))

    def test_offsets_fit_masker(self, corpus_dir):
        cfg = _config(corpus_dir, masker_duration=5.0)
        for r in pl.build_manifest(cfg):
            assert 0 <= r.noise_offset <= 5 * 16000 - 32000

    def test_masker_too_short(self, corpus_dir):
        with pytest.raises(ValueError, match="longer than"):
            pl.build_manifest(_config(corpus_dir, masker_duration=1.0, n_snr_points=2))

    def test_empty_corpus(self, tmp_path):
        with pytest.raises(ValueError, match="no .wav"):
            pl.build_manifest(_config(tmp_path))
        with pytest.raises(ValueError):
            pl.build_manifest(_config(tmp_path), files=[])

    def test_paths_relative_to_corpus(self, tmp_path, corpus_dir):
        rows = pl.build_manifest(_config(corpus_dir, n_snr_points=2))
        assert all(r.speech_path == f"{r.utt_id}.wav" for r in rows)
        outside = tmp_path / "elsewhere.wav"
        outside.write_bytes((Path(corpus_dir) / rows[0].speech_path).read_bytes())
        (row, *_) = pl.build_manifest(_config(corpus_dir, n_snr_points=1), files=[outside])
        assert row.speech_path == str(outside)

    def test_csv_round_trip(self, tmp_path, corpus_dir):
        rows = pl.build_manifest(_config(corpus_dir, n_snr_points=3))
        pl.write_manifest(rows, tmp_path / "m.csv")
        assert pl.read_manifest(tmp_path / "m.csv") == rows

    def test_minimal_manifest(self, tmp_path):
        (tmp_path / "m.csv").write_text("posteriorgram,snr_db\na.pstg,-3.5\n", encoding="utf-8")
        (row,) = pl.read_manifest(tmp_path / "m.csv")
        assert row.masker_id == "masker" and row.snr_db == -3.5 and row.posteriorgram == "a.pstg"


class TestLabelScores:
    def test_frame_error_rate(self):
        post = Posteriorgram(np.eye(3)[[0, 1, 2, 2]])
        assert pl.frame_error_rate(post, [0, 1, 2, 1]) == 25.0

    def test_word_error_rate(self):
        labels = np.array([0, 1, 1, 2, 2, 3, 0, 4, 5, 5, 6, 0])
        best = labels.copy()
        best[8:10] = 1  # second word's middle phone wrong
        post = Posteriorgram(np.eye(7)[best])
        assert pl.word_error_rate(post, labels) == 50.0
        assert pl.word_error_rate(Posteriorgram(np.eye(7)[labels]), labels) == 0.0

    def test_word_error_rate_too_short(self):
        with pytest.raises(ValueError):
            pl.word_error_rate(Posteriorgram(np.eye(3)[[0, 1, 0]]), [0, 1, 0])


class TestWerMapSource:
    def test_constants(self):
        assert pl.resolve_wer_map("constants") == WerMap()

    def test_json(self, tmp_path):
        WerMap(100.0, 0.3).save(tmp_path / "w.json")
        assert pl.resolve_wer_map(str(tmp_path / "w.json")) == WerMap(100.0, 0.3)

    def test_calibration_csv(self, tmp_path):
        m = np.linspace(1, 20, 6)
        with open(tmp_path / "cal.csv", "w", encoding="utf-8") as fh:
            fh.write("m,wer\n")
            for a, b in zip(m, 200 * np.exp(-0.25 * m)):
                fh.write(f"{float(a)!r},{float(b)!r}\n")
        fit = pl.resolve_wer_map("cal.csv", base_dir=tmp_path)
        assert fit.A == pytest.approx(200, rel=1e-9) and fit.k == pytest.approx(0.25, rel=1e-9)


class TestPooling:
    def test_bins_and_means(self, rng):
        rows = [pl.ManifestRow("u", "", "m", 0, snr, 0) for snr in (-10.2, -9.8, 0.4, 0.1)]
        posts = [Posteriorgram(random_posteriors(rng, 100, 4)) for _ in rows]
        points = pl.pool_points(rows, posts, WerMap())
        assert [p[4] for p in points] == [2, 2]
        assert points[0][0] == pytest.approx(-10.0)

    def test_concat_mode(self, rng):
        rows = [pl.ManifestRow("u", "", "m", 0, 1.0, 0)] * 2
        posts = [Posteriorgram(random_posteriors(rng, 100, 4)) for _ in rows]
        (pt,) = pl.pool_points(rows, posts, WerMap(), pooling="concat")
        assert pt[4] == 2 and pt[1] > 0


class _ConstantProvider:
    def __call__(self, row):
        return Posteriorgram(np.full((120, 5), 0.2))


class _SyntheticProvider:
    """Posteriorgrams whose sharpness grows with SNR; some rows fail on purpose."""

    def __init__(self, fail_every=0):
        self.fail_every = fail_every

    def __call__(self, row):
        if self.fail_every and row.seed % self.fail_every == 0:
            raise OSError("simulated missing file")
        r = np.random.default_rng(row.seed)
        conc = 0.05 * 10 ** (-(row.snr_db + 5) / 15)
        return Posteriorgram(r.dirichlet(np.full(10, conc), size=150))


def _synthetic_manifest(n=60, masker="syn"):
    snrs = np.repeat(np.linspace(-30, 20, n // 2), 2)
    return [pl.ManifestRow(f"u{i}", "", masker, 0, float(s), 1000 + i) for i, s in enumerate(snrs)]


class TestRunPipeline:
    def test_constant_provider_unidentifiable(self, tmp_path):
        cfg = pl.ExperimentConfig(corpus="", maskers=[{"id": "syn"}])
        result = pl.run_pipeline(cfg, _synthetic_manifest(), _ConstantProvider(), tmp_path)
        assert isinstance(result.failures["syn"], UnidentifiableFitError)
        assert not result.predictions
        assert "failed" in (tmp_path / "syn" / "fit.csv").read_text()

    def test_synthetic_fit_and_artifacts(self, tmp_path):
        cfg = pl.ExperimentConfig(corpus="", maskers=[{"id": "syn", "gender": "male"}])
        result = pl.run_pipeline(cfg, _synthetic_manifest(), _SyntheticProvider(), tmp_path)
        pred = result.predictions["syn"]
        assert pred.fit.s > 0 and pred.srt80 > pred.srt50
        for name in ("manifest.csv", "rows.csv", "points.csv", "fit.csv"):
            assert (tmp_path / "syn" / name).exists()
        with open(tmp_path / "srt_summary.csv", encoding="utf-8") as fh:
            (summary,) = list(csv.DictReader(fh))
        assert summary["gender"] == "male" and float(summary["srt50"]) == pred.srt50
        with open(tmp_path / "syn" / "rows.csv", encoding="utf-8") as fh:
            header = next(csv.reader(fh))
        assert header == ["utt_id", "snr_db", "m_scalar", "wer_est", "accuracy"]

    def test_skips_failed_rows(self, tmp_path):
        cfg = pl.ExperimentConfig(corpus="", maskers=[{"id": "syn"}])
        result = pl.run_pipeline(cfg, _synthetic_manifest(), _SyntheticProvider(fail_every=20), tmp_path)
        assert len(result.skipped) == 3
        assert "syn" in result.predictions

    def test_too_many_failures(self, tmp_path):
        cfg = pl.ExperimentConfig(corpus="", maskers=[{"id": "syn"}])
        with pytest.raises(PipelineError):
            pl.run_pipeline(cfg, _synthetic_manifest(), _SyntheticProvider(fail_every=5), tmp_path)

    def test_threads_match_serial(self, tmp_path):
        cfg = pl.ExperimentConfig(corpus="", maskers=[{"id": "syn"}])
        pl.run_pipeline(cfg, _synthetic_manifest(), _SyntheticProvider(), tmp_path / "a", jobs=1)
        pl.run_pipeline(cfg, _synthetic_manifest(), _SyntheticProvider(), tmp_path / "b", jobs=4)
        for name in ("syn/rows.csv", "syn/points.csv", "syn/fit.csv", "srt_summary.csv"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    def test_file_provider(self, tmp_path, rng):
        rows = []
        for i, snr in enumerate(np.linspace(-30, 20, 40)):
            conc = 0.05 * 10 ** (-(snr + 5) / 15)
            save_posteriorgram(Posteriorgram(rng.dirichlet(np.full(10, conc), size=120)), tmp_path / f"p{i}.pstg")
            rows.append(pl.ManifestRow(f"u{i}", "", "files", 0, float(snr), 0, f"p{i}.pstg"))
        cfg = pl.ExperimentConfig(corpus="", maskers=[{"id": "files"}])
        result = pl.run_pipeline(cfg, rows, pl.FileProvider(tmp_path), tmp_path / "out")
        assert result.predictions["files"].fit.s > 0


class TestToyExperiment:
    def test_layout(self, toy_experiment):
        out = Path(toy_experiment.out_dir).parent
        for name in ("config.json", "model.npz", "calibration.csv", "corpus/test", "maskers"):
            assert (out / name).exists()
        assert toy_experiment.n_snr_points == 20 and toy_experiment.sentences_per_snr == 4

    def test_end_to_end(self, toy_experiment, tmp_path):
        cfg = dataclasses.replace(toy_experiment, out_dir=str(tmp_path / "run"))
        result = pl.run_experiment(cfg)
        assert len(result.predictions) == 2 and not result.failures
        for pred in result.predictions.values():
            assert pred.fit.s > 0 and pred.srt80 > pred.srt50
        assert len(pl.read_manifest(tmp_path / "run" / "manifest.csv")) == 2 * 20 * 4

    def test_accuracy_rises_with_snr(self, toy_experiment, tmp_path):
        cfg = dataclasses.replace(toy_experiment, out_dir=str(tmp_path / "rho"), n_snr_points=100,
                                  maskers=toy_experiment.maskers[:1])
        pl.run_experiment(cfg)
        with open(tmp_path / "rho" / cfg.maskers[0].id / "rows.csv", encoding="utf-8") as fh:
            rows = list(csv.DictReader(fh))
        assert len(rows) == 400
        rho = spearmanr([float(r["snr_db"]) for r in rows], [float(r["accuracy"]) for r in rows])[0]
        assert rho > 0.8

    def test_missing_model(self, toy_experiment, tmp_path):
        cfg = dataclasses.replace(toy_experiment, out_dir=str(tmp_path), model=None)
        with pytest.raises(ValueError, match="model"):
            pl.run_experiment(cfg)

    def test_prepare_maskers_sidecars(self, toy_experiment, tmp_path):
        audio = pl.prepare_maskers(toy_experiment, tmp_path)
        assert set(audio) == {m.id for m in toy_experiment.maskers}
        for m in toy_experiment.maskers:
            assert (tmp_path / "maskers" / f"{m.id}.json").exists()
