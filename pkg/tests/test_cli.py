import csv
import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from mtdsi import toy
from mtdsi.audio import AudioBuffer, read_wav, write_wav
from mtdsi.cli import build_parser, main
from mtdsi.pipeline import ExperimentConfig
from mtdsi.posteriorgram import Posteriorgram, load_features, load_posteriorgram, save_posteriorgram
from mtdsi.prediction import WerMap


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli_corpus")
    toy.write_corpus(toy.make_corpus(4, seed=11, duration=2.0), d)
    return d


@pytest.fixture(scope="module")
def ref_speech(corpus, tmp_path_factory):
    path = tmp_path_factory.mktemp("ref") / "ref.wav"
    bufs = [read_wav(p) for p in sorted(corpus.glob("*.wav"))]
    write_wav(AudioBuffer(np.concatenate([b.samples for b in bufs])), path)
    return path


def _read_csv(path):
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


class TestParser:
    def test_subcommands(self):
        text = build_parser().format_help()
        for cmd in ("mix", "masker", "features", "posterior", "mmeasure", "predict", "eval", "manifest"):
            assert cmd in text

    def test_global_flags(self):
        args = build_parser().parse_args(["--seed", "3", "--jobs", "2", "--out-dir", "x", "mmeasure", "p"])
        assert (args.seed, args.jobs, args.out_dir) == (3, 2, "x")

    def test_bad_jobs(self):
        with pytest.raises(SystemExit):
            main(["--jobs", "0", "mmeasure", "p"])

    def test_module_entry_point(self):
        out = subprocess.run([sys.executable, "-m", "mtdsi.cli", "--version"], capture_output=True, text=True)
        assert out.returncode == 0 and "0.1.0" in out.stdout


class TestMaskerAndMix:
    def test_masker(self, tmp_path, ref_speech):
        out = tmp_path / "sam.wav"
        code = main(["--seed", "4", "masker", "--kind", "SAM_SSN", "--ref-speech", str(ref_speech),
                     "--duration", "3", "--param", "rate=4", "--out", str(out)])
        assert code == 0
        assert len(read_wav(out)) == 48000
        meta = json.loads(out.with_suffix(".json").read_text())
        assert meta["kind"] == "SAM_SSN" and meta["seed"] == 4 and meta["params"] == {"rate": 4}

    def test_masker_deterministic(self, tmp_path, ref_speech):
        for name in ("a.wav", "b.wav"):
            main(["--seed", "1", "masker", "--kind", "SSN", "--ref-speech", str(ref_speech),
                  "--duration", "2", "--out", str(tmp_path / name)])
        assert (tmp_path / "a.wav").read_bytes() == (tmp_path / "b.wav").read_bytes()

    def test_mix(self, tmp_path, ref_speech, corpus, capsys):
        noise = tmp_path / "ssn.wav"
        main(["masker", "--kind", "SSN", "--ref-speech", str(ref_speech), "--duration", "4", "--out", str(noise)])
        speech = sorted(corpus.glob("*.wav"))[0]
        out = tmp_path / "mix.wav"
        code = main(["--seed", "2", "mix", "--speech", str(speech), "--noise", str(noise), "--snr", "-5",
                     "--out", str(out)])
        assert code == 0
        meta = json.loads(out.with_suffix(".json").read_text())
        assert abs(meta["achieved_snr_db"] + 5) < 0.01
        assert len(read_wav(out)) == len(read_wav(speech))

    def test_mix_noise_too_short(self, tmp_path, corpus, capsys):
        noise = tmp_path / "short.wav"
        write_wav(AudioBuffer(0.1 * np.ones(1000)), noise)
        speech = sorted(corpus.glob("*.wav"))[0]
        code = main(["mix", "--speech", str(speech), "--noise", str(noise), "--snr", "0", "--offset", "0",
                     "--out", str(tmp_path / "m.wav")])
        assert code == 2
        assert "error" in capsys.readouterr().err


class TestFeaturesAndPosteriors:
    @pytest.mark.parametrize("kind, dim", [("mfsc23", 115), ("amfb", 3960)])
    def test_features(self, tmp_path, corpus, kind, dim):
        wav = sorted(corpus.glob("*.wav"))[0]
        out = tmp_path / "f.feat"
        assert main(["features", str(wav), "--kind", kind, "--out", str(out)]) == 0
        assert load_features(out).data.shape[1] == dim

    def test_train_predict_mmeasure(self, tmp_path, corpus, capsys):
        model = tmp_path / "model.npz"
        assert main(["--seed", "0", "posterior", "train", "--corpus", str(corpus), "--out", str(model)]) == 0
        wav = sorted(corpus.glob("*.wav"))[0]
        pst = tmp_path / "p.pstg"
        assert main(["posterior", "predict", str(wav), "--model", str(model), "--out", str(pst)]) == 0
        post = load_posteriorgram(pst)
        assert post.n_classes == toy.N_PHONES and post.labels == toy.PHONE_NAMES

        feat = tmp_path / "f.feat"
        main(["features", str(wav), "--out", str(feat)])
        pst2 = tmp_path / "p2.pstg"
        assert main(["posterior", "predict", str(feat), "--model", str(model), "--out", str(pst2)]) == 0
        np.testing.assert_allclose(load_posteriorgram(pst2).probs, post.probs, atol=1e-4)

        capsys.readouterr()
        assert main(["mmeasure", str(pst)]) == 0
        lines = capsys.readouterr().out.strip().splitlines()
        assert lines[0] == "delta_t_ms,m_value"
        assert [ln.split(",")[0] for ln in lines[1:]] == [str(50 * k) for k in range(1, 17)] + ["scalar"]
        values = np.array([float(ln.split(",")[1]) for ln in lines[1:17]])
        assert float(lines[-1].split(",")[1]) == pytest.approx(values.mean(), rel=1e-12)

    def test_mmeasure_to_file(self, tmp_path):
        p = tmp_path / "c.pstg"
        save_posteriorgram(Posteriorgram(np.full((100, 4), 0.25)), p)
        out = tmp_path / "m.csv"
        assert main(["mmeasure", str(p), "--out", str(out)]) == 0
        rows = _read_csv(out)
        assert len(rows) == 17 and all(float(r["m_value"]) == 0 for r in rows)

    def test_mmeasure_too_short(self, tmp_path, capsys):
        p = tmp_path / "s.pstg"
        save_posteriorgram(Posteriorgram(np.full((20, 4), 0.25)), p)
        assert main(["mmeasure", str(p)]) == 2
        assert "frames" in capsys.readouterr().err

    def test_import_with_grouping(self, tmp_path):
        csv_path = tmp_path / "tri.csv"
        csv_path.write_text("t0,t1,t2\n0.2,0.3,0.5\n0.6,0.2,0.2\n", encoding="utf-8")
        tmap = tmp_path / "map.txt"
        tmap.write_text("0 a\n1 b\n2 a\n", encoding="utf-8")
        out = tmp_path / "mono.pstg"
        assert main(["posterior", "import", str(csv_path), "--triphone-map", str(tmap), "--out", str(out)]) == 0
        post = load_posteriorgram(out)
        assert post.labels == ("a", "b")
        np.testing.assert_allclose(post.probs, [[0.7, 0.3], [0.8, 0.2]], atol=1e-7)


def _write_posterior_manifest(tmp_path, rng):
    lines = ["posteriorgram,snr_db,masker_id"]
    for i, snr in enumerate(np.linspace(-30, 20, 30).tolist()):
        conc = 0.05 * 10 ** (-(snr + 5) / 15)
        save_posteriorgram(Posteriorgram(rng.dirichlet(np.full(10, conc), size=120)), tmp_path / f"p{i}.pstg")
        lines.append(f"p{i}.pstg,{snr!r},syn")
    (tmp_path / "manifest.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    return tmp_path / "manifest.csv"


class TestPredictEval:
    def test_predict(self, tmp_path, rng):
        manifest = _write_posterior_manifest(tmp_path, rng)
        WerMap().save(tmp_path / "w.json")
        out = tmp_path / "out"
        code = main(["--out-dir", str(out), "predict", "--manifest", str(manifest),
                     "--wer-map", str(tmp_path / "w.json")])
        assert code == 0
        rows = _read_csv(out / "syn" / "rows.csv")
        assert len(rows) == 30 and set(rows[0]) == {"utt_id", "snr_db", "m_scalar", "wer_est", "accuracy"}
        fit = _read_csv(out / "syn" / "fit.csv")[0]
        assert {"L50", "slope", "srt80"} <= set(fit)
        assert float(fit["slope"]) > 0

    def test_predict_fit_failure_exit_code(self, tmp_path):
        lines = ["posteriorgram,snr_db"]
        for i, snr in enumerate(np.linspace(-10, 10, 10).tolist()):
            save_posteriorgram(Posteriorgram(np.full((100, 4), 0.25)), tmp_path / f"c{i}.pstg")
            lines.append(f"c{i}.pstg,{snr!r}")
        (tmp_path / "m.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
        assert main(["--out-dir", str(tmp_path / "o"), "predict", "--manifest", str(tmp_path / "m.csv")]) == 1

    def test_eval(self, tmp_path, capsys):
        (tmp_path / "pred.csv").write_text(
            "gender,masker,srt50\nfemale,a,-5\nfemale,b,-10\nmale,a,-3\n", encoding="utf-8")
        (tmp_path / "ref.csv").write_text(
            "gender,masker,srt50\nfemale,a,-7\nfemale,b,-12\nmale,a,-4\nmale,z,0\n", encoding="utf-8")
        assert main(["eval", "--predicted", str(tmp_path / "pred.csv"), "--reference", str(tmp_path / "ref.csv"),
                     "--out", str(tmp_path / "rmse.csv")]) == 0
        rows = {r["gender"]: r for r in _read_csv(tmp_path / "rmse.csv")}
        assert float(rows["female"]["rmse_db"]) == pytest.approx(2.0)
        assert float(rows["male"]["rmse_db"]) == pytest.approx(1.0)
        assert float(rows["all"]["rmse_db"]) == pytest.approx(np.sqrt(3.0))

    def test_eval_no_overlap(self, tmp_path):
        (tmp_path / "a.csv").write_text("gender,masker,srt50\nf,a,1\n", encoding="utf-8")
        (tmp_path / "b.csv").write_text("gender,masker,srt50\nf,b,1\n", encoding="utf-8")
        assert main(["eval", "--predicted", str(tmp_path / "a.csv"), "--reference", str(tmp_path / "b.csv")]) == 2

    def test_calibrate(self, tmp_path):
        m = np.linspace(1, 25, 8)
        lines = ["m,wer"] + [f"{a!r},{b!r}" for a, b in zip(m.tolist(), (289.93 * np.exp(-0.213 * m)).tolist())]
        (tmp_path / "cal.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
        assert main(["--out-dir", str(tmp_path), "calibrate", str(tmp_path / "cal.csv")]) == 0
        fit = WerMap.load(tmp_path / "wer_map.json")
        assert fit.A == pytest.approx(289.93, rel=1e-6) and fit.k == pytest.approx(0.213, rel=1e-6)


class TestManifestAndRun:
    def test_manifest(self, tmp_path, corpus):
        cfg = ExperimentConfig(corpus=str(corpus), maskers=[{"id": "ssn"}], n_snr_points=5,
                               sentences_per_snr=2, masker_duration=5.0)
        cfg.save(tmp_path / "c.json")
        out = tmp_path / "m.csv"
        assert main(["--seed", "9", "manifest", "--config", str(tmp_path / "c.json"), "--out", str(out)]) == 0
        rows = _read_csv(out)
        assert len(rows) == 10
        assert main(["--seed", "9", "manifest", "--config", str(tmp_path / "c.json"),
                     "--out", str(tmp_path / "m2.csv")]) == 0
        assert out.read_bytes() == (tmp_path / "m2.csv").read_bytes()

    def test_run(self, toy_experiment, tmp_path, capsys):
        cfg_path = tmp_path / "c.json"
        ExperimentConfig.load(Path(toy_experiment.out_dir).parent / "config.json").save(cfg_path)
        out = tmp_path / "run"
        assert main(["--out-dir", str(out), "--jobs", "2", "run", "--config", str(cfg_path)]) == 0
        summary = _read_csv(out / "srt_summary.csv")
        assert len(summary) == 2 and all(float(r["slope"]) > 0 for r in summary)
        assert "SRT50" in capsys.readouterr().out
