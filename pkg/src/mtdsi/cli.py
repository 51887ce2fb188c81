"""Command line interface.

Every subcommand reads and writes plain files (WAV, CSV, JSON, the binary
matrix container), so steps can be chained or replaced by external tools.
Exit status: 0 on success, 1 if a psychometric fit failed, 2 on usage or
input errors.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

from . import __version__
from . import features as feat
from . import maskers as mk
from . import pipeline as pl
from . import toy
from .audio import mix_at_snr, read_wav, select_noise_segment, write_wav
from .errors import MtdsiError
from .mmeasure import DEFAULT_FLOOR, mtd_profile
from .posteriorgram import (
    FrameClassifier,
    TriphoneMap,
    group_to_monophones,
    import_csv,
    load_features,
    load_posteriorgram,
    predict_posteriors,
    save_features,
    save_posteriorgram,
)
from .prediction import calibrate_wer_map, rmse_srt

log = logging.getLogger("mtdsi")


def _out(args, name: str) -> Path:
    """``--out`` if given, else ``<out-dir>/<name>``."""
    path = Path(args.out) if args.out else Path(args.out_dir) / name
    path.parent.mkdir(parents=True, exist_ok=True)
    return path


def _seed(args, default: int = 0) -> int:
    return default if args.seed is None else args.seed


def _parse_params(items) -> dict:
    params = {}
    for item in items or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise argparse.ArgumentTypeError(f"masker parameter {item!r} is not KEY=VALUE")
        try:
            params[key] = json.loads(value)
        except json.JSONDecodeError:
            params[key] = value
    return params


def _write_rows(path, header, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)


# -- subcommands ----------------------------------------------------------------------

def cmd_mix(args) -> int:
    speech, noise = read_wav(args.speech), read_wav(args.noise)
    offset = args.offset
    if offset is None:
        _, offset = select_noise_segment(noise, len(speech), _seed(args))
    res = mix_at_snr(speech, noise, args.snr, offset)
    out = _out(args, "mixture.wav")
    write_wav(res.mixture, out, subtype=args.subtype)
    meta = {"speech": str(args.speech), "noise": str(args.noise), "snr_db": args.snr,
            "achieved_snr_db": res.achieved_snr_db, "noise_offset": res.noise_offset,
            "noise_gain": res.noise_gain, "mixture_gain": res.mixture_gain}
    out.with_suffix(".json").write_text(json.dumps(meta, indent=2) + "\n", encoding="utf-8")
    print(f"{out}: achieved SNR {res.achieved_snr_db:.4f} dB (offset {res.noise_offset})")
    return 0


def cmd_masker(args) -> int:
    seed = _seed(args)
    spec = mk.MaskerSpec(args.kind, _parse_params(args.param))
    buf = mk.make_masker(spec, read_wav(args.ref_speech), args.duration, seed)
    out = _out(args, f"{args.kind.lower()}.wav")
    write_wav(buf, out, subtype="FLOAT")
    meta = {"kind": spec.kind, "params": spec.params, "seed": seed, "duration": args.duration,
            "ref_speech": str(args.ref_speech)}
    out.with_suffix(".json").write_text(json.dumps(meta, indent=2) + "\n", encoding="utf-8")
    print(out)
    return 0


def cmd_features(args) -> int:
    fm = feat.extract(read_wav(args.input), args.kind, args.context)
    out = _out(args, Path(args.input).with_suffix(".feat").name)
    save_features(fm, out)
    print(f"{out}: {fm.data.shape[0]} frames x {fm.data.shape[1]} dims")
    return 0


def _maybe_group(post, args):
    if getattr(args, "triphone_map", None):
        post = group_to_monophones(post, TriphoneMap.from_file(args.triphone_map))
    return post


def cmd_posterior_train(args) -> int:
    utts = toy.read_corpus(args.corpus)
    if any(u.labels is None for u in utts):
        raise MtdsiError(f"{args.corpus}: every .wav needs a matching .lab file")
    phones_file = Path(args.corpus) / "phones.txt"
    labels = (tuple(phones_file.read_text(encoding="utf-8").split()) if phones_file.exists()
              else toy.PHONE_NAMES)
    maskers = {Path(p).stem: read_wav(p) for p in args.masker or []}
    model = pl.train_multicondition(utts, maskers, _seed(args), args.features,
                                    noisy_copies=args.noisy_copies if maskers else 0,
                                    class_labels=labels)
    out = _out(args, "model.npz")
    model.save(out)
    print(f"{out}: {model.input_dim} inputs, {model.n_classes} classes")
    return 0


def cmd_posterior_predict(args) -> int:
    model = FrameClassifier.load(args.model)
    src = Path(args.input)
    fm = read_wav(src) if src.suffix.lower() == ".wav" else load_features(src)
    if src.suffix.lower() == ".wav":
        fm = feat.extract(fm, args.features)
    post = _maybe_group(predict_posteriors(model, fm), args)
    out = _out(args, src.with_suffix(".pstg").name)
    save_posteriorgram(post, out)
    print(f"{out}: {post.n_frames} frames x {post.n_classes} classes")
    return 0


def cmd_posterior_import(args) -> int:
    post = _maybe_group(import_csv(args.input, args.frame_shift), args)
    out = _out(args, Path(args.input).with_suffix(".pstg").name)
    save_posteriorgram(post, out)
    print(f"{out}: {post.n_frames} frames x {post.n_classes} classes")
    return 0


def cmd_mmeasure(args) -> int:
    prof = mtd_profile(load_posteriorgram(args.input), floor=args.floor)
    rows = [[f"{round(dt * 1000)}", repr(float(v))] for dt, v in zip(prof.delta_ts, prof.values)]
    rows.append(["scalar", repr(float(prof.scalar))])
    if args.out:
        _write_rows(_out(args, ""), ["delta_t_ms", "m_value"], rows)
    else:
        writer = csv.writer(sys.stdout, lineterminator="\n")
        writer.writerow(["delta_t_ms", "m_value"])
        writer.writerows(rows)
    return 0


def _report(result, out_dir) -> int:
    for mid, pred in result.predictions.items():
        print(f"{mid}: SRT50 {pred.srt50:.2f} dB, SRT80 {pred.srt80:.2f} dB, slope {pred.fit.s:.4f}/dB")
    for mid, exc in result.failures.items():
        print(f"{mid}: fit failed: {exc}", file=sys.stderr)
    if result.skipped:
        print(f"{len(result.skipped)} rows skipped", file=sys.stderr)
    print(f"results in {out_dir}")
    return 1 if result.failures else 0


def cmd_predict(args) -> int:
    manifest_path = Path(args.manifest)
    manifest = pl.read_manifest(manifest_path)
    if not manifest:
        raise MtdsiError(f"{manifest_path}: manifest has no rows")
    masker_ids = list(dict.fromkeys(r.masker_id for r in manifest))
    config = pl.ExperimentConfig(corpus="", maskers=[pl.MaskerEntry(m, gender=args.gender) for m in masker_ids],
                                 out_dir=args.out_dir, bin_width=args.bin_width, pooling=args.pooling,
                                 fit_method=args.fit_method, wer_map=args.wer_map)
    wer_map = pl.resolve_wer_map(args.wer_map)
    result = pl.run_pipeline(config, manifest, pl.FileProvider(manifest_path.parent), args.out_dir,
                             jobs=args.jobs, wer_map=wer_map)
    return _report(result, args.out_dir)


def _read_srts(path) -> dict:
    with open(path, newline="", encoding="utf-8") as fh:
        return {(d.get("gender", "") or "", d["masker"]): float(d["srt50"]) for d in csv.DictReader(fh)}


def cmd_eval(args) -> int:
    pred, ref = _read_srts(args.predicted), _read_srts(args.reference)
    keys = [k for k in pred if k in ref]
    missing = sorted(set(pred) ^ set(ref))
    if missing:
        log.warning("unmatched (gender, masker) entries ignored: %s", missing)
    if not keys:
        raise MtdsiError("no masker appears in both SRT tables")
    rows = []
    for gender in sorted({g for g, _ in keys}):
        sel = [k for k in keys if k[0] == gender]
        rows.append([gender, len(sel), repr(rmse_srt([pred[k] for k in sel], [ref[k] for k in sel]))])
    rows.append(["all", len(keys), repr(rmse_srt([pred[k] for k in keys], [ref[k] for k in keys]))])
    header = ["gender", "n_maskers", "rmse_db"]
    if args.out:
        _write_rows(_out(args, ""), header, rows)
    writer = csv.writer(sys.stdout, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    return 0


def cmd_calibrate(args) -> int:
    with open(args.pairs, newline="", encoding="utf-8") as fh:
        pairs = [(float(d["m"]), float(d["wer"])) for d in csv.DictReader(fh)]
    wer_map = calibrate_wer_map(pairs)
    out = _out(args, "wer_map.json")
    wer_map.save(out)
    print(f"{out}: A={wer_map.A:.6g}, k={wer_map.k:.6g}")
    return 0


def _load_config(args) -> pl.ExperimentConfig:
    config = pl.ExperimentConfig.load(args.config)
    if args.seed is not None:
        config.seed = args.seed
    if args.out_dir_given:
        config.out_dir = args.out_dir
    return config


def cmd_manifest(args) -> int:
    config = _load_config(args)
    rows = pl.build_manifest(config)
    out = Path(args.out) if args.out else Path(config.out_dir) / "manifest.csv"
    out.parent.mkdir(parents=True, exist_ok=True)
    pl.write_manifest(rows, out)
    print(f"{out}: {len(rows)} rows")
    return 0


def cmd_run(args) -> int:
    config = _load_config(args)
    return _report(pl.run_experiment(config, jobs=args.jobs), config.out_dir)


def cmd_toy(args) -> int:
    config = pl.setup_toy_experiment(args.out_dir, seed=_seed(args), maskers=tuple(args.maskers),
                                     n_snr_points=args.n_snr_points,
                                     sentences_per_snr=args.sentences_per_snr,
                                     feature_kind=args.features)
    print(f"toy experiment written to {args.out_dir} (config {Path(args.out_dir) / 'config.json'})")
    if args.run:
        return _report(pl.run_experiment(config, jobs=args.jobs), config.out_dir)
    return 0


# -- parser ---------------------------------------------------------------------------

FEATURE_KINDS = ("mfsc23", "mfsc40", "amfb")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mtdsi", description="Reference-free SRT prediction from "
                                     "phoneme posteriorgrams via the mean temporal distance.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--seed", type=int, default=None, help="root random seed (default 0)")
    parser.add_argument("--jobs", type=int, default=1, help="worker threads for batch steps")
    parser.add_argument("--out-dir", default=None, help="output directory (default: current)")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("mix", help="mix speech with a masker at a given SNR")
    p.add_argument("--speech", required=True)
    p.add_argument("--noise", required=True)
    p.add_argument("--snr", type=float, required=True, help="SNR in dB")
    p.add_argument("--offset", type=int, default=None, help="noise offset in samples (default: random)")
    p.add_argument("--subtype", choices=("PCM_16", "FLOAT"), default="FLOAT")
    p.add_argument("--out")
    p.set_defaults(func=cmd_mix)

    p = sub.add_parser("masker", help="synthesize a masker from reference speech")
    p.add_argument("--kind", required=True, choices=mk.KINDS)
    p.add_argument("--ref-speech", required=True)
    p.add_argument("--duration", type=float, default=60.0, help="seconds (default 60)")
    p.add_argument("--param", action="append", metavar="KEY=VALUE", help="masker parameter, repeatable")
    p.add_argument("--out")
    p.set_defaults(func=cmd_masker)

    p = sub.add_parser("features", help="extract a feature matrix from a WAV file")
    p.add_argument("input")
    p.add_argument("--kind", choices=FEATURE_KINDS, default="mfsc23")
    p.add_argument("--context", type=int, default=None, help="splicing context in frames")
    p.add_argument("--out")
    p.set_defaults(func=cmd_features)

    p = sub.add_parser("posterior", help="train a frame classifier or produce posteriorgrams")
    psub = p.add_subparsers(dest="action", required=True)
    q = psub.add_parser("train", help="train the frame classifier on a labelled corpus")
    q.add_argument("--corpus", required=True, help="directory of .wav files with .lab frame labels")
    q.add_argument("--features", choices=FEATURE_KINDS, default="mfsc23")
    q.add_argument("--masker", action="append", help="masker WAV for multi-condition copies")
    q.add_argument("--noisy-copies", type=int, default=2)
    q.add_argument("--out")
    q.set_defaults(func=cmd_posterior_train)
    q = psub.add_parser("predict", help="posteriorgram of a WAV or feature file")
    q.add_argument("input")
    q.add_argument("--model", required=True)
    q.add_argument("--features", choices=FEATURE_KINDS, default="mfsc23")
    q.add_argument("--triphone-map", help="group triphone posteriors to monophones")
    q.add_argument("--out")
    q.set_defaults(func=cmd_posterior_predict)
    q = psub.add_parser("import", help="convert a CSV posteriorgram to the binary format")
    q.add_argument("input")
    q.add_argument("--frame-shift", type=float, default=0.01, help="seconds (default 0.01)")
    q.add_argument("--triphone-map", help="group triphone posteriors to monophones")
    q.add_argument("--out")
    q.set_defaults(func=cmd_posterior_import)

    p = sub.add_parser("mmeasure", help="M profile of a posteriorgram (CSV to stdout or --out)")
    p.add_argument("input")
    p.add_argument("--floor", type=float, default=DEFAULT_FLOOR)
    p.add_argument("--out")
    p.set_defaults(func=cmd_mmeasure)

    p = sub.add_parser("predict", help="SRT prediction from a manifest of posteriorgram files")
    p.add_argument("--manifest", required=True, help="CSV with posteriorgram and snr_db columns")
    p.add_argument("--wer-map", default="constants", help="'constants', a JSON map or an m,wer CSV")
    p.add_argument("--gender", default="female")
    p.add_argument("--bin-width", type=float, default=1.0)
    p.add_argument("--pooling", choices=("mean", "concat"), default="mean")
    p.add_argument("--fit-method", choices=("lsq", "mle"), default="lsq")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("eval", help="RMSE between predicted and reference SRT tables")
    p.add_argument("--predicted", required=True)
    p.add_argument("--reference", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("calibrate", help="fit a WER map to m,wer pairs")
    p.add_argument("pairs")
    p.add_argument("--out")
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("manifest", help="build the mixing manifest of an experiment config")
    p.add_argument("--config", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_manifest)

    p = sub.add_parser("run", help="run a full experiment from a config")
    p.add_argument("--config", required=True)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("toy", help="write (and optionally run) a synthetic experiment")
    p.add_argument("--maskers", nargs="+", default=["SSN", "SAM_SSN"], choices=mk.KINDS)
    p.add_argument("--n-snr-points", type=int, default=20)
    p.add_argument("--sentences-per-snr", type=int, default=4)
    p.add_argument("--features", choices=FEATURE_KINDS, default="mfsc23")
    p.add_argument("--run", action="store_true", help="run the experiment after setup")
    p.set_defaults(func=cmd_toy)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    args.out_dir_given = args.out_dir is not None
    if args.out_dir is None:
        args.out_dir = "."
    if args.jobs < 1:
        parser.error("--jobs must be at least 1")
    try:
        return args.func(args)
    except (MtdsiError, ValueError, OSError) as exc:
        print(f"mtdsi: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
