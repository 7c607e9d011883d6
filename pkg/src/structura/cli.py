"""Command-line interface: structura <command> [options]."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from structura import config as config_mod
from structura import harness, inference, model as model_mod, synth
from structura.annotation import CLASSES, parse_annotation, repair_no_function, to_timeline
from structura.features import FeatureConfig, load_wav, stft_log_mel, write_matrix
from structura.metrics import EvalFrameGrid, corpus_average, evaluate_pair
from structura.targets import FrameGrid, build_targets


def _write_json(payload: dict, path: str | None) -> None:
    text = json.dumps(payload, indent=2)
    if path:
        Path(path).write_text(text + "\n", encoding="utf-8")
    else:
        print(text)


def _load_timeline(path: str):
    text = Path(path).read_text(encoding="utf-8")
    return to_timeline(repair_no_function(parse_annotation(text)))


def cmd_convert(args) -> int:
    timeline = _load_timeline(args.annotation)
    _write_json(timeline.to_json_dict(), args.json)
    return 0


def cmd_targets(args) -> int:
    timeline = _load_timeline(args.annotation)
    grid = FrameGrid.for_duration(timeline.total_duration, hop=args.hop)
    targets = build_targets(timeline, grid)
    payload = {
        "hop": grid.hop,
        "n_frames": grid.n_frames,
        "boundary": targets.boundary_curve.tolist(),
        "functions": {
            label.value: targets.function_curves[i].tolist()
            for i, label in enumerate(CLASSES)
        },
    }
    _write_json(payload, args.json)
    return 0


def cmd_features(args) -> int:
    clip = load_wav(args.wav)
    spec = stft_log_mel(clip, FeatureConfig())
    write_matrix(args.npy_like, spec.values)
    if args.json:
        _write_json(
            {
                "n_frames": spec.n_frames,
                "n_bins": spec.n_bins,
                "frame_hop": spec.frame_hop,
                "output": str(args.npy_like),
            },
            args.json,
        )
    return 0


def cmd_synth(args) -> int:
    manifest_path = synth.make_dataset(args.out, args.songs, seed=args.seed)
    if args.json:
        _write_json({"manifest": str(manifest_path), "songs": args.songs}, args.json)
    else:
        print(manifest_path)
    return 0


def cmd_train(args) -> int:
    run = (
        config_mod.load_config(args.config)
        if args.config
        else harness.apply_seed_override(harness.RunConfig())
    )
    manifest = harness.load_manifest(args.manifest)
    songs = [harness.load_song(e) for e in manifest.entries]
    result = harness.run_training(songs, run, args.out)
    payload = {
        "checkpoint": str(result.checkpoint_path),
        "log": str(result.log_path),
        "best_val": result.best_val,
        "best_epoch": result.best_epoch,
        "epochs_run": result.epochs_run,
        "stopped": result.stopped,
    }
    _write_json(payload, args.json)
    return 0


def cmd_cv(args) -> int:
    run = (
        config_mod.load_config(args.config)
        if args.config
        else harness.apply_seed_override(harness.RunConfig())
    )
    manifests = [harness.load_manifest(p) for p in args.manifest]
    result = harness.run_cross_validation(manifests, run, args.out, n_folds=args.folds)
    payload = {
        "aggregate": result.aggregate,
        "folds": [
            {"songs": len(reports), "metrics": corpus_average(reports)}
            for reports in result.fold_reports
        ],
    }
    _write_json(payload, args.json)
    return 0


def cmd_infer(args) -> int:
    params, model_config = model_mod.load_checkpoint(args.checkpoint)
    clip = load_wav(args.wav)
    spec = stft_log_mel(clip, FeatureConfig(n_mels=model_config.n_mels))
    result = inference.analyze_song(
        spec.values, params, model_config, mode=args.mode, duration=clip.duration
    )
    payload = {
        "duration": clip.duration,
        "boundaries": result.boundaries,
        "segments": result.segments.to_json_dict()["segments"],
        "calls": result.calls,
    }
    _write_json(payload, args.json)
    if args.dump_curves:
        _write_json(
            {
                "hop": result.curves.grid.hop,
                "boundary": result.curves.boundary_probs.tolist(),
                "functions": result.curves.function_probs.T.tolist(),
            },
            args.dump_curves,
        )
    return 0


def cmd_evaluate(args) -> int:
    est_dir, ref_dir = Path(args.est), Path(args.ref)
    grid = EvalFrameGrid(hop=args.hop)
    rows = []
    reports = []
    for est_path in sorted(est_dir.glob("*.json")):
        ref_path = ref_dir / (est_path.stem + ".txt")
        if not ref_path.exists():
            print(f"skipping {est_path.name}: no matching reference", file=sys.stderr)
            continue
        est = inference.SegmentList.from_json_dict(
            json.loads(est_path.read_text(encoding="utf-8"))
        )
        ref = _load_timeline(ref_path)
        report = evaluate_pair(est, ref, grid)
        reports.append(report)
        rows.append({"song": est_path.stem, **report.as_dict()})
    if not reports:
        print("no (estimate, reference) pairs found", file=sys.stderr)
        return 1
    _write_json({"songs": rows, "means": corpus_average(reports)}, args.json)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="structura", description="Semantic music structure analysis toolkit"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("convert", help="annotation file -> labeled segment timeline")
    p.add_argument("annotation")
    p.add_argument("--json", default=None)
    p.set_defaults(func=cmd_convert)

    p = sub.add_parser("targets", help="annotation file -> activation target curves")
    p.add_argument("annotation")
    p.add_argument("--hop", type=float, default=0.192)
    p.add_argument("--json", default=None)
    p.set_defaults(func=cmd_targets)

    p = sub.add_parser("features", help="wav -> log-mel feature dump")
    p.add_argument("wav")
    p.add_argument("--npy-like", required=True, dest="npy_like")
    p.add_argument("--json", default=None)
    p.set_defaults(func=cmd_features)

    p = sub.add_parser("synth", help="generate a synthetic dataset + manifest")
    p.add_argument("--out", required=True)
    p.add_argument("--songs", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--json", default=None)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train on a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--json", default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("cv", help="cross-validation (k-fold or leave-one-dataset-out)")
    p.add_argument("--manifest", action="append", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--folds", type=int, default=4)
    p.add_argument("--config", default=None)
    p.add_argument("--json", default=None)
    p.set_defaults(func=cmd_cv)

    p = sub.add_parser("infer", help="wav + checkpoint -> labeled segments")
    p.add_argument("wav")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--json", default=None)
    p.add_argument("--mode", choices=["multipoint", "instant"], default="multipoint")
    p.add_argument("--dump-curves", default=None, dest="dump_curves")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("evaluate", help="score estimate JSONs against references")
    p.add_argument("--est", required=True)
    p.add_argument("--ref", required=True)
    p.add_argument("--hop", type=float, default=0.1)
    p.add_argument("--json", default=None)
    p.set_defaults(func=cmd_evaluate)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    raise SystemExit(main())
