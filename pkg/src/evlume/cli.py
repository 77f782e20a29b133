"""Command-line interface: train, evaluate, ablate, enhance, make-data, match-align.

Exits 0 on success; on failure prints a machine-readable JSON error object to
stderr and exits nonzero. Config files are plain JSON documents (see README).
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

from . import alignment, harness, synth


def _cmd_train(args) -> None:
    cfg = harness.TrainConfig.from_json(args.config)
    result = harness.train(cfg, resume=args.resume)
    print(json.dumps({
        "final_checkpoint": str(result.final_checkpoint),
        "checkpoints": [str(p) for p in result.checkpoints],
        "steps": len(result.curve),
        "out_dir": str(result.out_dir),
    }, indent=2))


def _cmd_evaluate(args) -> None:
    summary = harness.evaluate(args.ckpt, args.manifest, args.split, args.out)
    print(json.dumps(summary["overall"], indent=2, sort_keys=True))


def _cmd_ablate(args) -> None:
    cfg = harness.TrainConfig.from_json(args.config)
    variants = [v.strip() for v in args.variants.split(",") if v.strip()]
    rows = harness.ablate(cfg, variants, args.out or cfg.out_dir)
    print(json.dumps(rows, indent=2, sort_keys=True))


def _cmd_enhance(args) -> None:
    written = harness.enhance(args.ckpt, args.input, args.out,
                              dump_aux=args.dump_aux)
    print(json.dumps({"frames_written": len(written), "out_dir": args.out},
                     indent=2))


def _parse_scenes(scenes) -> list:
    if isinstance(scenes, list):
        return [synth.SceneConfig.from_dict(d) for d in scenes]
    if isinstance(scenes, dict) and "count" in scenes:
        base = synth.SceneConfig.from_dict(scenes.get("base", {}))
        return [dataclasses.replace(base, seed=base.seed + i)
                for i in range(int(scenes["count"]))]
    raise ValueError("'scenes' must be a list of scene configs or "
                     "{'count': N, 'base': {...}}")


def _cmd_make_data(args) -> None:
    with open(args.config, "r", encoding="utf-8") as fh:
        payload = json.load(fh)
    manifest = synth.make_dataset(
        _parse_scenes(payload["scenes"]),
        synth.DegradeConfig.from_dict(payload.get("degrade", {})),
        payload["out_dir"],
        event_threshold=payload.get("event_threshold", 0.2),
        noise_rate=payload.get("noise_rate", 0.0),
        events_from=payload.get("events_from", "low"),
        test_fraction=payload.get("test_fraction", 0.2),
    )
    print(json.dumps({
        "manifest": str(Path(manifest.root) / "manifest.json"),
        "samples": len(manifest.samples),
        "train": len(manifest.split("train")),
        "test": len(manifest.split("test")),
    }, indent=2))


def _cmd_match_align(args) -> None:
    low, normal = alignment.read_intervals_csv(args.csv)
    matching = alignment.match_sequences(low, normal)
    if args.out:
        alignment.write_matching_json(matching, args.out,
                                      thresholds_ms=(args.threshold_ms,))
    payload = alignment.matching_to_dict(matching)
    stats = alignment.alignment_error_stats(matching)
    payload["stats"] = {
        "max_ms": stats.max_ms,
        "mean_ms": stats.mean_ms,
        "fraction_below": {str(args.threshold_ms):
                           stats.fraction_below(args.threshold_ms)},
    }
    print(json.dumps(payload, indent=2, sort_keys=True))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="evlume",
        description="Event-guided low-light video enhancement toolkit.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model from a JSON config")
    p.add_argument("--config", required=True)
    p.add_argument("--resume", default=None, help="checkpoint to resume from")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("evaluate", help="run metrics over a manifest split")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--out", default=None)
    p.set_defaults(func=_cmd_evaluate)

    p = sub.add_parser("ablate", help="train/evaluate the model plus variants")
    p.add_argument("--config", required=True)
    p.add_argument("--variants", required=True,
                   help="comma-separated, e.g. no_gru,ones_mask")
    p.add_argument("--out", default=None)
    p.set_defaults(func=_cmd_ablate)

    p = sub.add_parser("enhance", help="enhance a directory of frames")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--dump-aux", action="store_true",
                   help="also write SNR-map and light-up images")
    p.set_defaults(func=_cmd_enhance)

    p = sub.add_parser("make-data", help="generate a synthetic paired dataset")
    p.add_argument("--config", required=True)
    p.set_defaults(func=_cmd_make_data)

    p = sub.add_parser("match-align", help="pair captures by interval matching")
    p.add_argument("--csv", required=True)
    p.add_argument("--out", default=None)
    p.add_argument("--threshold-ms", type=float, default=10.0)
    p.set_defaults(func=_cmd_match_align)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except Exception as exc:  # surface every failure as machine-readable JSON
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}),
              file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
