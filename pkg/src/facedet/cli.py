"""Command line entry point: ``facedet {train,evaluate,detect,sample-stats,plot-pr}``.

Every subcommand reads one config file (``--config``, defaults when absent)
plus dotted ``--set section.key=value`` overrides. Machine-readable JSON goes
to stdout or ``--out``; logs go to stderr. Exit codes: 0 success, 1 user
error (bad config, missing file, checkpoint mismatch), 2 internal error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from facedet.checkpoint import CheckpointMismatchError, latest_checkpoint
from facedet.config import ConfigError, DetectorConfig
from facedet.dataio import (AnnotationParseError, WiderDataset, corpus_from_dataset,
                            default_stats_corpus, load_image, load_subsets, size_subsets)

log = logging.getLogger("facedet")

EXIT_OK, EXIT_USER, EXIT_INTERNAL = 0, 1, 2


class UserError(Exception):
    """Operator mistake; reported without a traceback, exit code 1."""


def _config(args) -> DetectorConfig:
    overrides = list(args.set or [])
    if getattr(args, "deterministic", False):
        overrides.append("deterministic=true")
    if args.config:
        return DetectorConfig.load(args.config, overrides)
    return DetectorConfig().with_overrides(overrides)


def _dataset(cfg: DetectorConfig, annotations: str | None = None) -> WiderDataset:
    return WiderDataset(cfg.io.data_root, annotations or cfg.io.annotation_file)


def _emit(payload, out: str | None) -> None:
    text = json.dumps(payload, indent=1, sort_keys=True)
    if out:
        Path(out).write_text(text + "\n")
    else:
        print(text)


# subcommands -------------------------------------------------------------------

def cmd_train(args) -> int:
    from facedet.training import Trainer

    cfg = _config(args)
    out_dir = Path(args.out or cfg.io.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    trainer = Trainer(cfg, _dataset(cfg), out_dir)
    if args.resume:
        ckpt = latest_checkpoint(out_dir)
        if ckpt is None:
            raise UserError(f"--resume given but no checkpoint in {out_dir}")
        trainer.restore(ckpt)
        log.info("resumed from %s at iteration %d", ckpt, trainer.iteration)
    cfg.save(out_dir / "config.ini")
    history = trainer.train(args.iterations, out_dir / "train_log.jsonl")
    final = trainer.save(out_dir / f"ckpt_{trainer.iteration:07d}.npz")
    _emit({
        "checkpoint": str(final),
        "iteration": trainer.iteration,
        "initial_loss": history[0]["total"] if history else None,
        "final_loss": history[-1]["total"] if history else None,
        "config_hash": cfg.content_hash(),
    }, None)
    return EXIT_OK


def _resolve_checkpoint(path: str) -> Path:
    p = Path(path)
    if p.is_dir():
        found = latest_checkpoint(p)
        if found is None:
            raise UserError(f"no checkpoint in {p}")
        return found
    if not p.exists():
        raise UserError(f"checkpoint {p} does not exist")
    return p


def _subsets(cfg: DetectorConfig, dataset: WiderDataset, subset_file: str | None) -> dict:
    name = subset_file or cfg.io.subset_file
    if name:
        path = Path(name)
        if not path.is_absolute() and not path.exists():
            path = dataset.root / path
        return load_subsets(path)
    default = dataset.root / "subsets.json"
    if default.exists():
        return load_subsets(default)
    # no official split available: fall back to face-size subsets
    return size_subsets(dataset.records)


def cmd_evaluate(args) -> int:
    from facedet.evaluation import emit_pr_plot, evaluate_subsets, metrics_json, write_detection_file
    from facedet.network import detect
    from facedet.training import load_model

    cfg = _config(args)
    model = load_model(cfg, _resolve_checkpoint(args.checkpoint))
    dataset = _dataset(cfg, args.annotations)
    out_dir = Path(args.out or cfg.io.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    detections = {}
    for i in range(len(dataset)):
        sample = dataset[i]
        found = detect(model, sample.image, cfg)
        boxes = np.array([tuple(b) for b, _ in found], dtype=np.float64).reshape(-1, 4)
        detections[sample.name] = (boxes, np.array([s for _, s in found], dtype=np.float64))
    write_detection_file(out_dir / "detections.txt", detections)
    curves = evaluate_subsets(detections, dataset.records, _subsets(cfg, dataset, args.subsets),
                              cfg.eval.iou_threshold, cfg.eval.num_thresholds)
    metrics = metrics_json(curves)
    (out_dir / "metrics.json").write_text(json.dumps(metrics, indent=1))
    if args.plot:
        emit_pr_plot(curves, out_dir / "pr.svg", args.method)
    _emit({k: metrics[k] for k in curves}, None)
    return EXIT_OK


def cmd_detect(args) -> int:
    from facedet.network import detect
    from facedet.training import load_model

    cfg = _config(args)
    if args.min_score is not None:
        cfg = cfg.with_overrides([f"eval.score_threshold={args.min_score}"])
    try:
        image = load_image(args.image)
    except (OSError, ValueError) as exc:
        raise UserError(f"cannot read image {args.image}: {exc}") from None
    model = load_model(cfg, _resolve_checkpoint(args.checkpoint))
    found = detect(model, image, cfg)
    _emit([{"box": [round(v, 3) for v in b], "score": s} for b, s in found], args.out)
    return EXIT_OK


def cmd_sample_stats(args) -> int:
    from facedet.sampling import format_statistics, sampler_statistics

    cfg = _config(args)
    if args.dataset:
        corpus = corpus_from_dataset(_dataset(cfg))
    else:
        corpus = default_stats_corpus(args.seed)
    names = tuple(n.strip() for n in args.strategies.split(",") if n.strip())
    unknown = set(names) - {"bdas", "das", "ssd", "mixture"}
    if not names or unknown:
        raise UserError(f"unknown strategies {sorted(unknown)}; choose from bdas, das, ssd, mixture")
    report = sampler_statistics(corpus, cfg.sampler, args.n, args.seed, (args.band_lo, args.band_hi), names)
    _emit(report, args.out)
    print(format_statistics(report), file=sys.stderr if not args.out else sys.stdout)
    return EXIT_OK


def cmd_plot_pr(args) -> int:
    from facedet.evaluation import PRCurve, emit_pr_plot

    try:
        metrics = json.loads(Path(args.metrics).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise UserError(f"cannot read metrics {args.metrics}: {exc}") from None
    curves = {}
    for name, c in metrics.get("curves", {}).items():
        curves[name] = PRCurve(np.asarray(c["thresholds"]), np.asarray(c["precision"]),
                               np.asarray(c["recall"]), float(c["ap"]))
    if not curves:
        raise UserError(f"{args.metrics} holds no curves")
    emit_pr_plot(curves, args.out, args.method)
    return EXIT_OK


# parser ------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="facedet", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="config file (defaults apply when omitted)")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="dotted override, e.g. optim.lr_peak=0.01 (repeatable)")
        p.add_argument("--deterministic", action="store_true", help="force bit-replay mode")
        return p

    p = common(sub.add_parser("train", help="train a detector"))
    p.add_argument("--out", help="run directory (checkpoints, log, config)")
    p.add_argument("--iterations", type=int, help="stop after this many iterations")
    p.add_argument("--resume", action="store_true", help="continue from the latest checkpoint in --out")
    p.set_defaults(func=cmd_train)

    p = common(sub.add_parser("evaluate", help="detect over an annotation set and score it"))
    p.add_argument("--checkpoint", required=True, help="checkpoint file or run directory")
    p.add_argument("--annotations", help="annotation file (relative to the data root)")
    p.add_argument("--subsets", help="subset membership JSON")
    p.add_argument("--out", help="output directory")
    p.add_argument("--plot", action="store_true", help="also write pr.svg")
    p.add_argument("--method", default="ours", help="legend label")
    p.set_defaults(func=cmd_evaluate)

    p = common(sub.add_parser("detect", help="detect faces in one image"))
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--min-score", type=float, help="score threshold override")
    p.add_argument("--out", help="write JSON here instead of stdout")
    p.set_defaults(func=cmd_detect)

    p = common(sub.add_parser("sample-stats", help="face-size histograms per sampling strategy"))
    p.add_argument("-n", type=int, default=100000, help="draws per strategy")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--band-lo", type=float, default=32.0)
    p.add_argument("--band-hi", type=float, default=128.0)
    p.add_argument("--strategies", default="bdas,das,ssd,mixture", help="comma-separated subset to report")
    p.add_argument("--dataset", action="store_true",
                   help="use the configured dataset instead of the synthetic corpus")
    p.add_argument("--out", help="write the JSON report here")
    p.set_defaults(func=cmd_sample_stats)

    p = sub.add_parser("plot-pr", help="render PR curves from a metrics JSON")
    p.add_argument("--metrics", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--method", default="ours")
    p.set_defaults(func=cmd_plot_pr)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except (UserError, ConfigError, CheckpointMismatchError, AnnotationParseError,
            FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USER
    except Exception as exc:  # noqa: BLE001 - last-resort reporting
        log.exception("internal error")
        print(f"internal error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
