"""Command-line front end.

Exit codes: 0 success, 1 runtime failure, 2 usage error, 3 validation
error. Failures print a single machine-readable JSON line on stderr:
{"error": "<category>", "message": "..."}.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import factory
from .config import RunConfig, default_config, parse_config, serialize_config
from .data import generate_synthetic_corpus, load_corpus
from .errors import TrainingDiverged, ValidationError
from .evaluation import EvalProfile, aggregate_reports, evaluate, named_profile, write_report
from .gradcheck import DEFAULT_TOLERANCE, run_all
from .imaging import liver_preprocess_pipeline, load_image, normalize, resize, save_image, to_rgb
from .perceptual import export_map_png, export_map_raw
from .training import load_checkpoint, train


def _load_config(args) -> RunConfig:
    cfg = parse_config(args.config) if args.config else default_config()
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    if getattr(args, "out", None) is not None:
        cfg.out = args.out
    return cfg


def _eval_profile(cfg: RunConfig, name: str | None) -> EvalProfile:
    if name and name != "custom":
        profile = named_profile(name, side=cfg.image.side)
    else:
        profile = EvalProfile(
            name="custom",
            perceptual=factory.metric_perceptual_config(cfg),
            side=cfg.image.side,
            norm_mean=cfg.image.norm_mean,
            norm_std=cfg.image.norm_std,
        )
    return profile


def cmd_preprocess_liver(args) -> int:
    in_dir, out_dir = Path(args.in_dir), Path(args.out_dir)
    if not in_dir.is_dir():
        raise FileNotFoundError(f"input directory not found: {in_dir}")
    out_dir.mkdir(parents=True, exist_ok=True)
    count = 0
    for path in sorted(in_dir.iterdir()):
        if path.suffix.lower() not in (".png", ".bmp", ".tif", ".tiff"):
            continue
        img = load_image(path)
        if img.channels != 1:
            raise ValidationError(f"{path.name}: expected a grayscale slice")
        processed = liver_preprocess_pipeline(
            img, args.side, args.spatial_sigma, args.range_sigma
        )
        save_image(processed, out_dir / path.name)
        count += 1
    print(f"processed {count} slices -> {out_dir}")
    return 0


def cmd_train(args) -> int:
    cfg = _load_config(args)
    corpus = load_corpus(args.data)
    tcfg = factory.train_config(cfg)
    out_root = Path(cfg.out)
    seeds = [cfg.seed] if args.single_seed else list(tcfg.seeds)
    for seed in seeds:
        detector = factory.build_detector(cfg, seed=seed)
        run_dir = out_root / f"seed{seed}"
        result = train(tcfg, corpus, detector, seed=seed, out_dir=run_dir,
                       config_echo=serialize_config(cfg))
        (run_dir / "config.txt").write_text(serialize_config(cfg))
        print(f"seed {seed}: final loss {result.final_loss:.6f} -> {result.checkpoint_path}")
    return 0


def _detector_for_checkpoint(cfg: RunConfig, checkpoint, seed: int):
    detector = factory.build_detector(cfg, seed=seed)
    load_checkpoint(checkpoint, detector.parts)
    return detector


def cmd_evaluate(args) -> int:
    cfg = _load_config(args)
    corpus = load_corpus(args.data)
    profile = _eval_profile(cfg, args.profile)
    reports = []
    for checkpoint in args.checkpoint:
        detector = _detector_for_checkpoint(cfg, checkpoint, cfg.seed)
        report = evaluate(
            detector, corpus, profile,
            export_dir=args.export_maps, batch_size=cfg.eval.batch_size,
        )
        reports.append(report)
        print(f"{checkpoint}: AUROC {report['auroc']:.4f} over {report['n_images']} images")
    final = reports[0] if len(reports) == 1 else aggregate_reports(reports)
    if len(reports) > 1:
        print(f"mean {final['mean']:.4f} +- {final['std']:.4f} (population std, {len(reports)} runs)")
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    write_report(final, out / "report.json")
    return 0


def cmd_score(args) -> int:
    cfg = _load_config(args)
    detector = _detector_for_checkpoint(cfg, args.checkpoint, cfg.seed)
    img = to_rgb(resize(load_image(args.image), cfg.image.side, cfg.image.side))
    img = normalize(img, cfg.image.norm_mean, cfg.image.norm_std)
    profile = _eval_profile(cfg, args.profile)
    result = detector.score_image(img, profile.perceptual, with_map=True)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    stem = Path(args.image).stem
    export_map_png(result.final_map, out / f"{stem}_map.png")
    export_map_raw(result.final_map, out / f"{stem}_map.f32")
    print(f"{result.score:.6f}")
    return 0


def cmd_export_maps(args) -> int:
    cfg = _load_config(args)
    corpus = load_corpus(args.data)
    profile = _eval_profile(cfg, args.profile)
    detector = _detector_for_checkpoint(cfg, args.checkpoint, cfg.seed)
    report = evaluate(detector, corpus, profile, export_dir=cfg.out, batch_size=cfg.eval.batch_size)
    print(f"exported {report['n_images']} maps -> {cfg.out} (AUROC {report['auroc']:.4f})")
    return 0


def cmd_gradcheck(args) -> int:
    errors = run_all(seed=args.seed if args.seed is not None else 0)
    worst = max(errors.values())
    for name, err in errors.items():
        print(f"{name}: max relative error {err:.3e}")
    print(f"max relative error {worst:.3e} (tolerance {DEFAULT_TOLERANCE:.0e})")
    return 0 if worst < DEFAULT_TOLERANCE else 1


def cmd_synthetic_bench(args) -> int:
    import torch

    torch.set_num_threads(1)  # sync overhead dominates these tiny tensors
    out = Path(args.out if args.out else "bench")
    out.mkdir(parents=True, exist_ok=True)
    cfg = factory.toy_run_config(side=args.side)
    corpus_dir = out / "corpus"
    if not (corpus_dir / "index.json").exists():
        generate_synthetic_corpus(corpus_dir, side=args.side, seed=0)
    corpus = load_corpus(corpus_dir)
    tcfg = factory.train_config(cfg)
    profile = _eval_profile(cfg, None)
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else list(tcfg.seeds)
    reports = []
    for seed in seeds:
        detector = factory.build_detector(cfg, seed=seed)
        result = train(tcfg, corpus, detector, seed=seed, out_dir=out / f"seed{seed}",
                       config_echo=serialize_config(cfg))
        report = evaluate(detector, corpus, profile, batch_size=cfg.eval.batch_size)
        reports.append(report)
        print(f"seed {seed}: final loss {result.final_loss:.4f}, AUROC {report['auroc']:.4f}")
    final = aggregate_reports(reports) if len(reports) > 1 else reports[0]
    write_report(final, out / "report.json")
    if len(reports) > 1:
        print(f"mean {final['mean']:.4f} +- {final['std']:.4f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="qbae", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", default=None, help="config file (dotted key = JSON value)")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", default=None, help="output directory")

    p = sub.add_parser("preprocess-liver", help="ROI-crop and filter CT slices")
    p.add_argument("--in", dest="in_dir", required=True)
    p.add_argument("--out", dest="out_dir", required=True)
    p.add_argument("--side", type=int, default=224)
    p.add_argument("--spatial-sigma", type=float, default=3.0)
    p.add_argument("--range-sigma", type=float, default=0.1)
    p.set_defaults(fn=cmd_preprocess_liver)

    p = sub.add_parser("train", help="train on a corpus of normal images")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--single-seed", action="store_true", help="train only the configured seed")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("evaluate", help="score a labeled test corpus")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", action="append", required=True)
    p.add_argument("--profile", default=None, choices=["brats", "resc", "rsna", "liver", "custom"])
    p.add_argument("--export-maps", default=None)
    p.set_defaults(fn=cmd_evaluate)

    p = sub.add_parser("score", help="score one image")
    common(p)
    p.add_argument("--image", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--profile", default=None, choices=["brats", "resc", "rsna", "liver", "custom"])
    p.set_defaults(fn=cmd_score)

    p = sub.add_parser("export-maps", help="export anomaly maps for a corpus")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--profile", default=None, choices=["brats", "resc", "rsna", "liver", "custom"])
    p.set_defaults(fn=cmd_export_maps)

    p = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(fn=cmd_gradcheck)

    p = sub.add_parser("synthetic-bench", help="desk-scale end-to-end benchmark")
    common(p)
    p.add_argument("--side", type=int, default=64)
    p.add_argument("--seeds", default=None, help="comma-separated seed list")
    p.set_defaults(fn=cmd_synthetic_bench)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except ValidationError as exc:
        print(json.dumps({"error": "validation", "message": str(exc)}), file=sys.stderr)
        return 3
    except TrainingDiverged as exc:
        print(json.dumps({"error": "diverged", "message": str(exc)}), file=sys.stderr)
        return 1
    except (OSError, RuntimeError, KeyError) as exc:
        print(json.dumps({"error": "runtime", "message": str(exc)}), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
