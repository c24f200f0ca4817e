"""Command-line surface: synth, pretrain, distill, infer, evaluate, selftest.

Every run that produces artifacts writes a manifest.json (command, resolved
config, seed, toolkit version) to the output directory before any work
begins. Config files are flat `key = value` text (TOML-compatible scalars);
command-line flags override file values.

Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from datetime import datetime, timezone
from pathlib import Path

import torch

from . import __version__
from .data import (load_raster, load_raster_pair, load_scene_set,
                   make_scene_set, save_scene_set)
from .distill import DistillConfig, distill, save_student_checkpoint, write_distill_log
from .errors import ChangekitError, TrainingDiverged
from .changemap import make_change_product, save_product
from .metrics import confusion, scores, scores_table, write_scores_csv
from .model import ModelConfig, load_checkpoint, save_teacher_checkpoint
from .pretrain import PretrainConfig, pretrain, write_training_log
from .quantizer import QuantizerConfig, dump_usage_csv


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # exit 1 instead of argparse's default 2
        raise _UsageError(message)


def _utc_now() -> str:
    return datetime.now(timezone.utc).replace(microsecond=0).isoformat()


def write_manifest(outdir: Path, command: str, config: dict, seed,
                   config_path=None) -> None:
    outdir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "command": command,
        "config_path": str(config_path) if config_path else None,
        "config": config,
        "seed": seed,
        "version": __version__,
        "output_dir": str(outdir),
        "created_utc": _utc_now(),
    }
    (outdir / "manifest.json").write_text(json.dumps(manifest, indent=2))


def parse_config_file(path) -> dict[str, str]:
    """Flat `key = value` lines; # starts a comment; quotes optional."""
    values: dict[str, str] = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ChangekitError(f"{path}:{lineno}: expected key = value")
        key, _, val = line.partition("=")
        values[key.strip()] = val.strip().strip("\"'")
    return values


def _coerce(value: str, target_type):
    if target_type is bool:
        low = value.lower()
        if low in ("true", "1", "yes", "on"):
            return True
        if low in ("false", "0", "no", "off"):
            return False
        raise ChangekitError(f"cannot parse boolean from {value!r}")
    return target_type(value)


def _resolve_config(cls_default, file_values: dict[str, str], flag_values: dict):
    """defaults < config file < explicit flags, per dataclass field."""
    cfg = cls_default
    fields = {f.name: f for f in dataclasses.fields(cfg)}
    for key, raw in file_values.items():
        if key not in fields:
            continue
        current = getattr(cfg, key)
        ftype = type(current) if current is not None else float
        setattr(cfg, key, _coerce(raw, ftype))
    for key, val in flag_values.items():
        if key in fields and val is not None:
            setattr(cfg, key, val)
    return cfg


def _add_pretrain_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--step-gamma", dest="step_gamma", type=float)
    p.add_argument("--step-every", dest="step_every", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--crop-size", dest="crop_size", type=int)
    p.add_argument("--max-offset", dest="max_offset", type=int)
    p.add_argument("--pairs-per-scene", dest="pairs_per_scene", type=int)
    p.add_argument("--anchors-per-image", dest="anchors_per_image", type=int)
    p.add_argument("--negatives-cap", dest="negatives_cap", type=int)
    p.add_argument("--contrast-temperature", dest="contrast_temperature", type=float)
    p.add_argument("--codebook-weight", dest="codebook_weight", type=float)
    p.add_argument("--tau-start", dest="tau_start", type=float)
    p.add_argument("--tau-end", dest="tau_end", type=float)
    p.add_argument("--tau-mode", dest="tau_mode", choices=("linear", "fixed"))
    p.add_argument("--superpixel-scale", dest="superpixel_scale", type=float)
    p.add_argument("--superpixel-sigma", dest="superpixel_sigma", type=float)
    p.add_argument("--superpixel-min-size", dest="superpixel_min_size", type=int)
    p.add_argument("--no-flip", dest="flip", action="store_false", default=None)
    p.add_argument("--contrast-unquantized", dest="contrast_unquantized",
                   action="store_true", default=None)


def build_parser() -> _Parser:
    parser = _Parser(prog="changekit",
                     description="Self-supervised pixel-wise change detection toolkit")
    parser.add_argument("--version", action="version", version=f"changekit {__version__}")
    sub = parser.add_subparsers(dest="command")

    p = sub.add_parser("synth", help="generate synthetic multi-temporal scenes")
    p.add_argument("--out", required=True)
    p.add_argument("--scenes", type=int, default=8)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--bands", type=int, default=4)
    p.add_argument("--timestamps", type=int, default=6)
    p.add_argument("--change-fraction", dest="change_fraction", type=float, default=0.1)
    p.add_argument("--season-fraction", dest="season_fraction", type=float, default=0.2)
    p.add_argument("--season-amplitude", dest="season_amplitude", type=float, default=0.25)
    p.add_argument("--noise-sigma", dest="noise_sigma", type=float, default=0.02)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("pretrain", help="self-supervised teacher training")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--feature-dim", dest="feature_dim", type=int, default=32)
    p.add_argument("--codebook-entries", dest="codebook_entries", type=int, default=1024)
    p.add_argument("--quantize-branches", dest="quantize_branches",
                   choices=("both", "first-only"), default="both")
    _add_pretrain_flags(p)

    p = sub.add_parser("distill", help="uncertainty-aware student training")
    p.add_argument("--teacher", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--lr", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--lam", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--step-gamma", dest="step_gamma", type=float)
    p.add_argument("--step-every", dest="step_every", type=int)
    p.add_argument("--no-init-from-teacher", dest="init_from_teacher",
                   action="store_false", default=None)

    p = sub.add_parser("infer", help="bi-temporal change map inference")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--pre", required=True)
    p.add_argument("--post", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--method", choices=("rosin", "otsu", "fixed"), default="rosin")
    p.add_argument("--threshold", type=float)
    p.add_argument("--bins", type=int, default=256)
    p.add_argument("--feature-source", dest="feature_source",
                   choices=("backbone", "quantized"), default="backbone")
    p.add_argument("--gate-uncertainty", dest="gate_uncertainty",
                   choices=("auto", "on", "off"), default="auto")

    p = sub.add_parser("evaluate", help="score a binary map against ground truth")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--mask")
    p.add_argument("--name", default="result")
    p.add_argument("--out")

    p = sub.add_parser("selftest", help="run the built-in oracle suites")
    p.add_argument("--out")

    return parser


def _cmd_synth(args) -> int:
    out = Path(args.out)
    cfg = {k: getattr(args, k) for k in
           ("scenes", "size", "bands", "timestamps", "change_fraction",
            "season_fraction", "season_amplitude", "noise_sigma", "seed")}
    write_manifest(out, "synth", cfg, args.seed)
    scenes = make_scene_set(args.scenes, base_seed=args.seed, size=args.size,
                            bands=args.bands, n_timestamps=args.timestamps,
                            change_fraction=args.change_fraction,
                            season_fraction=args.season_fraction,
                            season_amplitude=args.season_amplitude,
                            noise_sigma=args.noise_sigma)
    save_scene_set(scenes, out)
    print(f"wrote {len(scenes)} scenes to {out}")
    return 0


def _flag_dict(args, names) -> dict:
    return {n: getattr(args, n) for n in names if hasattr(args, n)}


def _cmd_pretrain(args) -> int:
    file_values = parse_config_file(args.config) if args.config else {}
    cfg = _resolve_config(
        PretrainConfig.desk_scale(), file_values,
        _flag_dict(args, [f.name for f in dataclasses.fields(PretrainConfig)]))
    out = Path(args.out)
    write_manifest(out, "pretrain", dataclasses.asdict(cfg), cfg.seed,
                   config_path=args.config)

    scenes = load_scene_set(args.data)
    model_cfg = ModelConfig(in_bands=scenes[0].bands, feature_dim=args.feature_dim,
                            seed=cfg.seed)
    quantizer_cfg = QuantizerConfig(feature_dim=args.feature_dim,
                                    num_entries=args.codebook_entries,
                                    quantize_branches=args.quantize_branches,
                                    tau=cfg.tau_start, seed=cfg.seed)

    def report(row):
        print(f"epoch {row.epoch:4d}  contrastive {row.contrastive:.4f}  "
              f"codebook {row.codebook:+.6f}  perplexity {row.perplexity:7.1f}  "
              f"lr {row.lr:.2e}")

    bundle, logs = pretrain(scenes, cfg, model_cfg=model_cfg,
                            quantizer_cfg=quantizer_cfg, progress=report)
    save_teacher_checkpoint(out / "teacher.pt", bundle.model, bundle.quantizer)
    write_training_log(out / "training_log.csv", logs)
    with torch.no_grad():
        sample = torch.from_numpy(scenes[0].pre[None]).float()
        usage = bundle.quantizer(bundle.model(sample), training=False).usage
    dump_usage_csv(usage, out / "codebook_usage.csv")
    print(f"teacher checkpoint: {out / 'teacher.pt'}")
    return 0


def _cmd_distill(args) -> int:
    file_values = parse_config_file(args.config) if args.config else {}
    cfg = _resolve_config(
        DistillConfig.desk_scale(), file_values,
        _flag_dict(args, [f.name for f in dataclasses.fields(DistillConfig)]))
    out = Path(args.out)
    write_manifest(out, "distill", dataclasses.asdict(cfg), cfg.seed,
                   config_path=args.config)

    teacher = load_checkpoint(args.teacher)
    scenes = load_scene_set(args.data)

    def report(row):
        print(f"epoch {row.epoch:4d}  uncertainty {row.uncertainty:+.4f}  "
              f"same-time {row.same_time:.4f}  mean-s {row.mean_logvar:+.3f}  "
              f"lr {row.lr:.2e}")

    student, logs = distill(teacher, scenes, cfg, progress=report)
    save_student_checkpoint(out / "student.pt", student.student)
    write_distill_log(out / "distill_log.csv", logs)
    print(f"student checkpoint: {out / 'student.pt'}")
    return 0


def _cmd_infer(args) -> int:
    out = Path(args.out)
    cfg = {"ckpt": args.ckpt, "pre": args.pre, "post": args.post,
           "method": args.method, "threshold": args.threshold, "bins": args.bins,
           "feature_source": args.feature_source,
           "gate_uncertainty": args.gate_uncertainty}
    write_manifest(out, "infer", cfg, None)
    image_m, image_n = load_raster_pair(args.pre, args.post)
    gate = {"auto": None, "on": True, "off": False}[args.gate_uncertainty]
    product = make_change_product(args.ckpt, image_m, image_n, method=args.method,
                                  fixed_threshold=args.threshold,
                                  gate_uncertainty=gate,
                                  feature_source=args.feature_source,
                                  bins=args.bins)
    save_product(product, out)
    print(f"threshold ({product.method}): {product.threshold:.6g}")
    print(f"changed fraction: {product.binary.mean():.4f}")
    print(f"products in {out}")
    return 0


def _cmd_evaluate(args) -> int:
    pred = load_raster(args.pred)[0].astype(bool)
    gt = load_raster(args.gt)[0].astype(bool)
    mask = load_raster(args.mask)[0].astype(bool) if args.mask else None
    result = scores(confusion(pred, gt, mask))
    rows = {args.name: result}
    print(scores_table(rows))
    if args.out:
        out = Path(args.out)
        write_manifest(out, "evaluate",
                       {"pred": args.pred, "gt": args.gt, "mask": args.mask}, None)
        write_scores_csv(out / "scores.csv", rows)
        (out / "scores.json").write_text(json.dumps(result, indent=2))
    return 0


def _cmd_selftest(args) -> int:
    from .selfcheck import run_selftest

    passed, results = run_selftest(verbose=True)
    if args.out:
        out = Path(args.out)
        write_manifest(out, "selftest", {}, None)
        report = [{"name": r.name, "passed": r.passed, "detail": r.detail}
                  for r in results]
        (out / "selftest.json").write_text(json.dumps(report, indent=2))
    print("selftest:", "PASS" if passed else "FAIL")
    return 0 if passed else 2


_DISPATCH = {
    "synth": _cmd_synth,
    "pretrain": _cmd_pretrain,
    "distill": _cmd_distill,
    "infer": _cmd_infer,
    "evaluate": _cmd_evaluate,
    "selftest": _cmd_selftest,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return 1
    if args.command is None:
        parser.print_help(sys.stderr)
        return 1
    try:
        return _DISPATCH[args.command](args)
    except (ChangekitError, TrainingDiverged) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"error: file not found: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
