# cli.py
"""
Command-line entry points: gensynth, train, eval, curve, export-emb, ablate, gap.

Exit codes: 0 success, 1 validation error, 2 runtime failure.
"""
import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional

import pandas as pd
from pydantic import ValidationError

from builders import build_synthetic_dataset, manifest_summary
from config import AugmentConfig, RunConfig, load_run_config, resolve_out, save_run_config
from datakit import DatasetManifest, Split, load_charset, load_manifest
from errors import AdaptError, ConfigError
from evalkit import (GapReductionInput, compare_writers, evaluate, export_embeddings,
                     gap_reduction, save_report)
from ml_utils import load_checkpoint
from synthgen import Domain, load_corpus, load_fonts
from trainer import TrainResult, train_loop

logger = logging.getLogger("synth2real-htr")

AUGMENT_PRESETS = {"identity": AugmentConfig.identity, "light": AugmentConfig.light, "heavy": AugmentConfig.heavy}


# -----------------------
# Helpers
# -----------------------
def _config(args, overrides: Optional[Dict[str, Any]] = None) -> RunConfig:
    cfg = load_run_config(getattr(args, "config", None))
    base = {"seed": getattr(args, "seed", None), "paths.out_dir": getattr(args, "out", None)}
    base.update(overrides or {})
    return cfg.with_overrides(base)


def _augment(spec: Optional[str]) -> Optional[AugmentConfig]:
    """Preset name or path to a JSON AugmentConfig."""
    if spec is None:
        return None
    if spec in AUGMENT_PRESETS:
        return AUGMENT_PRESETS[spec]()
    p = Path(spec)
    if not p.exists():
        raise ConfigError(f"augment config '{spec}' is neither a preset {sorted(AUGMENT_PRESETS)} nor a file")
    try:
        return AugmentConfig.model_validate(json.loads(p.read_text(encoding="utf-8")))
    except (json.JSONDecodeError, ValidationError) as e:
        raise ConfigError(f"invalid augment config {spec}: {e}") from e


def _split(value: Optional[str]) -> Optional[Split]:
    return None if value in (None, "all") else Split(value)


def _test_split(manifest: DatasetManifest) -> Optional[Split]:
    return Split.TEST if len(manifest.select(Split.TEST)) else None


def _score(result: TrainResult, cfg: RunConfig) -> Dict[str, Optional[float]]:
    """Test-set CER/WER of the best (else last) checkpoint; validation numbers without a test manifest."""
    ckpt = result.best_checkpoint or result.last_checkpoint
    if cfg.paths.test_manifest:
        manifest = load_manifest(cfg.paths.test_manifest)
        report = evaluate(ckpt, manifest, _test_split(manifest))
        return {"cer": report.cer, "wer": report.wer}
    scored = [v for v in result.validations if v.get("cer") is not None]
    best = min(scored, key=lambda v: v["cer"]) if scored else {}
    return {"cer": best.get("cer"), "wer": best.get("wer")}


def _write_table(frame: pd.DataFrame, out_dir: Path, stem: str) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    frame.to_csv(out_dir / f"{stem}.csv", index=False)
    (out_dir / f"{stem}.txt").write_text(
        frame.to_string(index=False, float_format=lambda v: f"{v:.2f}") + "\n", encoding="utf-8")


# -----------------------
# Commands
# -----------------------
def cmd_gensynth(args) -> int:
    if args.n < 1:
        raise ValueError(f"--n must be >= 1, got {args.n}")
    cfg = _config(args, {"synth.n_jobs": args.n_jobs})
    charset = load_charset(args.charset) if args.charset else None
    corpus = load_corpus(args.corpus, charset)
    fonts = load_fonts(args.fonts)
    augment_cfg = _augment(args.augment_config) or cfg.augment
    out = resolve_out(args.out)
    ds = build_synthetic_dataset(str(out), corpus, fonts, augment_cfg, args.n, cfg.seed, cfg,
                                 Domain(args.domain), Split(args.split), args.writer_id,
                                 cfg.synth.n_jobs, charset)
    logger.info("Manifest %s\n%s", ds.manifest_path,
                manifest_summary(load_manifest(ds.manifest_path, check_paths=False)).to_string(index=False))
    return 0


def _train_overrides(args) -> Dict[str, Any]:
    return {
        "train.mode": args.mode,
        "paths.source_manifest": args.source_manifest,
        "paths.target_manifest": args.target_manifest,
        "paths.val_manifest": args.val_manifest,
        "paths.test_manifest": getattr(args, "test_manifest", None),
        "paths.charset": args.charset,
        "adversary.pooling": getattr(args, "pooling", None),
        "train.lambda_schedule": getattr(args, "lambda_schedule", None),
        "train.lambda_horizon": args.lambda_horizon,
        "train.epochs": args.epochs,
        "train.max_steps": args.max_steps,
        "data.batch_size": args.batch_size,
        "train.learning_rate": args.lr,
        "train.init_checkpoint": args.init_checkpoint,
        "train.resume_from": getattr(args, "resume_from", None),
        "train.target_writer": args.target_writer,
        "train.source_limit": args.source_limit,
        "train.target_limit": getattr(args, "target_limit", None),
        "train.checkpoint_every_steps": getattr(args, "checkpoint_every", None),
        "train.log_every_steps": getattr(args, "log_every", None),
        "train.device": args.device,
    }


def cmd_train(args) -> int:
    cfg = _config(args, _train_overrides(args))
    cfg.check_mode_requirements()
    result = train_loop(cfg)
    logger.info("Finished at step %d; best %s; last %s", result.final_step, result.best_checkpoint,
                result.last_checkpoint)
    return 0


def cmd_eval(args) -> int:
    out = resolve_out(args.out)
    manifest = load_manifest(args.manifest)
    split = _split(args.split)
    ckpt = load_checkpoint(args.checkpoint)
    eval_cfg = ckpt.config.eval.model_copy(update={
        "case_sensitive": not args.case_insensitive and ckpt.config.eval.case_sensitive,
        "strip_punctuation": args.strip_punctuation or ckpt.config.eval.strip_punctuation,
    })
    report = evaluate(ckpt, manifest, split, eval_cfg)
    if not args.per_writer:
        report.per_writer = None
    save_report(report, str(out), "report")
    save_run_config(ckpt.config, str(out / "run_config.json"))
    print(report.to_text())

    if args.compare:
        adapted = evaluate(args.compare, manifest, split, eval_cfg)
        save_report(adapted, str(out), "report_adapted")
        if report.per_writer is None:
            report = evaluate(ckpt, manifest, split, eval_cfg)
        table = compare_writers(report, adapted)
        _write_table(table, out, "writers")
        print(table.to_string(index=False, float_format=lambda v: f"{v:.2f}"))
    return 0


def cmd_curve(args) -> int:
    base = _config(args, _train_overrides(args))
    base = base.with_overrides({"train.mode": args.mode or "unsup_adapt"})
    base.check_mode_requirements()
    out = resolve_out(base.paths.out_dir)
    seeds = args.seeds or [base.seed]
    rows = []
    for size in sorted(set(args.sizes)):
        for seed in seeds:
            cfg = base.with_overrides({"seed": seed, "train.target_limit": size,
                                       "paths.out_dir": str(Path(base.paths.out_dir) / f"size{size}_seed{seed}")})
            logger.info("Curve point: %d target images, seed %d", size, seed)
            rows.append({"size": size, "seed": seed, **_score(train_loop(cfg), cfg)})
    frame = pd.DataFrame(rows).sort_values(["size", "seed"], kind="mergesort").reset_index(drop=True)
    _write_table(frame, out, "curve")
    summary = frame.groupby("size")[["cer", "wer"]].median().reset_index()
    _write_table(summary, out, "curve_median")
    print(summary.to_string(index=False, float_format=lambda v: f"{v:.2f}"))
    return 0


ABLATIONS = {
    "pooling": ("adversary.pooling", ["cmv", "spp", "tpp", "gru"]),
    "lambda": ("train.lambda_schedule", ["constant", "linear", "exponential"]),
}


def cmd_ablate(args) -> int:
    key, default_values = ABLATIONS[args.vary]
    base = _config(args, _train_overrides(args))
    base = base.with_overrides({"train.mode": args.mode or "unsup_adapt"})
    base.check_mode_requirements()
    out = resolve_out(base.paths.out_dir)
    rows = []
    for value in args.values or default_values:
        cfg = base.with_overrides({key: value, "paths.out_dir": str(Path(base.paths.out_dir) / f"{args.vary}_{value}")})
        logger.info("Ablation %s=%s", args.vary, value)
        result = train_loop(cfg)
        finite = all(b.L_r == b.L_r and (b.L_d is None or b.L_d == b.L_d) for b in result.history)
        rows.append({args.vary: value, **_score(result, cfg), "steps": result.final_step,
                     "finite_losses": finite})
    frame = pd.DataFrame(rows)
    _write_table(frame, out, f"ablation_{args.vary}")
    print(frame.to_string(index=False, float_format=lambda v: f"{v:.2f}"))
    return 0


def cmd_export_emb(args) -> int:
    path = export_embeddings(args.checkpoint, args.manifest, args.pooling, str(resolve_out(args.out)),
                             _split(args.split))
    logger.info("Embeddings written to %s", path)
    return 0


def cmd_gap(args) -> int:
    value = gap_reduction(GapReductionInput(args.synth, args.adapted, args.real))
    print(f"{value:.2f}")
    return 0


# -----------------------
# Parser
# -----------------------
def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON RunConfig file")
    p.add_argument("--seed", type=int)
    p.add_argument("-v", "--verbose", action="store_true")


def _add_train_flags(p: argparse.ArgumentParser, variants: bool = True) -> None:
    p.add_argument("--mode", choices=["source_only", "unsup_adapt", "sup_adapt"])
    p.add_argument("--source-manifest")
    p.add_argument("--target-manifest")
    p.add_argument("--val-manifest")
    p.add_argument("--test-manifest")
    p.add_argument("--charset")
    if variants:
        p.add_argument("--pooling", choices=["cmv", "spp", "tpp", "gru"])
        p.add_argument("--lambda-schedule", choices=["constant", "linear", "exponential"])
    p.add_argument("--lambda-horizon", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--max-steps", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--init-checkpoint")
    p.add_argument("--target-writer")
    p.add_argument("--source-limit", type=int)
    p.add_argument("--device")
    p.add_argument("--out", help="output directory (relative to SYNTH2REAL_OUTPUT_ROOT)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="synth2real-htr",
                                     description="Synthetic-to-real adversarial writer adaptation for word recognition")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gensynth", help="render a synthetic word dataset")
    _add_common(p)
    p.add_argument("--fonts", required=True, help="directory of .ttf/.otf files")
    p.add_argument("--corpus", required=True, help="word list, one word per line")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--out", default="data/synth")
    p.add_argument("--charset", help="reuse an existing charset instead of building one from the corpus")
    p.add_argument("--domain", choices=[d.value for d in Domain], default="source")
    p.add_argument("--split", choices=[s.value for s in Split], default="train")
    p.add_argument("--writer-id")
    p.add_argument("--augment-config", help=f"preset {sorted(AUGMENT_PRESETS)} or JSON file")
    p.add_argument("--n-jobs", type=int)

    p = sub.add_parser("train", help="source_only / unsup_adapt / sup_adapt training")
    _add_common(p)
    _add_train_flags(p)
    p.add_argument("--resume-from")
    p.add_argument("--target-limit", type=int)
    p.add_argument("--checkpoint-every", type=int)
    p.add_argument("--log-every", type=int)

    p = sub.add_parser("eval", help="CER/WER of a checkpoint on a manifest")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", default="test", choices=[s.value for s in Split] + ["all"])
    p.add_argument("--per-writer", action="store_true")
    p.add_argument("--compare", help="adapted checkpoint; emits the per-writer improvement table")
    p.add_argument("--case-insensitive", action="store_true")
    p.add_argument("--strip-punctuation", action="store_true")
    p.add_argument("--out", default="reports/eval")

    p = sub.add_parser("curve", help="adaptation error vs amount of unlabeled target data")
    _add_common(p)
    _add_train_flags(p)
    p.add_argument("--sizes", type=int, nargs="+", required=True)
    p.add_argument("--seeds", type=int, nargs="+")

    p = sub.add_parser("ablate", help="train every pooling or lambda variant and tabulate")
    _add_common(p)
    _add_train_flags(p, variants=False)
    p.add_argument("--vary", choices=sorted(ABLATIONS), required=True)
    p.add_argument("--values", nargs="+")

    p = sub.add_parser("export-emb", help="pooled encoder features as TSV")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--pooling", choices=["cmv", "spp", "tpp", "gru"], default="cmv")
    p.add_argument("--split", default="all", choices=[s.value for s in Split] + ["all"])
    p.add_argument("--out", default="reports/embeddings.tsv")

    p = sub.add_parser("gap", help="gap reduction from three error rates")
    p.add_argument("--synth", type=float, required=True)
    p.add_argument("--adapted", type=float, required=True)
    p.add_argument("--real", type=float, required=True)
    p.add_argument("-v", "--verbose", action="store_true")
    return parser


COMMANDS: Dict[str, Callable[[argparse.Namespace], int]] = {
    "gensynth": cmd_gensynth,
    "train": cmd_train,
    "eval": cmd_eval,
    "curve": cmd_curve,
    "ablate": cmd_ablate,
    "export-emb": cmd_export_emb,
    "gap": cmd_gap,
}


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s:%(name)s:%(message)s")
    handler = COMMANDS[args.command]
    try:
        return handler(args) or 0
    except AdaptError as e:
        logger.error("%s: %s", type(e).__name__, e)
        return e.exit_code
    except (ValueError, ValidationError) as e:
        logger.error("Invalid input: %s", e)
        return 1
    except Exception:
        logger.exception("Unexpected failure running %s", args.command)
        return 2


if __name__ == "__main__":
    sys.exit(main())
