"""Command-line entry point: one subcommand per pipeline stage.

Stages share a run directory (``--out``). The first stage writes
``run_config.json``; later stages read it back, so flags only need to be
given once. Flags passed to a later stage override the stored values.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from dataclasses import replace
from pathlib import Path
from typing import List, Optional

import numpy as np

from . import acm as acm_mod
from . import checkpoint, quant
from .pipeline import (
    CALIB_SOURCES,
    RunConfig,
    StageError,
    Study,
    ablation,
    calibration_images,
    compare_strategies,
    emit_report,
    evaluate_arm,
    format_ablation,
    load_datasets,
    obtain_fp_model,
    read_samples,
    sample_records,
    write_samples,
)

CONFIG_FILE = "run_config.json"
STAGES = ("train", "synth", "calibrate", "eval", "ablate", "compare")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON file with RunConfig fields")
    common.add_argument("--out", default="run", help="run directory (default: ./run)")
    common.add_argument("--seed", type=int)
    common.add_argument("--bits-w", type=int)
    common.add_argument("--bits-a", type=int)
    common.add_argument("--strategy", choices=("e2h", "fixed"))
    common.add_argument("--calib-source", choices=CALIB_SOURCES)
    common.add_argument("--samples", type=int, help="calibration images (default 16)")
    common.add_argument("--iters", type=int, help="synthesis iterations (default 500)")
    common.add_argument("--acm", choices=("on", "off"))
    common.add_argument("--gamma", type=int, help="extra ACM hooks every GAMMA blocks")
    common.add_argument("--epochs", type=int, help="training epochs for the FP model")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="dfqvit", description="Data-free ViT quantization on a toy stack.")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("train", parents=[common], help="train the FP toy ViT and write fp.ckpt")
    sub.add_parser("synth", parents=[common], help="produce calibration images into samples/")
    sub.add_parser("calibrate", parents=[common], help="fit quantizers and ACM from samples/")
    sub.add_parser("eval", parents=[common], help="evaluate the calibrated model and write report.json")
    for name, text in (("ablate", "four-arm ablation at W4/A8 and W8/A8"),
                       ("compare", "paired E2H vs fixed-crop synthesis")):
        p = sub.add_parser(name, parents=[common], help=text)
        p.add_argument("--num-seeds", type=int, default=5, help="seeds SEED..SEED+N-1 (default 5)")
    return parser


def resolve_config(args) -> RunConfig:
    out = Path(args.out)
    if args.config:
        cfg = RunConfig.from_dict(json.loads(Path(args.config).read_text()))
    elif (out / CONFIG_FILE).exists():
        cfg = RunConfig.from_dict(json.loads((out / CONFIG_FILE).read_text()))
    else:
        cfg = RunConfig()
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    synth = cfg.synthesis
    if args.strategy:
        synth = replace(synth, strategy=args.strategy)
    if args.iters is not None:
        synth = replace(synth, iterations=args.iters)
    overrides = {
        "bits_w": args.bits_w, "bits_a": args.bits_a, "calib_source": args.calib_source,
        "samples": args.samples, "gamma": args.gamma, "train_epochs": args.epochs,
        "acm": None if args.acm is None else args.acm == "on",
    }
    cfg = replace(cfg, synthesis=synth, out_dir=str(out),
                  **{k: v for k, v in overrides.items() if v is not None})
    return cfg


def _save_config(cfg: RunConfig) -> None:
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / CONFIG_FILE).write_text(json.dumps(cfg.to_dict(), sort_keys=True, indent=1) + "\n")


def _require(path: Path, stage: str) -> Path:
    if not path.exists():
        raise FileNotFoundError(f"{path} not found; run `dfqvit {stage}` first")
    return path


def cmd_train(cfg: RunConfig) -> str:
    ckpt = Path(cfg.out_dir) / "fp.ckpt"
    if ckpt.exists():
        ckpt.unlink()
    obtain_fp_model(cfg)
    return f"wrote {ckpt}"


def cmd_synth(cfg: RunConfig) -> str:
    fp = checkpoint.load_checkpoint(_require(Path(cfg.out_dir) / "fp.ckpt", "train"), cfg.model)
    train = load_datasets(cfg)[0] if cfg.calib_source == "real" else None
    images, synth = calibration_images(cfg, fp, train)
    write_samples(images, sample_records(cfg, synth, len(images)), cfg.out_dir)
    return f"wrote {len(images)} samples to {Path(cfg.out_dir) / 'samples'}"


def cmd_calibrate(cfg: RunConfig) -> str:
    out = Path(cfg.out_dir)
    fp = checkpoint.load_checkpoint(_require(out / "fp.ckpt", "train"), cfg.model)
    _require(out / "samples", "synth")
    images = read_samples(out)
    qmodel = quant.calibrate(fp, images, cfg.bits_w, cfg.bits_a, cfg.include_patch_embed)
    quant.save_quant_params(qmodel, out / "quant_params.txt")
    if cfg.acm:
        acm_mod.save_acm(acm_mod.compute_acm(fp, qmodel, images, cfg.gamma), out / "acm.ckpt")
    elif (out / "acm.ckpt").exists():
        (out / "acm.ckpt").unlink()
    return f"calibrated W{cfg.bits_w}/A{cfg.bits_a} from {len(images)} samples"


def cmd_eval(cfg: RunConfig) -> str:
    out = Path(cfg.out_dir)
    start = time.perf_counter()
    fp = checkpoint.load_checkpoint(_require(out / "fp.ckpt", "train"), cfg.model)
    qmodel = quant.load_quant_params(fp, _require(out / "quant_params.txt", "calibrate"))
    acm_set = acm_mod.load_acm(_require(out / "acm.ckpt", "calibrate")) if cfg.acm else None
    _, test = load_datasets(cfg)
    report = evaluate_arm(cfg, fp, qmodel, acm_set, test)
    report.synthesis_losses = _manifest_losses(out / "manifest.txt")
    report.timings = {"eval": time.perf_counter() - start}
    emit_report(report, out / "report.json")
    return (out / "report.txt").read_text().rstrip()


def _manifest_losses(path: Path) -> Optional[dict]:
    if not path.exists():
        return None
    rows = [json.loads(line) for line in path.read_text().splitlines() if line.strip()]
    keys = [k for k in ("pse", "oh", "tv", "total") if rows and k in rows[0]]
    return {k: float(np.mean([r[k] for r in rows])) for k in keys} or None


def _study(cfg: RunConfig) -> Study:
    datasets = load_datasets(cfg)
    fp = obtain_fp_model(cfg, *datasets)
    return Study(cfg, fp, datasets)


def _seeds(cfg: RunConfig, n: int) -> List[int]:
    return list(range(cfg.seed, cfg.seed + n))


def cmd_ablate(cfg: RunConfig, num_seeds: int) -> str:
    table = ablation(_study(cfg), _seeds(cfg, num_seeds))
    out = Path(cfg.out_dir)
    (out / "ablation.json").write_text(json.dumps(table, sort_keys=True, indent=1) + "\n")
    text = format_ablation(table)
    (out / "ablation.txt").write_text(text + "\n")
    return text


def cmd_compare(cfg: RunConfig, num_seeds: int) -> str:
    result = compare_strategies(_study(cfg), _seeds(cfg, num_seeds))
    out = Path(cfg.out_dir)
    (out / "compare.json").write_text(json.dumps(result, sort_keys=True, indent=1) + "\n")
    lines = [f"seed {p['seed']}: e2h {p['e2h_final_loss']:.4f} vs fixed {p['fixed_final_loss']:.4f}"
             f"  top-1 {p['e2h_top1']:.1f} vs {p['fixed_top1']:.1f}" for p in result["pairs"]]
    lines.append(f"E2H lower final loss in {result['e2h_wins']}/{result['total']} pairs")
    return "\n".join(lines)


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    stage = "config"
    try:
        cfg = resolve_config(args)
        _save_config(cfg)
        stage = args.command
        if stage in ("ablate", "compare"):
            fn = cmd_ablate if stage == "ablate" else cmd_compare
            message = fn(cfg, args.num_seeds)
        else:
            message = {"train": cmd_train, "synth": cmd_synth,
                       "calibrate": cmd_calibrate, "eval": cmd_eval}[stage](cfg)
    except StageError as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    except Exception as err:
        print(f"error: [{stage}] {type(err).__name__}: {err}", file=sys.stderr)
        return 1
    print(message)
    return 0


if __name__ == "__main__":
    sys.exit(main())
