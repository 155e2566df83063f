"""End-to-end data-free quantization runs, comparison harnesses and reports.

A run directory holds::

    fp.ckpt            full-precision checkpoint
    samples/           sample{k}.dfqv tensors, sample{k}.ppm previews
    manifest.txt       one JSON record per calibration sample
    quant_params.txt   one JSON record per quantized site
    acm.ckpt           activation corrections (when enabled)
    report.json        machine-readable report, report.txt human summary
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from . import acm as acm_mod
from . import checkpoint, data, quant
from .model import ViTConfig, ViTModel, predict
from .synthesis import E2H, FIXED, SynthesisConfig, SynthesisResult, crop_averaged_loss, synthesize_batch
from .train import train_toy

log = logging.getLogger(__name__)

REPORT_SCHEMA = "dfqvit.report/1"
CALIB_SOURCES = ("synth", "real", "noise")


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"[{stage}] {type(cause).__name__}: {cause}")
        self.stage = stage
        self.cause = cause


@dataclass
class RunConfig:
    model: ViTConfig = field(default_factory=ViTConfig)
    synthesis: SynthesisConfig = field(default_factory=SynthesisConfig)
    bits_w: int = 4
    bits_a: int = 8
    calib_source: str = "synth"
    acm: bool = True
    gamma: Optional[int] = None
    samples: int = 16
    seed: int = 0
    include_patch_embed: bool = True
    data_seed: int = 0
    train_count: int = 5000
    test_count: int = 1000
    train_epochs: int = 12
    train_lr: float = 2e-3
    train_seed: int = 0
    out_dir: Optional[str] = None

    def __post_init__(self):
        if isinstance(self.model, dict):
            self.model = ViTConfig(**self.model)
        if isinstance(self.synthesis, dict):
            self.synthesis = SynthesisConfig(**self.synthesis)
        for name in ("bits_w", "bits_a"):
            if not 2 <= getattr(self, name) <= 32:
                raise ValueError(f"{name} must lie in [2, 32], got {getattr(self, name)}")
        if self.calib_source not in CALIB_SOURCES:
            raise ValueError(f"calib_source must be one of {CALIB_SOURCES}, got {self.calib_source!r}")
        if self.samples < 1:
            raise ValueError("samples must be >= 1")
        if self.gamma is not None and self.gamma < 1:
            raise ValueError("gamma must be >= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["model"] = self.model.to_dict()
        d["synthesis"] = self.synthesis.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown RunConfig keys {sorted(unknown)}")
        return cls(**d)

    def with_seed(self, seed: int) -> "RunConfig":
        return replace(self, seed=seed, synthesis=replace(self.synthesis, seed=seed))

    def arm_name(self) -> str:
        src = f"synth-{self.synthesis.strategy}" if self.calib_source == "synth" else self.calib_source
        return f"W{self.bits_w}/A{self.bits_a} {src} acm={'on' if self.acm else 'off'}"


# evaluation

def evaluate_topk(logits: np.ndarray, labels: np.ndarray, ks: Sequence[int] = (1, 5)) -> Dict[int, float]:
    """Top-k accuracy in percent; equal logits rank the lower class index first."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels)
    if logits.ndim != 2 or len(logits) == 0:
        raise ValueError("need a non-empty (n, C) logit array")
    C = logits.shape[1]
    for k in ks:
        if not 1 <= k <= C:
            raise ValueError(f"k={k} outside [1, {C}]")
    order = np.argsort(-logits, axis=1, kind="stable")
    hits = order == labels[:, None]
    n = len(labels)
    return {k: 100.0 * int(hits[:, :k].any(axis=1).sum()) / n for k in ks}


@dataclass
class EvalReport:
    top1: float
    top5: float
    fp_top1: float
    fp_top5: float
    arm: str
    seed: int
    config: dict
    model_params: int
    acm_params: int
    acm_ratio: float
    synthesis_losses: Optional[dict] = None
    timings: Dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        if not 0.0 <= self.top1 <= self.top5 <= 100.0:
            raise ValueError(f"inconsistent accuracies top1={self.top1} top5={self.top5}")

    def payload(self) -> dict:
        """Deterministic section: everything except timings."""
        d = asdict(self)
        d.pop("timings")
        return d


def emit_report(report: EvalReport, path) -> None:
    """Write ``report.json`` (versioned, sorted keys) and a text summary next to it."""
    path = Path(path)
    doc = {"schema": REPORT_SCHEMA, "payload": report.payload(),
           "timings": report.timings, "created_unix": time.time()}
    path.write_text(json.dumps(doc, sort_keys=True, indent=1) + "\n")
    summary = path.with_suffix(".txt")
    lines = [
        f"arm        {report.arm}",
        f"seed       {report.seed}",
        f"top-1      {report.top1:.2f}%   (FP {report.fp_top1:.2f}%)",
        f"top-5      {report.top5:.2f}%   (FP {report.fp_top5:.2f}%)",
        f"ACM params {report.acm_params} / {report.model_params} = {100 * report.acm_ratio:.4f}%",
    ]
    summary.write_text("\n".join(lines) + "\n")


def read_report(path) -> EvalReport:
    doc = json.loads(Path(path).read_text())
    if doc.get("schema") != REPORT_SCHEMA:
        raise ValueError(f"unsupported report schema {doc.get('schema')!r}")
    return EvalReport(**doc["payload"], timings=doc.get("timings", {}))


# stages

def load_datasets(cfg: RunConfig):
    train = data.generate(cfg.data_seed, cfg.train_count, "train",
                          cfg.model.num_classes, cfg.model.image_size)
    test = data.generate(cfg.data_seed, cfg.test_count, "test",
                         cfg.model.num_classes, cfg.model.image_size)
    return train, test


def train_fp_model(cfg: RunConfig, train=None, test=None):
    if train is None:
        train, test = load_datasets(cfg)
    model = ViTModel.init(cfg.model, cfg.train_seed)
    report = train_toy(model, train, cfg.train_epochs, cfg.train_lr, cfg.train_seed, test_set=test)
    return model, report


def sample_records(cfg: RunConfig, synth: Optional[SynthesisResult], count: int) -> List[dict]:
    """Manifest rows: provenance of every calibration image."""
    if synth is None:
        return [{"sample": k, "source": cfg.calib_source, "seed": cfg.seed} for k in range(count)]
    rows = []
    for k in range(count):
        seed, index = synth.seeds[k]
        rec = {"sample": k, "source": f"synth-{cfg.synthesis.strategy}", "seed": seed,
               "index": index, "class": int(synth.classes[k])}
        rec.update({name: float(v[k]) for name, v in synth.final.items()})
        rows.append(rec)
    return rows


def write_samples(images, records: Sequence[dict], out_dir) -> None:
    sample_dir = Path(out_dir) / "samples"
    sample_dir.mkdir(parents=True, exist_ok=True)
    for old in sample_dir.glob("sample*"):
        old.unlink()
    with open(Path(out_dir) / "manifest.txt", "w") as fh:
        for k, (img, rec) in enumerate(zip(images, records)):
            checkpoint.write_tensors(sample_dir / f"sample{k:04d}.dfqv", {"image": np.asarray(img)})
            write_ppm(sample_dir / f"sample{k:04d}.ppm", img)
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def read_samples(out_dir) -> List[np.ndarray]:
    sample_dir = Path(out_dir) / "samples"
    files = sorted(sample_dir.glob("sample*.dfqv"))
    if not files:
        raise FileNotFoundError(f"no samples in {sample_dir}")
    return [checkpoint.read_tensors(f)["image"] for f in files]


def write_ppm(path, image: np.ndarray) -> None:
    """8-bit binary PPM preview of a (3, H, W) image clipped to [0, 1]."""
    img = np.clip(np.asarray(image), 0.0, 1.0)
    _, H, W = img.shape
    pix = np.round(img.transpose(1, 2, 0) * 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P6\n{W} {H}\n255\n".encode("ascii"))
        fh.write(pix.tobytes())


def calibration_images(cfg: RunConfig, fp_model: ViTModel, train=None):
    """Return (images, synthesis result or None) for the configured source."""
    if cfg.calib_source == "synth":
        result = synthesize_batch(fp_model, cfg.synthesis, cfg.samples)
        return list(result.images), result
    if cfg.calib_source == "real":
        if train is None:
            train, _ = load_datasets(cfg)
        return data.real_calibration_subset(train, cfg.samples, cfg.seed), None
    shape = (3, cfg.model.image_size, cfg.model.image_size)
    return data.gaussian_noise_images(cfg.samples, shape, cfg.seed,
                                      cfg.synthesis.init_mean, cfg.synthesis.init_std), None


def quantize_and_correct(cfg: RunConfig, fp_model: ViTModel, images):
    qmodel = quant.calibrate(fp_model, images, cfg.bits_w, cfg.bits_a, cfg.include_patch_embed)
    acm_set = None
    if cfg.acm:
        acm_set = acm_mod.compute_acm(fp_model, qmodel, images, cfg.gamma)
    return qmodel, acm_set


def evaluate_arm(cfg: RunConfig, fp_model: ViTModel, qmodel, acm_set, test, fp_logits=None,
                 synthesis: Optional[SynthesisResult] = None, timings=None) -> EvalReport:
    if fp_logits is None:
        fp_logits = predict(fp_model, test.images)
    runtime = acm_mod.CorrectedRuntime(qmodel, acm_set) if acm_set is not None else qmodel
    q_logits = predict(fp_model, test.images, runtime=runtime)
    acc = evaluate_topk(q_logits, test.labels)
    fp_acc = evaluate_topk(fp_logits, test.labels)
    n_acm = acm_mod.acm_param_count(acm_set) if acm_set is not None else 0
    n_model = fp_model.num_parameters()
    synth_losses = None
    if synthesis is not None:
        synth_losses = {k: float(np.mean(v)) for k, v in synthesis.final.items()}
    return EvalReport(
        top1=acc[1], top5=acc[5], fp_top1=fp_acc[1], fp_top5=fp_acc[5],
        arm=cfg.arm_name(), seed=cfg.seed, config=cfg.to_dict(),
        model_params=n_model, acm_params=n_acm, acm_ratio=n_acm / n_model,
        synthesis_losses=synth_losses, timings=dict(timings or {}),
    )


def _stage(name: str, fn: Callable, timings: Dict[str, float]):
    start = time.perf_counter()
    try:
        return fn()
    except StageError:
        raise
    except Exception as err:
        raise StageError(name, err) from err
    finally:
        timings[name] = time.perf_counter() - start


def obtain_fp_model(cfg: RunConfig, train=None, test=None, timings=None) -> ViTModel:
    """Load ``out_dir/fp.ckpt`` when present, otherwise train (and save) one."""
    timings = {} if timings is None else timings
    if cfg.out_dir:
        ckpt = Path(cfg.out_dir) / "fp.ckpt"
        if ckpt.exists():
            return _stage("load", lambda: checkpoint.load_checkpoint(ckpt, cfg.model), timings)
    model, _ = _stage("train", lambda: train_fp_model(cfg, train, test), timings)
    if cfg.out_dir:
        Path(cfg.out_dir).mkdir(parents=True, exist_ok=True)
        checkpoint.save_checkpoint(model, Path(cfg.out_dir) / "fp.ckpt")
    return model


def run_pipeline(cfg: RunConfig, fp_model: Optional[ViTModel] = None, datasets=None) -> EvalReport:
    """Synthesize (or fetch) calibration images, calibrate, correct, evaluate."""
    timings: Dict[str, float] = {}
    train, test = datasets if datasets is not None else _stage("data", lambda: load_datasets(cfg), timings)
    if fp_model is None:
        fp_model = obtain_fp_model(cfg, train, test, timings)
    elif fp_model.config != cfg.model:
        raise StageError("load", ValueError(f"model architecture {fp_model.config} differs from {cfg.model}"))
    images, synth = _stage("synth", lambda: calibration_images(cfg, fp_model, train), timings)
    qmodel, acm_set = _stage("calibrate", lambda: quantize_and_correct(cfg, fp_model, images), timings)
    report = _stage("eval", lambda: evaluate_arm(cfg, fp_model, qmodel, acm_set, test,
                                                 synthesis=synth), timings)
    report.timings = timings
    if cfg.out_dir:
        out = Path(cfg.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_samples(images, sample_records(cfg, synth, len(images)), out)
        quant.save_quant_params(qmodel, out / "quant_params.txt")
        if acm_set is not None:
            acm_mod.save_acm(acm_set, out / "acm.ckpt")
        emit_report(report, out / "report.json")
    return report


# comparison harnesses

class Study:
    """Shares synthesized calibration sets across arms of one seed.

    Synthesis does not depend on bit widths or on ACM, so each
    ``(seed, strategy)`` pair is synthesized once and reused.
    """

    def __init__(self, base: RunConfig, fp_model: ViTModel, datasets):
        self.base = base
        self.fp_model = fp_model
        self.train, self.test = datasets
        self.fp_logits = predict(fp_model, self.test.images)
        self._synth: Dict[tuple, SynthesisResult] = {}

    def synthesized(self, seed: int, strategy: str) -> SynthesisResult:
        key = (seed, strategy)
        if key not in self._synth:
            scfg = replace(self.base.synthesis, seed=seed, strategy=strategy)
            start = time.perf_counter()
            self._synth[key] = synthesize_batch(self.fp_model, scfg, self.base.samples)
            log.info("synthesized seed=%d strategy=%s in %.1fs", seed, strategy,
                     time.perf_counter() - start)
        return self._synth[key]

    def run(self, seed: int, calib_source: str = "synth", strategy: str = E2H,
            bits_w: Optional[int] = None, bits_a: Optional[int] = None,
            acm: Optional[bool] = None) -> EvalReport:
        cfg = self.base.with_seed(seed)
        cfg = replace(cfg, calib_source=calib_source,
                      synthesis=replace(cfg.synthesis, strategy=strategy),
                      bits_w=bits_w or cfg.bits_w, bits_a=bits_a or cfg.bits_a,
                      acm=cfg.acm if acm is None else acm)
        synth = None
        if calib_source == "synth":
            synth = self.synthesized(seed, strategy)
            images = list(synth.images)
        else:
            images, _ = calibration_images(cfg, self.fp_model, self.train)
        qmodel, acm_set = quantize_and_correct(cfg, self.fp_model, images)
        return evaluate_arm(cfg, self.fp_model, qmodel, acm_set, self.test,
                            self.fp_logits, synthesis=synth)


ABLATION_ARMS = (
    ("baseline", FIXED, False),
    ("+E2H", E2H, False),
    ("+ACM", FIXED, True),
    ("+E2H+ACM", E2H, True),
)
ABLATION_BITS = ((4, 8), (8, 8))


def ablation(study: Study, seeds: Sequence[int]) -> dict:
    """Top-1 for the four arms at W4/A8 and W8/A8 for every seed."""
    rows = []
    for name, strategy, use_acm in ABLATION_ARMS:
        for bw, ba in ABLATION_BITS:
            reports = [study.run(s, "synth", strategy, bw, ba, use_acm) for s in seeds]
            rows.append({
                "arm": name, "bits": f"W{bw}/A{ba}",
                "top1": [r.top1 for r in reports],
                "median_top1": float(np.median([r.top1 for r in reports])),
                "acm_params": reports[0].acm_params,
                "acm_ratio": reports[0].acm_ratio,
            })
    fp = float(evaluate_topk(study.fp_logits, study.test.labels)[1])
    return {"seeds": list(seeds), "fp_top1": fp, "rows": rows}


def format_ablation(table: dict) -> str:
    lines = [f"{'Method':<12}{'bit-width':<10}{'median top-1':>14}   per-seed",
             f"{'FP':<12}{'W32/A32':<10}{table['fp_top1']:>14.2f}"]
    for row in table["rows"]:
        per = " ".join(f"{v:.1f}" for v in row["top1"])
        lines.append(f"{row['arm']:<12}{row['bits']:<10}{row['median_top1']:>14.2f}   {per}"
                     f"   (ACM params {row['acm_params']})")
    return "\n".join(lines)


def compare_strategies(study: Study, seeds: Sequence[int], draws: int = 8) -> dict:
    """Paired easy-to-hard vs fixed-crop synthesis per seed.

    The final loss of each arm is its total loss averaged over ``draws`` crops
    at the schedule's final scale ``delta_lower``, with identical crop
    geometry for both arms. Full-canvas losses are reported alongside.
    """
    if len(seeds) < 2:
        raise ValueError("compare_strategies needs at least two seeds")
    cfg = study.base.synthesis
    pairs = []
    for seed in seeds:
        e2h, fixed = study.synthesized(seed, E2H), study.synthesized(seed, FIXED)
        rec = {"seed": seed, "shared_init": bool(np.array_equal(e2h.initial_images, fixed.initial_images))}
        for name, res in (("e2h", e2h), ("fixed", fixed)):
            at_final = crop_averaged_loss(study.fp_model, res.images, res.classes, cfg,
                                          cfg.delta_lower, draws, seed)
            rec[f"{name}_final_loss"] = float(at_final.mean())
            rec[f"{name}_full_loss"] = float(res.final["total"].mean())
            rec[f"{name}_top1"] = study.run(seed, "synth", E2H if name == "e2h" else FIXED).top1
        rec["e2h_wins"] = rec["e2h_final_loss"] <= rec["fixed_final_loss"]
        pairs.append(rec)
    wins = sum(p["e2h_wins"] for p in pairs)
    return {"pairs": pairs, "e2h_wins": wins, "total": len(pairs)}
