"""Data-free post-training quantization of a small vision transformer."""

from .acm import AcmSet, acm_param_count, compute_acm, corrected_forward
from .model import ViTConfig, ViTModel, forward, predict
from .pipeline import EvalReport, RunConfig, evaluate_topk, run_pipeline
from .quant import QuantParams, calibrate, dequantize, quantize, quantized_forward
from .synthesis import SynthesisConfig, e2h_schedule, synthesize, synthesize_batch
from .tensor import Tape, Tensor

__version__ = "0.1.0"

__all__ = [
    "AcmSet", "acm_param_count", "compute_acm", "corrected_forward",
    "ViTConfig", "ViTModel", "forward", "predict",
    "EvalReport", "RunConfig", "evaluate_topk", "run_pipeline",
    "QuantParams", "calibrate", "dequantize", "quantize", "quantized_forward",
    "SynthesisConfig", "e2h_schedule", "synthesize", "synthesize_batch",
    "Tape", "Tensor",
]
