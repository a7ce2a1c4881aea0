"""Autoregressive text-to-motion diffusion: motion features, synthetic corpus, denoiser,
sampler, metrics and training."""
from .conditioning import DurationPredictor, embed_text, predict_duration
from .corpus import generate_corpus, load_corpus, save_corpus, split_corpus
from .denoiser import DESK, FULL, DenoiserConfig, MotionDenoiser, init_denoiser
from .losses import LossWeights, geometric_losses
from .metrics import MotionTextEvaluator, evaluate_suite, fid
from .motion_repr import MotionClip, junction_gap, recover_positions, validate_clip
from .sampler import PromptSequence, infill_stitch, sample_joint, sample_long, sample_segment, stitch_interp
from .schedule import build_linear_schedule, q_sample
from .trainer import TrainConfig, load_checkpoint, save_checkpoint, train_denoiser

__version__ = "0.1.0"

__all__ = [
    "DESK", "FULL", "DenoiserConfig", "DurationPredictor", "LossWeights", "MotionClip", "MotionDenoiser",
    "MotionTextEvaluator", "PromptSequence", "TrainConfig", "build_linear_schedule", "embed_text",
    "evaluate_suite", "fid", "generate_corpus", "geometric_losses", "infill_stitch", "init_denoiser",
    "junction_gap", "load_checkpoint", "load_corpus", "predict_duration", "q_sample", "recover_positions",
    "sample_joint", "sample_long", "sample_segment", "save_checkpoint", "save_corpus", "split_corpus",
    "stitch_interp", "train_denoiser", "validate_clip",
]
