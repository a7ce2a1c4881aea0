"""Training loops for the denoiser, duration predictor and evaluator, plus checkpoints."""
from __future__ import annotations

import hashlib
import json
import logging
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .conditioning import DurationPredictor, embed_text, embed_texts, frames_to_class, L_MIN
from .corpus import Corpus
from .denoiser import PRESETS, MotionDenoiser, init_denoiser, DenoiserConfig
from .io_utils import atomic_write_bytes
from .losses import LossWeights, batch_loss
from .metrics import MotionTextEvaluator, pad_clips
from .motion_repr import FEAT_DIM
from .schedule import build_linear_schedule, q_sample

log = logging.getLogger(__name__)

STD_FLOOR = 1e-3
CKPT_MAGIC = b"AMDC"
CKPT_VERSION = 1


class ConfigError(ValueError):
    pass


class TrainingError(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass
class TrainConfig:
    steps: int = 5000
    learning_rate: float = 1e-4
    batch_size: int = 16
    optimizer: str = "adamw"
    weight_decay: float = 0.01
    seed: int = 0
    lambda_h: float = 1.0
    lambda_p: float = 1.0
    lambda_r: float = 1.0
    lambda_v: float = 1.0
    lambda_f: float = 0.5
    p_mask: float = 0.1
    T: int = 100
    # 1e-4..0.02 scaled by 1000 / T so that x_T is close to pure noise at T = 100
    beta_start: float = 1e-3
    beta_end: float = 0.2
    preset: str = "desk"
    grad_clip: float = 1.0
    duration_steps: int = 1000
    duration_learning_rate: float = 1e-3
    evaluator_steps: int = 1000
    evaluator_learning_rate: float = 1e-3

    def __post_init__(self):
        if self.steps < 1:
            raise ConfigError(f"steps must be >= 1, got {self.steps}")
        for k in ("learning_rate", "duration_learning_rate", "evaluator_learning_rate"):
            if not getattr(self, k) >= 0:
                raise ConfigError(f"{k} must be >= 0, got {getattr(self, k)}")
        if self.batch_size < 1 or self.T < 1 or self.duration_steps < 0 or self.evaluator_steps < 0:
            raise ConfigError("batch_size and T must be >= 1; step counts must be >= 0")
        if not 0.0 <= self.p_mask <= 1.0:
            raise ConfigError(f"p_mask must be in [0, 1], got {self.p_mask}")
        if self.optimizer != "adamw":
            raise ConfigError(f"unsupported optimizer {self.optimizer!r} (only adamw)")
        if self.preset not in PRESETS:
            raise ConfigError(f"unknown preset {self.preset!r}; choose from {sorted(PRESETS)}")
        if self.weight_decay < 0 or self.grad_clip <= 0:
            raise ConfigError("weight_decay must be >= 0 and grad_clip > 0")
        try:
            self.loss_weights
        except ValueError as e:
            raise ConfigError(str(e)) from e

    @property
    def loss_weights(self) -> LossWeights:
        return LossWeights(self.lambda_h, self.lambda_p, self.lambda_r, self.lambda_v, self.lambda_f)

    @property
    def model_config(self) -> DenoiserConfig:
        return PRESETS[self.preset]

    def schedule(self):
        return build_linear_schedule(self.T, self.beta_start, self.beta_end)

    def to_text(self) -> str:
        return "".join(f"{k} = {v}\n" for k, v in asdict(self).items())


def parse_config(text: str, name: str = "<config>") -> TrainConfig:
    """Flat ``key = value`` lines; ``#`` starts a comment. Every field is required."""
    types = {f.name: f.type for f in fields(TrainConfig)}
    values = {}
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{name}:{n}: expected key = value, got {raw!r}")
        key, val = (s.strip() for s in line.split("=", 1))
        if key not in types:
            raise ConfigError(f"{name}:{n}: unknown config key {key!r}")
        if key in values:
            raise ConfigError(f"{name}:{n}: duplicate config key {key!r}")
        conv = {"int": int, "float": float, "str": str}[types[key]]
        try:
            values[key] = conv(val)
        except ValueError as e:
            raise ConfigError(f"{name}:{n}: bad value for {key!r}: {val!r}") from e
    missing = [k for k in types if k not in values]
    if missing:
        raise ConfigError(f"{name}: missing config key {missing[0]!r}")
    return TrainConfig(**values)


def load_config(path) -> TrainConfig:
    return parse_config(Path(path).read_text(encoding="utf-8"), str(path))


def _records(corpus: Corpus, ids):
    recs = corpus.subset(ids) if ids is not None else list(corpus.records)
    if not recs:
        raise TrainingError("empty training split")
    return recs


def feature_stats(clips) -> tuple[np.ndarray, np.ndarray]:
    x = np.concatenate([np.asarray(getattr(c, "frames", c), dtype=np.float64) for c in clips])
    return x.mean(0).astype(np.float32), np.maximum(x.std(0), STD_FLOOR).astype(np.float32)


def _pad(arrays, width):
    x = np.zeros((len(arrays), width, FEAT_DIM), dtype=np.float32)
    mask = np.zeros((len(arrays), width), dtype=bool)
    for i, a in enumerate(arrays):
        if a is not None:
            x[i, :len(a)] = a
            mask[i, :len(a)] = True
    return torch.from_numpy(x), torch.from_numpy(mask)


@dataclass
class DenoiserBatch:
    ids: list
    x0: torch.Tensor
    frame_mask: torch.Tensor
    text: torch.Tensor
    prev_motion: torch.Tensor
    prev_mask: torch.Tensor
    prev_text: torch.Tensor


def make_batch(corpus: Corpus, recs, picks, text_dim: int) -> DenoiserBatch:
    chosen = [recs[i] for i in picks]
    prevs = [corpus[r.prev_id] if r.prev_id is not None else None for r in chosen]
    x0, mask = _pad([r.clip.frames for r in chosen], max(r.n_frames for r in chosen))
    pw = max([p.n_frames for p in prevs if p is not None], default=1)
    pm, pmask = _pad([p.clip.frames if p is not None else None for p in prevs], pw)
    pt = torch.from_numpy(np.stack([embed_text(p.text, text_dim) if p is not None
                                    else np.zeros(text_dim, np.float32) for p in prevs]))
    text = embed_texts([r.text for r in chosen], text_dim)
    return DenoiserBatch([r.id for r in chosen], x0, mask, text, pm, pmask, pt)


@dataclass
class TrainResult:
    model: nn.Module
    history: list = field(default_factory=list)


def train_denoiser(corpus: Corpus, train_ids, config: TrainConfig, model: MotionDenoiser | None = None,
                   steps: int | None = None, log_every: int = 100) -> TrainResult:
    """Diffusion training with x0-prediction and geometric losses in raw feature units.

    Step s draws (records, t, masks, noise seed) from ``default_rng([seed, s])`` so each step is
    reproducible on its own.
    """
    recs = _records(corpus, train_ids)
    steps = config.steps if steps is None else steps
    sched = config.schedule()
    weights = config.loss_weights
    if model is None:
        model = init_denoiser(config.model_config, config.seed)
        model.set_normalizer(*feature_stats([r.clip for r in recs]))
    model.train()
    opt = torch.optim.AdamW(model.parameters(), lr=config.learning_rate, weight_decay=config.weight_decay)
    history = []
    for step in range(steps):
        rng = np.random.default_rng([config.seed, step])
        picks = rng.integers(0, len(recs), size=config.batch_size)
        t = rng.integers(1, sched.T + 1, size=config.batch_size)
        masked = torch.from_numpy(rng.random(config.batch_size) < config.p_mask)
        g = torch.Generator().manual_seed(int(rng.integers(2**62)))
        b = make_batch(corpus, recs, picks, model.text_dim)
        x0n = model.normalize(b.x0)
        xt = q_sample(x0n, t, torch.randn(x0n.shape, generator=g), sched)
        pred = model(xt, torch.from_numpy(t), b.text, b.prev_motion, b.prev_text, masked,
                     b.frame_mask, b.prev_mask)
        out = batch_loss(model.denormalize(pred), b.x0, weights, b.frame_mask)
        if not torch.isfinite(out.total):
            raise TrainingError(f"non-finite loss at step {step}, batch ids {b.ids}")
        opt.zero_grad(set_to_none=True)
        out.total.backward()
        nn.utils.clip_grad_norm_(model.parameters(), config.grad_clip)
        opt.step()
        row = {"step": step, **out.as_floats()}
        history.append(row)
        if log_every and step % log_every == 0:
            log.info("denoiser step %d loss %.5f", step, row["total"])
    return TrainResult(model.eval(), history)


def smoothed(values, window: int = 100) -> float:
    v = np.asarray(values, dtype=np.float64)
    return float(v[-window:].mean())


def duration_targets(recs) -> tuple[list[str], np.ndarray]:
    """Distinct texts with the class of their (first-seen) frame count."""
    table: dict[str, int] = {}
    for r in recs:
        try:
            k = frames_to_class(r.n_frames)
        except ValueError as e:
            raise TrainingError(f"record {r.id}: {e}") from e
        table.setdefault(r.text, k)
    texts = list(table)
    return texts, np.array([table[s] - L_MIN for s in texts])


def train_duration(corpus: Corpus, train_ids, config: TrainConfig, steps: int | None = None,
                   text_dim: int | None = None) -> TrainResult:
    """Full-batch cross-entropy over the distinct training texts; one step is one epoch."""
    recs = _records(corpus, train_ids)
    steps = config.duration_steps if steps is None else steps
    text_dim = text_dim or config.model_config.text_dim
    texts, labels = duration_targets(recs)
    emb = embed_texts(texts, text_dim)
    y = torch.from_numpy(labels)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(config.seed)
        model = DurationPredictor(text_dim)
    opt = torch.optim.AdamW(model.parameters(), lr=config.duration_learning_rate,
                            weight_decay=config.weight_decay)
    history = []
    for step in range(steps):
        model.train()
        loss = nn.functional.cross_entropy(model(emb), y)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        history.append({"step": step, "loss": loss.item(), "accuracy": duration_accuracy(model, texts, labels)})
    return TrainResult(model.eval(), history)


def duration_accuracy(model: DurationPredictor, texts, labels) -> float:
    with torch.no_grad():
        pred = model(embed_texts(texts, model.text_dim)).argmax(-1).numpy()
    return float((pred == np.asarray(labels)).mean())


def contrastive_loss(m: torch.Tensor, t: torch.Tensor, texts, tau: float = 0.07) -> torch.Tensor:
    """Symmetric cross-entropy over in-batch pairs; rows with the same text are all positives."""
    logits = m @ t.T / tau
    same = torch.tensor([[a == b for b in texts] for a in texts], dtype=logits.dtype)
    target = same / same.sum(1, keepdim=True)
    return 0.5 * (-(target * logits.log_softmax(1)).sum(1).mean()
                  - (target * logits.log_softmax(0).T).sum(1).mean())


def retrieval_accuracy(evaluator: MotionTextEvaluator, clips, texts) -> float:
    """Fraction of motions whose nearest in-batch text feature carries the right text."""
    with torch.no_grad():
        x, mask = pad_clips(clips)
        m = evaluator.encode_motion(x, mask)
        t = evaluator.encode_text(embed_texts(texts, evaluator.text_dim))
        best = (m @ t.T).argmax(1).numpy()
    return float(np.mean([texts[j] == texts[i] for i, j in enumerate(best)]))


def train_evaluator(corpus: Corpus, train_ids, config: TrainConfig, steps: int | None = None) -> TrainResult:
    recs = _records(corpus, train_ids)
    steps = config.evaluator_steps if steps is None else steps
    if len({r.motif or r.text for r in recs}) < 2:
        log.warning("evaluator training set has a single class; the contrastive signal is degenerate")
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(config.seed)
        model = MotionTextEvaluator()
    mean, std = feature_stats([r.clip for r in recs])
    model.feat_mean.copy_(torch.from_numpy(mean))
    model.feat_std.copy_(torch.from_numpy(std))
    opt = torch.optim.AdamW(model.parameters(), lr=config.evaluator_learning_rate,
                            weight_decay=config.weight_decay)
    bs = min(config.batch_size, len(recs))
    history = []
    for step in range(steps):
        rng = np.random.default_rng([config.seed, step, 2])
        batch = [recs[i] for i in rng.choice(len(recs), size=bs, replace=False)]
        texts = [r.text for r in batch]
        model.train()
        x, mask = pad_clips([r.clip for r in batch])
        loss = contrastive_loss(model.encode_motion(x, mask),
                                model.encode_text(embed_texts(texts, model.text_dim)), texts)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        nn.utils.clip_grad_norm_(model.parameters(), config.grad_clip)
        opt.step()
        history.append({"step": step, "loss": loss.item()})
    return TrainResult(model.eval(), history)


@dataclass
class Checkpoint:
    denoiser: MotionDenoiser | None = None
    duration: DurationPredictor | None = None
    evaluator: MotionTextEvaluator | None = None
    schedule: dict = field(default_factory=lambda: {"T": 100, "beta_start": 1e-3, "beta_end": 0.2})
    corpus_fingerprint: str = ""
    train_config: dict = field(default_factory=dict)
    history: dict = field(default_factory=dict)

    def noise_schedule(self):
        s = self.schedule
        return build_linear_schedule(int(s["T"]), float(s["beta_start"]), float(s["beta_end"]))

    def components(self) -> dict:
        return {k: getattr(self, k) for k in ("denoiser", "duration", "evaluator") if getattr(self, k) is not None}


def _header(ckpt: Checkpoint) -> dict:
    h = {"schedule": ckpt.schedule, "corpus_fingerprint": ckpt.corpus_fingerprint,
         "train_config": ckpt.train_config, "history": ckpt.history, "components": {}}
    if ckpt.denoiser is not None:
        h["components"]["denoiser"] = ckpt.denoiser.config.to_dict()
    if ckpt.duration is not None:
        h["components"]["duration"] = {"text_dim": ckpt.duration.text_dim, "hidden": ckpt.duration.hidden}
    if ckpt.evaluator is not None:
        e = ckpt.evaluator
        h["components"]["evaluator"] = {"d_feat": e.d_feat, "hidden": e.hidden, "text_dim": e.text_dim}
    return h


def checkpoint_to_bytes(ckpt: Checkpoint) -> bytes:
    """magic, version, header length, JSON header (with tensor index), little-endian float32
    tensors in name order, then a sha256 of everything before it."""
    tensors = {}
    for comp, mod in ckpt.components().items():
        for name, v in mod.state_dict().items():
            tensors[f"{comp}.{name}"] = v.detach().cpu().to(torch.float32).numpy()
    head = _header(ckpt)
    head["tensors"] = [[k, list(tensors[k].shape)] for k in sorted(tensors)]
    hb = json.dumps(head, sort_keys=True).encode("utf-8")
    body = b"".join(np.ascontiguousarray(tensors[k], dtype="<f4").tobytes() for k in sorted(tensors))
    out = CKPT_MAGIC + struct.pack("<II", CKPT_VERSION, len(hb)) + hb + body
    return out + hashlib.sha256(out).digest()


def checkpoint_from_bytes(buf: bytes, name: str = "<bytes>", expected_fingerprint: str | None = None) -> Checkpoint:
    if len(buf) < 12 + 32 or buf[:4] != CKPT_MAGIC:
        raise CheckpointError(f"{name}: not a checkpoint file")
    version, n = struct.unpack_from("<II", buf, 4)
    if version != CKPT_VERSION:
        raise CheckpointError(f"{name}: checkpoint version {version} is not supported (reader version {CKPT_VERSION})")
    if hashlib.sha256(buf[:-32]).digest() != buf[-32:]:
        raise CheckpointError(f"{name}: checksum mismatch, file is corrupt")
    head = json.loads(buf[12:12 + n].decode("utf-8"))
    if expected_fingerprint is not None and head["corpus_fingerprint"] != expected_fingerprint:
        raise CheckpointError(f"{name}: trained on a different corpus (fingerprint mismatch)")
    pos = 12 + n
    state: dict[str, dict] = {}
    for key, shape in head["tensors"]:
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(buf, dtype="<f4", count=count, offset=pos).reshape(shape)
        pos += 4 * count
        comp, pname = key.split(".", 1)
        state.setdefault(comp, {})[pname] = torch.from_numpy(arr.astype(np.float32))
    if pos != len(buf) - 32:
        raise CheckpointError(f"{name}: tensor payload size mismatch")
    comps = head["components"]
    ck = Checkpoint(schedule=head["schedule"], corpus_fingerprint=head["corpus_fingerprint"],
                    train_config=head["train_config"], history=head["history"])
    if "denoiser" in comps:
        ck.denoiser = MotionDenoiser(DenoiserConfig(**comps["denoiser"]))
    if "duration" in comps:
        ck.duration = DurationPredictor(**comps["duration"])
    if "evaluator" in comps:
        ck.evaluator = MotionTextEvaluator(**comps["evaluator"])
    for comp, mod in ck.components().items():
        mod.load_state_dict(state.get(comp, {}))
        mod.eval()
    return ck


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    atomic_write_bytes(path, checkpoint_to_bytes(ckpt))


def load_checkpoint(path, expected_fingerprint: str | None = None) -> Checkpoint:
    try:
        buf = Path(path).read_bytes()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e
    return checkpoint_from_bytes(buf, str(path), expected_fingerprint)
