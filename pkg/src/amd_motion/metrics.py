"""Text-to-motion evaluation metrics and a small contrastive text-motion evaluator."""
from __future__ import annotations

import itertools
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
from torch import nn

from .conditioning import embed_texts
from .motion_repr import FEAT_DIM

D_FEAT = 32
_PROJECTION_SEED = 20230601
METRIC_KEYS = ("fid", "r_precision_top3", "multimodal_dist", "diversity", "multimodality")


def clip_statistics(frames: np.ndarray) -> np.ndarray:
    """Concatenated per-channel temporal mean, std and mean absolute frame-to-frame change."""
    x = np.asarray(frames, dtype=np.float64)
    vel = np.abs(np.diff(x, axis=0)).mean(0) if len(x) > 1 else np.zeros(x.shape[1])
    return np.concatenate([x.mean(0), x.std(0), vel])


def _projection(d_feat: int) -> np.ndarray:
    rng = np.random.default_rng(_PROJECTION_SEED + d_feat)
    return rng.standard_normal((d_feat, 3 * FEAT_DIM)) / math.sqrt(3 * FEAT_DIM)


class MotionTextEvaluator(nn.Module):
    """Motion encoder (per-frame MLP, masked mean/max pooling, length) and text encoder
    (MLP over hashed text embeddings) into a shared unit-norm feature space."""

    def __init__(self, d_feat: int = D_FEAT, hidden: int = 128, text_dim: int = 64):
        super().__init__()
        self.d_feat, self.hidden, self.text_dim = d_feat, hidden, text_dim
        self.frame_mlp = nn.Sequential(nn.Linear(FEAT_DIM, hidden), nn.GELU(), nn.Linear(hidden, hidden))
        self.motion_out = nn.Linear(2 * hidden + 1, d_feat)
        self.text_mlp = nn.Sequential(nn.Linear(text_dim, hidden), nn.GELU(), nn.Linear(hidden, d_feat))
        self.register_buffer("feat_mean", torch.zeros(FEAT_DIM))
        self.register_buffer("feat_std", torch.ones(FEAT_DIM))

    def encode_motion(self, x: torch.Tensor, frame_mask: torch.Tensor) -> torch.Tensor:
        h = self.frame_mlp((x - self.feat_mean) / self.feat_std)
        m = frame_mask[..., None].to(h.dtype)
        n = m.sum(1).clamp(min=1)
        mean = (h * m).sum(1) / n
        peak = h.masked_fill(~frame_mask[..., None], -1e9).max(1).values
        z = self.motion_out(torch.cat([mean, peak, n / 200.0], dim=-1))
        return nn.functional.normalize(z, dim=-1)

    def encode_text(self, emb: torch.Tensor) -> torch.Tensor:
        return nn.functional.normalize(self.text_mlp(emb), dim=-1)

    @torch.no_grad()
    def motion_features(self, clips) -> np.ndarray:
        x, mask = pad_clips(clips)
        return self.encode_motion(x, mask).double().numpy()

    @torch.no_grad()
    def text_features(self, texts) -> np.ndarray:
        return self.encode_text(embed_texts(texts, self.text_dim)).double().numpy()


def pad_clips(clips) -> tuple[torch.Tensor, torch.Tensor]:
    arrays = [np.asarray(getattr(c, "frames", c), dtype=np.float32) for c in clips]
    f = max(len(a) for a in arrays)
    x = np.zeros((len(arrays), f, FEAT_DIM), dtype=np.float32)
    mask = np.zeros((len(arrays), f), dtype=bool)
    for i, a in enumerate(arrays):
        x[i, :len(a)] = a
        mask[i, :len(a)] = True
    return torch.from_numpy(x), torch.from_numpy(mask)


def extract_motion_features(clip, mode: str = "deterministic", evaluator: MotionTextEvaluator | None = None,
                            d_feat: int = D_FEAT) -> np.ndarray:
    if mode == "deterministic":
        return _projection(d_feat) @ clip_statistics(getattr(clip, "frames", clip))
    if mode == "learned":
        if evaluator is None:
            raise ValueError("learned features need an evaluator")
        return evaluator.motion_features([clip])[0]
    raise ValueError(f"unknown feature mode {mode!r}")


def motion_features(clips, mode: str = "deterministic", evaluator=None, d_feat: int = D_FEAT) -> np.ndarray:
    if mode == "learned":
        if evaluator is None:
            raise ValueError("learned features need an evaluator")
        return evaluator.motion_features(clips)
    return np.stack([extract_motion_features(c, mode, None, d_feat) for c in clips])


def _psd_sqrt(a: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh((a + a.T) / 2)
    return (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T


def fid(real_feats, gen_feats) -> float:
    """Frechet distance between Gaussian fits of two feature sets."""
    r = np.asarray(real_feats, dtype=np.float64)
    g = np.asarray(gen_feats, dtype=np.float64)
    if r.ndim != 2 or g.ndim != 2 or r.shape[1] != g.shape[1]:
        raise ValueError(f"feature dimension mismatch: {r.shape} vs {g.shape}")
    if len(r) < 2 or len(g) < 2:
        raise ValueError("each feature set needs at least 2 samples")
    mu_r, mu_g = r.mean(0), g.mean(0)
    cov_r = np.atleast_2d(np.cov(r, rowvar=False))
    cov_g = np.atleast_2d(np.cov(g, rowvar=False))
    root_r = _psd_sqrt(cov_r)
    inner = root_r @ cov_g @ root_r
    w = np.linalg.eigvalsh((inner + inner.T) / 2)
    tr_sqrt = np.sqrt(np.clip(w, 0.0, None)).sum()
    return float(((mu_r - mu_g) ** 2).sum() + np.trace(cov_r) + np.trace(cov_g) - 2 * tr_sqrt)


def diversity(feats, pairs: int = 50, seed: int = 0) -> float:
    """Mean distance over ``pairs`` disjoint random index pairs."""
    x = np.asarray(feats, dtype=np.float64)
    if len(x) < 2 * pairs or pairs < 1:
        raise ValueError(f"need at least {2 * pairs} features for {pairs} pairs, got {len(x)}")
    perm = np.random.default_rng(seed).permutation(len(x))
    a, b = x[perm[:pairs]], x[perm[pairs:2 * pairs]]
    return float(np.linalg.norm(a - b, axis=1).mean())


def multimodality(per_text_feats: dict, seed: int = 0, max_pairs: int | None = None) -> float:
    """Mean pairwise distance between generations of the same text, averaged over texts.

    All pairs are used unless ``max_pairs`` caps them (then a seeded subset is drawn).
    """
    if not per_text_feats:
        raise ValueError("no texts")
    rng = np.random.default_rng(seed)
    means = []
    for text, feats in per_text_feats.items():
        x = np.asarray(feats, dtype=np.float64)
        if len(x) < 2:
            raise ValueError(f"text {text!r} has fewer than 2 generations")
        pairs = list(itertools.combinations(range(len(x)), 2))
        if max_pairs is not None and len(pairs) > max_pairs:
            pick = rng.choice(len(pairs), size=max_pairs, replace=False)
            pairs = [pairs[i] for i in sorted(pick)]
        i, j = np.array(pairs).T
        means.append(np.linalg.norm(x[i] - x[j], axis=1).mean())
    return float(np.mean(means))


def r_precision_from_features(motion_feats, text_feats, true_index, pool_size: int = 32,
                              seed: int = 0, top_k: int = 3) -> tuple[float, float]:
    """Top-k retrieval rate of each motion's true text among ``pool_size - 1`` random other
    texts, plus the mean motion-to-true-text distance.

    ``text_feats`` holds one row per distinct candidate text; ``true_index[i]`` is the row of
    motion i's text.
    """
    m = np.asarray(motion_feats, dtype=np.float64)
    t = np.asarray(text_feats, dtype=np.float64)
    idx = np.asarray(true_index)
    if len(t) < pool_size:
        raise ValueError(f"need at least {pool_size} distinct texts, got {len(t)}")
    rng = np.random.default_rng(seed)
    hits, dists = 0, []
    others = np.arange(len(t))
    for i in range(len(m)):
        cand = rng.choice(np.delete(others, idx[i]), size=pool_size - 1, replace=False)
        d_true = np.linalg.norm(m[i] - t[idx[i]])
        d_other = np.linalg.norm(t[cand] - m[i], axis=1)
        hits += int((d_other < d_true).sum() < top_k)
        dists.append(d_true)
    return hits / len(m), float(np.mean(dists))


def r_precision_and_mmdist(pairs, evaluator, pool_size: int = 32, seed: int = 0,
                           text_universe=None) -> dict:
    texts = [p[0] for p in pairs]
    universe = sorted(set(texts) | set(text_universe or ()))
    pos = {s: i for i, s in enumerate(universe)}
    tf = evaluator.text_features(universe)
    mf = evaluator.motion_features([p[1] for p in pairs])
    r, mm = r_precision_from_features(mf, tf, [pos[s] for s in texts], pool_size, seed)
    return {"r_precision_top3": r, "multimodal_dist": mm}


@dataclass
class MetricReport:
    fid: float
    r_precision_top3: float
    multimodal_dist: float
    diversity: float
    multimodality: float | None
    intervals: dict = field(default_factory=dict)
    counts: dict = field(default_factory=dict)
    seeds: list = field(default_factory=list)
    per_rep: list = field(default_factory=list)

    def metrics(self) -> dict:
        return {k: getattr(self, k) for k in METRIC_KEYS}

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        def clean(v):
            if isinstance(v, float) and not math.isfinite(v):
                return None
            if isinstance(v, dict):
                return {k: clean(x) for k, x in v.items()}
            if isinstance(v, list):
                return [clean(x) for x in v]
            return v
        return json.dumps(clean(self.to_dict()), indent=2, sort_keys=True) + "\n"

    def to_csv(self) -> str:
        lines = ["rep,seed," + ",".join(METRIC_KEYS)]
        for i, row in enumerate(self.per_rep):
            vals = ["" if row[k] is None else f"{row[k]:.6f}" for k in METRIC_KEYS]
            lines.append(f"{i},{row['seed']}," + ",".join(vals))
        return "\n".join(lines) + "\n"


def _interval(values) -> float:
    v = np.asarray([x for x in values if x is not None], dtype=np.float64)
    if len(v) < 2:
        return 0.0
    return float(1.96 * v.std(ddof=1) / math.sqrt(len(v)))


def evaluate_suite(real_clips, generated, evaluator: MotionTextEvaluator | None = None, seed: int = 0,
                   reps: int = 5, pool_size: int = 32, diversity_pairs: int = 50,
                   text_universe=None, feature_mode: str | None = None) -> MetricReport:
    """All five metrics for ``generated`` = [(text, clip), ...] against ``real_clips``.

    FID and Diversity use learned features when an evaluator is given, deterministic
    features otherwise; R-Precision and MultiModal Dist need the evaluator. Each repetition
    redraws the random pools and pairs; reported values are means over repetitions.
    """
    if not generated or not real_clips:
        raise ValueError("need non-empty real and generated sets")
    mode = feature_mode or ("learned" if evaluator is not None else "deterministic")
    real_f = motion_features(real_clips, mode, evaluator)
    gen_f = motion_features([c for _, c in generated], mode, evaluator)
    groups: dict[str, list] = {}
    for (text, _), f in zip(generated, gen_f):
        groups.setdefault(text, []).append(f)
    multi = {k: v for k, v in groups.items() if len(v) >= 2}
    pairs_n = max(1, min(diversity_pairs, len(gen_f) // 2))
    universe = sorted({t for t, _ in generated} | set(text_universe or ()))
    pool = min(pool_size, len(universe))
    rng = np.random.default_rng(seed)
    rows = []
    for _ in range(reps):
        s = int(rng.integers(2**31))
        row = {"seed": s, "fid": fid(real_f, gen_f), "diversity": diversity(gen_f, pairs_n, s),
               "multimodality": multimodality(multi, s) if multi else None}
        if evaluator is not None and pool >= 2:
            row.update(r_precision_and_mmdist(generated, evaluator, pool, s, universe))
        else:
            row.update(r_precision_top3=float("nan"), multimodal_dist=float("nan"))
        rows.append(row)

    def mean(k):
        vals = [r[k] for r in rows if r[k] is not None]
        return float(np.mean(vals)) if vals else None

    return MetricReport(
        **{k: mean(k) for k in METRIC_KEYS},
        intervals={k: _interval([r[k] for r in rows]) for k in METRIC_KEYS},
        counts={"real": len(real_f), "generated": len(gen_f), "texts": len(universe), "pool_size": pool,
                "diversity_pairs": pairs_n, "multimodality_texts": len(multi), "reps": reps,
                "feature_mode": mode},
        seeds=[r["seed"] for r in rows], per_rep=rows)
