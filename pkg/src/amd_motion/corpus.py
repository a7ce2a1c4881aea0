"""Deterministic synthetic text-motion corpus.

Each record is one motif (walk, kick, wave, ...) rendered through forward kinematics on
the default skeleton and encoded into the 263-dim layout. Coherent chains are generated
as one continuous trajectory and split so that consecutive clips share their boundary
frame: the predecessor's last frame is the successor's first frame.
"""
from __future__ import annotations

import hashlib
import json
import logging
import math
import os
import shutil
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .motion_repr import (
    DEFAULT_SKELETON,
    InvalidClipError,
    MotionClip,
    SkeletonSpec,
    clip_from_bytes,
    clip_to_bytes,
    encode_motion,
    rot_y,
)

log = logging.getLogger(__name__)

META_NAME = "corpus.meta"
CLIP_DIR = "clips"
CORPUS_FORMAT_VERSION = 1

L_ARM_DOWN = -1.35
R_ARM_DOWN = 1.35


class CorpusError(RuntimeError):
    pass


@dataclass(frozen=True)
class MotifSpec:
    name: str
    duration_frames: int
    amplitude: float
    frequency: float  # cycles / second
    affected_joints: tuple[int, ...]

    def __post_init__(self):
        if self.duration_frames % 4 or not 40 <= self.duration_frames <= 200:
            raise ValueError(f"{self.name}: duration {self.duration_frames} must be a multiple of 4 in [40, 200]")
        if not self.amplitude > 0:
            raise ValueError(f"{self.name}: amplitude must be positive")
        if not self.affected_joints or not all(0 < j < 22 for j in self.affected_joints):
            raise ValueError(f"{self.name}: affected_joints must be non-empty valid non-root joints")


# name -> (template, base duration at speed 1, cycles per clip, affected joints)
MOTIFS: dict[str, tuple[str, int, float, tuple[int, ...]]] = {
    "walk": ("a person walks forward", 120, 3.0, (1, 2, 4, 5, 16, 17)),
    "kick_left": ("a person kicks with the left leg", 80, 1.0, (1, 4)),
    "wave": ("a person waves with the right hand", 100, 3.0, (17, 19)),
    "squat": ("a person squats down and stands up", 96, 1.0, (1, 2, 3, 4, 5, 7, 8)),
    "turn": ("a person turns around to the left", 80, 2.0, (1, 2)),
    "jump": ("a person jumps in place", 64, 1.0, (1, 2, 4, 5, 16, 17)),
    "punch_right": ("a person punches with the right arm", 72, 2.0, (17,)),
    "raise_arms": ("a person raises both arms", 88, 1.0, (16, 17)),
}
INTENSITIES = {"gently": 0.6, "": 1.0, "strongly": 1.3}
SPEEDS = {"quickly": 0.6, "": 1.0, "slowly": 1.5}


def motif_duration(name: str, speed: str = "") -> int:
    frames = MOTIFS[name][1] * SPEEDS[speed]
    return int(min(200, max(40, 4 * round(frames / 4))))


def make_text(name: str, intensity: str = "", speed: str = "") -> str:
    return " ".join(w for w in (MOTIFS[name][0], intensity, speed) if w)


def parse_text(text: str) -> tuple[str, str, str]:
    """Inverse of make_text: (motif, intensity, speed)."""
    words = text.split()
    speed = words.pop() if words and words[-1] in SPEEDS else ""
    intensity = words.pop() if words and words[-1] in INTENSITIES else ""
    base = " ".join(words)
    for name, (template, *_rest) in MOTIFS.items():
        if template == base:
            return name, intensity, speed
    raise KeyError(f"text does not match any motif template: {text!r}")


def all_texts(motifs=None) -> list[str]:
    motifs = list(MOTIFS) if motifs is None else list(motifs)
    return [make_text(m, i, s) for m in motifs for i in INTENSITIES for s in SPEEDS]


def make_motif(name: str, intensity: str = "", speed: str = "", fps: float = 20.0,
               jitter: float = 1.0) -> MotifSpec:
    _, _, cycles, joints = MOTIFS[name]
    frames = motif_duration(name, speed)
    return MotifSpec(name=name, duration_frames=frames, amplitude=INTENSITIES[intensity] * jitter,
                     frequency=cycles * fps / frames, affected_joints=joints)


def _smoothstep(x):
    x = np.clip(x, 0.0, 1.0)
    return x * x * (3.0 - 2.0 * x)


@dataclass
class MotifCurves:
    """Per-frame parameters of one motif: local joint angles (F, 22, 3) as
    (pitch about x, yaw about y, roll about z), root height offset, heading and forward
    displacement along the heading (both relative to the motif's own start)."""
    angles: np.ndarray
    height: np.ndarray
    heading: np.ndarray
    forward: np.ndarray


def motif_curves(spec: MotifSpec, fps: float = 20.0) -> MotifCurves:
    n = spec.duration_frames
    u = np.arange(n) / (n - 1)
    a = spec.amplitude
    cycles = spec.frequency * n / fps
    ph = 2 * np.pi * cycles * u
    ang = np.zeros((n, 22, 3))
    ang[:, 16, 2] = L_ARM_DOWN
    ang[:, 17, 2] = R_ARM_DOWN
    height = np.zeros(n)
    heading = np.zeros(n)
    forward = np.zeros(n)
    ramp = _smoothstep(u / 0.2)
    name = spec.name
    if name == "walk":
        ang[:, 1, 0] = -0.5 * a * np.sin(ph)
        ang[:, 2, 0] = 0.5 * a * np.sin(ph)
        ang[:, 4, 0] = 0.5 * a * np.sin(ph / 2) ** 2
        ang[:, 5, 0] = 0.5 * a * np.cos(ph / 2) ** 2 - 0.5 * a
        ang[:, 16, 1] = -0.3 * a * np.sin(ph)
        ang[:, 17, 1] = -0.3 * a * np.sin(ph)
        forward = 0.7 * a * cycles * u
    elif name == "kick_left":
        burst = np.sin(np.pi * u) ** 2
        ang[:, 1, 0] = -1.2 * a * burst
        ang[:, 4, 0] = 0.5 * a * burst
    elif name == "wave":
        ang[:, 17, 2] = R_ARM_DOWN - 2.5 * a * ramp
        ang[:, 19, 2] = 0.5 * a * np.sin(ph) * ramp
    elif name == "squat":
        b = np.sin(np.pi * u) ** 2
        hip, shin = 1.4 * a * b, 0.6 * a * b
        for j in (1, 2):
            ang[:, j, 0] = -hip
        for j in (4, 5):
            ang[:, j, 0] = hip + shin
        for j in (7, 8):
            ang[:, j, 0] = -shin
        ang[:, 3, 0] = 0.4 * a * b
        height = -(0.38 * (1 - np.cos(hip)) + 0.40 * (1 - np.cos(shin)))
        forward = -(0.38 * np.sin(hip) - 0.40 * np.sin(shin))
    elif name == "turn":
        heading = a * (np.pi / 2) * (u - np.sin(2 * np.pi * u) / (2 * np.pi))
        ang[:, 1, 0] = -0.15 * a * np.sin(ph)
        ang[:, 2, 0] = 0.15 * a * np.sin(ph)
    elif name == "jump":
        bump = np.sin(np.pi * np.clip((u - 0.25) / 0.5, 0.0, 1.0)) ** 2
        height = 0.3 * a * bump
        for j in (1, 2):
            ang[:, j, 0] = -0.8 * a * bump
        for j in (4, 5):
            ang[:, j, 0] = 1.0 * a * bump
        ang[:, 16, 2] = L_ARM_DOWN + 1.0 * a * bump
        ang[:, 17, 2] = R_ARM_DOWN - 1.0 * a * bump
    elif name == "punch_right":
        ang[:, 17, 1] = 1.4 * a * np.sin(np.pi * cycles * u) ** 2
    elif name == "raise_arms":
        up = _smoothstep(u / 0.4)
        ang[:, 16, 2] = L_ARM_DOWN + 2.5 * a * up
        ang[:, 17, 2] = R_ARM_DOWN - 2.5 * a * up
    else:
        raise KeyError(f"unknown motif {name!r}")
    return MotifCurves(ang, height, heading, forward)


def _rx(t):
    c, s = np.cos(t), np.sin(t)
    o, z = np.ones_like(t), np.zeros_like(t)
    return np.stack([np.stack([o, z, z], -1), np.stack([z, c, -s], -1), np.stack([z, s, c], -1)], -2)


def _ry(t):
    c, s = np.cos(t), np.sin(t)
    o, z = np.ones_like(t), np.zeros_like(t)
    return np.stack([np.stack([c, z, s], -1), np.stack([z, o, z], -1), np.stack([-s, z, c], -1)], -2)


def _rz(t):
    c, s = np.cos(t), np.sin(t)
    o, z = np.ones_like(t), np.zeros_like(t)
    return np.stack([np.stack([c, -s, z], -1), np.stack([s, c, z], -1), np.stack([z, z, o], -1)], -2)


def local_rotations(angles: np.ndarray) -> np.ndarray:
    """(..., 3) angles -> Rz(roll) @ Ry(yaw) @ Rx(pitch)."""
    return _rz(angles[..., 2]) @ _ry(angles[..., 1]) @ _rx(angles[..., 0])


def forward_kinematics(local_rot: np.ndarray, heading: np.ndarray, root_pos: np.ndarray,
                       skeleton: SkeletonSpec = DEFAULT_SKELETON) -> np.ndarray:
    """local_rot (F, 22, 3, 3) with the root entry ignored; returns positions (F, 22, 3)."""
    f = local_rot.shape[0]
    glob = np.zeros((f, 22, 3, 3))
    pos = np.zeros((f, 22, 3))
    glob[:, 0] = _ry(heading)
    pos[:, 0] = root_pos
    offsets = np.asarray(skeleton.rest_offsets)
    for j in range(1, 22):
        p = skeleton.parents[j]
        glob[:, j] = glob[:, p] @ local_rot[:, j]
        pos[:, j] = pos[:, p] + glob[:, p] @ offsets[j]
    return pos


@dataclass
class _ChainState:
    angles: np.ndarray
    height: float
    heading: float
    root: np.ndarray


def render_segment(spec: MotifSpec, prev: _ChainState | None = None, fps: float = 20.0,
                   skeleton: SkeletonSpec = DEFAULT_SKELETON, blend: float = 0.3):
    """Render one motif; when ``prev`` is given the motif starts exactly at the previous
    segment's final state and fades into its own pattern over the first ``blend`` fraction."""
    cur = motif_curves(spec, fps)
    n = spec.duration_frames
    ang = cur.angles.copy()
    height = skeleton.rest_root_height + cur.height
    heading = cur.heading - cur.heading[0]
    forward = cur.forward - cur.forward[0]
    h0, root0 = 0.0, np.zeros(3)
    if prev is not None:
        u = np.arange(n) / (n - 1)
        fade = 0.5 * (1 + np.cos(np.pi * np.clip(u / blend, 0.0, 1.0)))
        ang += (prev.angles - ang[0])[None] * fade[:, None, None]
        height = height + (prev.height - height[0]) * fade
        h0, root0 = prev.heading, prev.root
    heading = heading + h0
    root = np.zeros((n, 3))
    root[0] = root0
    steps = np.zeros((n - 1, 3))
    steps[:, 2] = np.diff(forward)
    world_steps = rot_y(heading[:-1], steps)
    root[1:] = root0 + np.cumsum(world_steps, axis=0)
    root[:, 1] = height
    rot = local_rotations(ang)
    pos = forward_kinematics(rot, heading, root, skeleton)
    end = _ChainState(ang[-1].copy(), float(height[-1]), float(heading[-1]), root[-1].copy())
    return pos, heading, rot[:, 1:], end


@dataclass
class CorpusRecord:
    id: str
    text: str
    clip: MotionClip
    prev_id: str | None = None
    motif: str = ""
    amplitude: float = 1.0

    @property
    def n_frames(self) -> int:
        return self.clip.n_frames


@dataclass
class Corpus:
    records: list[CorpusRecord]
    fps: float = 20.0
    seed: int = 0
    by_id: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        self.by_id = {r.id: r for r in self.records}
        if len(self.by_id) != len(self.records):
            raise CorpusError("duplicate record ids")
        for r in self.records:
            if r.prev_id is not None and r.prev_id not in self.by_id:
                raise CorpusError(f"record {r.id} references missing predecessor {r.prev_id}")

    def __len__(self):
        return len(self.records)

    def __getitem__(self, rid: str) -> CorpusRecord:
        return self.by_id[rid]

    def subset(self, ids) -> list[CorpusRecord]:
        return [self.by_id[i] for i in ids]


def _group_sizes(n: int, n_linked: int) -> list[int]:
    """Chain sizes (1, 2 or 3) for n records with exactly n_linked prev_id links."""
    k = max(n_linked // 4, 2 * n_linked - n)
    p = n_linked - 2 * k
    if p < 0:
        raise ValueError(f"cannot link {n_linked} of {n} records with chains of length <= 3")
    s = n - 3 * k - 2 * p
    return [3] * k + [2] * p + [1] * s


def generate_corpus(n_records: int, seed: int = 0, fps: float = 20.0, motifs=None,
                    pair_fraction: float = 0.5, skeleton: SkeletonSpec = DEFAULT_SKELETON) -> Corpus:
    """Generate ``n_records`` clips; ``floor(n_records * pair_fraction)`` carry a prev_id."""
    if n_records < 2:
        raise ValueError("n_records must be >= 2")
    motifs = list(MOTIFS) if motifs is None else list(motifs)
    if not motifs:
        raise ValueError("empty motif set")
    for m in motifs:
        if m not in MOTIFS:
            raise ValueError(f"unknown motif {m!r}")
    rng = np.random.default_rng(int(seed) % 2**64)
    sizes = _group_sizes(n_records, int(math.floor(n_records * pair_fraction + 1e-9)))
    rng.shuffle(sizes)
    records: list[CorpusRecord] = []
    intensities, speeds = list(INTENSITIES), list(SPEEDS)
    for size in sizes:
        prev_state, prev_id, prev_motif = None, None, None
        for _ in range(size):
            choices = [m for m in motifs if m != prev_motif] or motifs
            name = choices[rng.integers(len(choices))]
            intensity = intensities[rng.integers(len(intensities))]
            speed = speeds[rng.integers(len(speeds))]
            jitter = float(rng.uniform(0.9, 1.1))
            spec = make_motif(name, intensity, speed, fps, jitter)
            pos, heading, rot, prev_state = render_segment(spec, prev_state, fps, skeleton)
            clip = encode_motion(pos, heading, rot, skeleton, fps)
            rid = f"r{len(records):05d}"
            records.append(CorpusRecord(rid, make_text(name, intensity, speed), clip, prev_id,
                                        name, spec.amplitude))
            prev_id, prev_motif = rid, name
    return Corpus(records, fps=float(fps), seed=int(seed))


def _meta_lines(corpus: Corpus) -> list[str]:
    head = {"format": "amd-corpus", "version": CORPUS_FORMAT_VERSION, "fps": corpus.fps,
            "seed": corpus.seed, "n_records": len(corpus)}
    lines = [json.dumps(head, sort_keys=True)]
    for r in corpus.records:
        lines.append(json.dumps({"id": r.id, "text": r.text, "frames": r.n_frames, "prev_id": r.prev_id,
                                 "motif": r.motif, "amplitude": r.amplitude}, sort_keys=True))
    return lines


def corpus_fingerprint(corpus: Corpus) -> str:
    h = hashlib.sha256()
    for line in _meta_lines(corpus):
        h.update(line.encode("utf-8") + b"\n")
    for r in corpus.records:
        h.update(clip_to_bytes(r.clip))
    return h.hexdigest()


def save_corpus(corpus: Corpus, directory) -> Path:
    """Write atomically: build in a sibling temp dir, then rename into place."""
    directory = Path(directory)
    if directory.exists() and any(directory.iterdir()) and not (directory / META_NAME).exists():
        raise CorpusError(f"{directory} exists and is not a corpus directory; refusing to overwrite")
    directory.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=f".{directory.name}.", dir=directory.parent))
    try:
        (tmp / CLIP_DIR).mkdir()
        for r in corpus.records:
            (tmp / CLIP_DIR / f"{r.id}.amdm").write_bytes(clip_to_bytes(r.clip))
        (tmp / META_NAME).write_text("\n".join(_meta_lines(corpus)) + "\n", encoding="utf-8")
        if directory.exists():
            shutil.rmtree(directory)
        os.replace(tmp, directory)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    return directory


def load_corpus(directory) -> Corpus:
    directory = Path(directory)
    meta = directory / META_NAME
    try:
        lines = meta.read_text(encoding="utf-8").splitlines()
    except OSError as e:
        raise CorpusError(f"cannot read {meta}: {e}") from e
    try:
        head = json.loads(lines[0])
        rows = [json.loads(line) for line in lines[1:] if line.strip()]
    except (IndexError, json.JSONDecodeError) as e:
        raise CorpusError(f"malformed corpus metadata in {meta}: {e}") from e
    if head.get("format") != "amd-corpus" or head.get("version") != CORPUS_FORMAT_VERSION:
        raise CorpusError(f"{meta}: unsupported corpus header {head}")
    fps = float(head["fps"])
    records = []
    for row in rows:
        try:
            rid = row["id"]
            path = directory / CLIP_DIR / f"{rid}.amdm"
        except (KeyError, TypeError) as e:
            raise CorpusError(f"malformed metadata record {row!r}") from e
        try:
            buf = path.read_bytes()
        except OSError as e:
            raise CorpusError(f"record {rid}: missing clip file {path}") from e
        try:
            clip, used = clip_from_bytes(buf, fps=fps, name=f"record {rid}")
        except InvalidClipError as e:
            raise CorpusError(str(e)) from e
        if used != len(buf) or clip.n_frames != row["frames"]:
            raise CorpusError(f"record {rid}: clip header mismatch with metadata")
        records.append(CorpusRecord(rid, row["text"], clip, row.get("prev_id"), row.get("motif", ""),
                                    float(row.get("amplitude", 1.0))))
    if len(records) != head.get("n_records", len(records)):
        raise CorpusError(f"{meta}: header announces {head['n_records']} records, found {len(records)}")
    return Corpus(records, fps=fps, seed=int(head.get("seed", 0)))


@dataclass
class CorpusSplit:
    train: list[str]
    test: list[str]
    validation: list[str]


def chains(corpus: Corpus) -> list[list[str]]:
    """Connected components of the prev_id links, in corpus order."""
    root_of = {}
    for r in corpus.records:
        root_of[r.id] = root_of[r.prev_id] if r.prev_id is not None else r.id
    groups: dict[str, list[str]] = {}
    for r in corpus.records:
        groups.setdefault(root_of[r.id], []).append(r.id)
    return list(groups.values())


def _target_sizes(n: int, ratios) -> list[int]:
    raw = [round(n * r, 9) for r in ratios]
    sizes = [int(math.floor(x)) for x in raw]
    order = sorted(range(len(raw)), key=lambda i: (-(raw[i] - sizes[i]), i))
    for i in order[: n - sum(sizes)]:
        sizes[i] += 1
    return sizes


def _pick_subset(groups: list[list[str]], target: int) -> set[int]:
    """Indices of groups whose sizes sum to ``target`` (or the closest sum below it)."""
    reach = {0: ()}
    for gi, g in enumerate(groups):
        for s, chosen in list(reach.items()):
            t = s + len(g)
            if t <= target and t not in reach:
                reach[t] = chosen + (gi,)
        if target in reach:
            break
    best = max(reach)
    return set(reach[best])


def split_corpus(corpus: Corpus, ratios=(0.85, 0.10, 0.05), seed: int = 0) -> CorpusSplit:
    """Chains never straddle splits; sizes hit round(n * ratio) whenever chain sizes allow."""
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or any(r <= 0 for r in ratios) or abs(sum(ratios) - 1) > 1e-9:
        raise ValueError(f"ratios must be three positive numbers summing to 1, got {ratios}")
    n = len(corpus)
    sizes = _target_sizes(n, ratios)
    if min(sizes) < 1:
        raise ValueError(f"corpus of {n} records is too small for ratios {ratios}")
    groups = chains(corpus)
    rng = np.random.default_rng(int(seed) % 2**64)
    order = rng.permutation(len(groups))
    groups = [groups[i] for i in order]
    test_idx = _pick_subset(groups, sizes[1])
    rest = [g for i, g in enumerate(groups) if i not in test_idx]
    val_idx = _pick_subset(rest, sizes[2])
    test = [rid for i in sorted(test_idx) for rid in groups[i]]
    val = [rid for i in sorted(val_idx) for rid in rest[i]]
    train = [rid for i, g in enumerate(rest) if i not in val_idx for rid in g]
    if not test or not val or not train:
        raise ValueError(f"corpus of {n} records cannot honour all three splits")
    return CorpusSplit(train=train, test=test, validation=val)
