"""HumanML3D-style 263-dim motion features.

Per-frame channel layout (velocities are per frame, not per second)::

    0         root yaw angular velocity (rad/frame)
    1:3       root linear velocity, root-local (x, z) (m/frame)
    3         root height (m)
    4:67      21 non-root joints, root-relative positions (m)
              x/z are relative to the root and heading-aligned, y is absolute height
    67:193    21 non-root joint local rotations, continuous 6D form
    193:259   22 joint velocities in the heading frame (m/frame)
    259:263   foot contact labels (l_ankle, l_toe, r_ankle, r_toe)
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

FEAT_DIM = 263
N_JOINTS = 22

ROOT_YAW = slice(0, 1)
ROOT_VEL = slice(1, 3)
ROOT_HEIGHT = slice(3, 4)
RIC = slice(4, 67)
ROT6D = slice(67, 193)
JOINT_VEL = slice(193, 259)
CONTACT = slice(259, 263)

CLIP_MAGIC = b"AMDM"
CLIP_VERSION = 1
_HEADER = struct.Struct("<4sIII")


class InvalidClipError(ValueError):
    pass


@dataclass(frozen=True)
class SkeletonSpec:
    parents: tuple[int, ...]
    foot_joints: tuple[int, int, int, int]
    rest_offsets: np.ndarray = field(repr=False)
    rest_root_height: float = 0.91

    @property
    def joint_count(self) -> int:
        return len(self.parents)

    def __post_init__(self):
        if self.joint_count != N_JOINTS:
            raise ValueError(f"skeleton must have {N_JOINTS} joints, got {self.joint_count}")
        roots = [j for j, p in enumerate(self.parents) if p < 0]
        if len(roots) != 1:
            raise ValueError("skeleton needs exactly one root")
        for j in range(self.joint_count):
            seen, k = set(), j
            while self.parents[k] >= 0:
                if k in seen or not 0 <= self.parents[k] < self.joint_count:
                    raise ValueError(f"parent graph is not a tree at joint {j}")
                seen.add(k)
                k = self.parents[k]
        if len(set(self.foot_joints)) != 4 or not all(0 <= f < N_JOINTS for f in self.foot_joints):
            raise ValueError("foot_joints must be 4 distinct valid joint indices")
        if np.shape(self.rest_offsets) != (N_JOINTS, 3):
            raise ValueError("rest_offsets must be 22x3")


# HumanML3D kinematic tree: pelvis, hips, spine, knees, ankles, toes, neck, collars, head, arms.
_PARENTS = (-1, 0, 0, 0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 9, 9, 12, 13, 14, 16, 17, 18, 19)
# y up, z forward, x to the character's left
_OFFSETS = np.array([
    [0.0, 0.0, 0.0],
    [0.06, -0.09, 0.0], [-0.06, -0.09, 0.0], [0.0, 0.11, 0.0],
    [0.0, -0.38, 0.0], [0.0, -0.38, 0.0], [0.0, 0.13, 0.0],
    [0.0, -0.40, 0.0], [0.0, -0.40, 0.0], [0.0, 0.06, 0.0],
    [0.0, -0.04, 0.12], [0.0, -0.04, 0.12], [0.0, 0.21, 0.0],
    [0.07, 0.12, 0.0], [-0.07, 0.12, 0.0], [0.0, 0.10, 0.03],
    [0.12, 0.03, 0.0], [-0.12, 0.03, 0.0], [0.26, 0.0, 0.0],
    [-0.26, 0.0, 0.0], [0.25, 0.0, 0.0], [-0.25, 0.0, 0.0],
])

DEFAULT_SKELETON = SkeletonSpec(parents=_PARENTS, foot_joints=(7, 10, 8, 11), rest_offsets=_OFFSETS)


@dataclass
class MotionClip:
    frames: np.ndarray
    fps: float = 20.0

    @property
    def n_frames(self) -> int:
        return int(self.frames.shape[0])

    def __eq__(self, other):
        if not isinstance(other, MotionClip):
            return NotImplemented
        return (self.fps == other.fps and self.frames.dtype == other.frames.dtype
                and np.array_equal(self.frames, other.frames))


@dataclass
class GlobalPose:
    positions: np.ndarray  # (F, 22, 3) world, meters
    heading: np.ndarray  # (F,) radians, unwrapped


def _as_frames(clip) -> np.ndarray:
    return clip.frames if isinstance(clip, MotionClip) else np.asarray(clip)


def validate_clip(clip) -> MotionClip:
    """Raise InvalidClipError on the first violated invariant, else return the clip."""
    x = _as_frames(clip)
    if x.ndim != 2:
        raise InvalidClipError(f"clip must be 2-D (frames x features), got shape {x.shape}")
    if x.shape[1] != FEAT_DIM:
        raise InvalidClipError(f"feature dimension {x.shape[1]} ≠ {FEAT_DIM}")
    if x.shape[0] < 1:
        raise InvalidClipError("clip has no frames")
    if not np.all(np.isfinite(x)):
        bad = np.argwhere(~np.isfinite(x))[0]
        raise InvalidClipError(f"non-finite value at frame {bad[0]}, channel {bad[1]}")
    c = x[:, CONTACT]
    if np.any((c < 0) | (c > 1)):
        bad = np.argwhere((c < 0) | (c > 1))[0]
        raise InvalidClipError(
            f"contact out of range at frame {bad[0]}, channel {CONTACT.start + bad[1]}: {c[bad[0], bad[1]]}")
    return clip if isinstance(clip, MotionClip) else MotionClip(x)


def rot_y(angle: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Rotate vectors ``v[..., 3]`` about +y by ``angle`` (broadcast over leading dims)."""
    c, s = np.cos(angle), np.sin(angle)
    x, y, z = v[..., 0], v[..., 1], v[..., 2]
    return np.stack([c * x + s * z, y, -s * x + c * z], axis=-1)


def recover_root(frames: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Integrate root channels: returns (heading (F,), root position (F, 3))."""
    x = np.asarray(frames, dtype=np.float64)
    f = x.shape[0]
    heading = np.zeros(f)
    heading[1:] = np.cumsum(x[:-1, 0])
    vel = np.zeros((f, 3))
    vel[:, 0] = x[:, 1]
    vel[:, 2] = x[:, 2]
    step = rot_y(heading, vel)
    root = np.zeros((f, 3))
    root[1:] = np.cumsum(step[:-1], axis=0)
    root[:, 1] = x[:, 3]
    return heading, root


def recover_positions(clip, skeleton: SkeletonSpec = DEFAULT_SKELETON) -> GlobalPose:
    x = _as_frames(validate_clip(clip)).astype(np.float64)
    heading, root = recover_root(x)
    rel = x[:, RIC].reshape(-1, N_JOINTS - 1, 3)
    world = rot_y(heading[:, None], rel)
    world[..., 0] += root[:, None, 0]
    world[..., 2] += root[:, None, 2]
    positions = np.concatenate([root[:, None, :], world], axis=1)
    return GlobalPose(positions=positions, heading=heading)


def default_vel_thresh(fps: float = 20.0) -> float:
    return 0.002 * (20.0 / fps)


def detect_foot_contacts(pose: GlobalPose, skeleton: SkeletonSpec = DEFAULT_SKELETON,
                         vel_thresh: float | None = None, height_thresh: float = 0.05,
                         fps: float = 20.0) -> np.ndarray:
    """Binary (F, 4) contact labels: foot still (strictly below vel_thresh) and low."""
    if vel_thresh is None:
        vel_thresh = default_vel_thresh(fps)
    if vel_thresh <= 0 or height_thresh <= 0:
        raise ValueError("contact thresholds must be positive")
    feet = np.asarray(pose.positions)[:, list(skeleton.foot_joints), :]
    f = feet.shape[0]
    low = feet[..., 1] < height_thresh
    if f == 1:
        return low.astype(np.float64)
    disp = np.linalg.norm(feet[1:] - feet[:-1], axis=-1)
    labels = np.empty((f, 4), dtype=bool)
    labels[:-1] = (disp < vel_thresh) & low[:-1]
    labels[-1] = labels[-2]
    return labels.astype(np.float64)


def junction_gap(a, b, skeleton: SkeletonSpec = DEFAULT_SKELETON) -> float:
    """Largest joint distance between a's last pose and b's first pose.

    b is re-rooted so that it continues a's trajectory: its first-frame root is put at a's
    last root (x, z) and its heading frame is rotated onto a's last heading.
    """
    pa = recover_positions(a, skeleton)
    pb = recover_positions(b, skeleton)
    last = pa.positions[-1]
    h = pa.heading[-1]
    aligned = rot_y(h, pb.positions[0])
    aligned[:, 0] += last[0, 0]
    aligned[:, 2] += last[0, 2]
    return float(np.max(np.linalg.norm(last - aligned, axis=-1)))


def matrix_to_6d(rot: np.ndarray) -> np.ndarray:
    """First two columns of each 3x3 rotation, column-major: (..., 3, 3) -> (..., 6)."""
    return np.concatenate([rot[..., :, 0], rot[..., :, 1]], axis=-1)


def encode_motion(positions: np.ndarray, heading: np.ndarray, local_rot: np.ndarray,
                  skeleton: SkeletonSpec = DEFAULT_SKELETON, fps: float = 20.0,
                  vel_thresh: float | None = None, height_thresh: float = 0.05) -> MotionClip:
    """Encode world joint positions (F, 22, 3), root heading (F,) and non-root local
    rotations (F, 21, 3, 3) into a float32 clip.

    The clip is canonicalised to start at the origin with zero heading. Contact labels are
    computed from the positions recovered out of the quantised clip, so that
    ``detect_foot_contacts(recover_positions(clip))`` reproduces them exactly.
    """
    p = np.asarray(positions, dtype=np.float64).copy()
    h = np.asarray(heading, dtype=np.float64) - heading[0]
    f = p.shape[0]
    p[..., 0] -= positions[0, 0, 0]
    p[..., 2] -= positions[0, 0, 2]
    p = rot_y(-heading[0], p)

    out = np.zeros((f, FEAT_DIM))
    if f > 1:
        out[:-1, 0] = np.diff(h)
        out[-1, 0] = out[-2, 0]
        d = rot_y(-h[:-1], p[1:, 0] - p[:-1, 0])
        out[:-1, 1] = d[:, 0]
        out[:-1, 2] = d[:, 2]
        out[-1, 1:3] = out[-2, 1:3]
        jv = rot_y(-h[:-1, None], p[1:] - p[:-1])
        out[:-1, JOINT_VEL] = jv.reshape(f - 1, -1)
        out[-1, JOINT_VEL] = out[-2, JOINT_VEL]
    out[:, 3] = p[:, 0, 1]
    rel = p[:, 1:].copy()
    rel[..., 0] -= p[:, None, 0, 0]
    rel[..., 2] -= p[:, None, 0, 2]
    out[:, RIC] = rot_y(-h[:, None], rel).reshape(f, -1)
    out[:, ROT6D] = matrix_to_6d(local_rot).reshape(f, -1)

    clip = MotionClip(out.astype(np.float32), fps=float(fps))
    pose = recover_positions(clip, skeleton)
    clip.frames[:, CONTACT] = detect_foot_contacts(pose, skeleton, vel_thresh, height_thresh, fps)
    return clip


def clip_to_bytes(clip) -> bytes:
    x = np.ascontiguousarray(_as_frames(clip), dtype="<f4")
    if x.ndim != 2:
        raise InvalidClipError("clip must be 2-D")
    return _HEADER.pack(CLIP_MAGIC, CLIP_VERSION, x.shape[0], x.shape[1]) + x.tobytes()


def clip_from_bytes(buf: bytes, fps: float = 20.0, name: str = "<bytes>") -> tuple[MotionClip, int]:
    """Parse one clip from the start of ``buf``; returns (clip, bytes consumed)."""
    if len(buf) < _HEADER.size:
        raise InvalidClipError(f"{name}: truncated clip header")
    magic, version, f, d = _HEADER.unpack_from(buf)
    if magic != CLIP_MAGIC:
        raise InvalidClipError(f"{name}: bad magic {magic!r}")
    if version != CLIP_VERSION:
        raise InvalidClipError(f"{name}: unsupported clip version {version}")
    if d != FEAT_DIM:
        raise InvalidClipError(f"{name}: feature dimension {d} ≠ {FEAT_DIM}")
    n = f * d * 4
    end = _HEADER.size + n
    if len(buf) < end:
        raise InvalidClipError(f"{name}: truncated clip data ({len(buf) - _HEADER.size} of {n} bytes)")
    frames = np.frombuffer(buf, dtype="<f4", count=f * d, offset=_HEADER.size).reshape(f, d)
    return MotionClip(frames.astype(np.float32), fps=fps), end


def write_clip(clip, path) -> None:
    with open(path, "wb") as fh:
        fh.write(clip_to_bytes(clip))


def read_clip(path, fps: float = 20.0) -> MotionClip:
    with open(path, "rb") as fh:
        buf = fh.read()
    clip, used = clip_from_bytes(buf, fps=fps, name=str(path))
    if used != len(buf):
        raise InvalidClipError(f"{path}: {len(buf) - used} trailing bytes after clip data")
    return clip


def concat_clips(clips: list, fps: float | None = None) -> MotionClip:
    frames = np.concatenate([_as_frames(c) for c in clips], axis=0)
    if fps is None:
        fps = clips[0].fps if isinstance(clips[0], MotionClip) else 20.0
    return MotionClip(frames, fps=fps)


def world_positions_sequence(clips: list, skeleton: SkeletonSpec = DEFAULT_SKELETON) -> np.ndarray:
    """World positions of consecutive segments, each re-rooted to continue the previous one."""
    out = []
    h0, origin = 0.0, np.zeros(3)
    for clip in clips:
        pose = recover_positions(clip, skeleton)
        pos = rot_y(h0, pose.positions)
        pos[..., 0] += origin[0]
        pos[..., 2] += origin[2]
        out.append(pos)
        h0 = h0 + pose.heading[-1]
        origin = pos[-1, 0]
    return np.concatenate(out, axis=0)

