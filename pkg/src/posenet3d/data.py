"""Keypoint ingestion, sliding-window batches and the synthetic motion generator.

Keypoint files are JSON lines, one frame per line::

    {"seq": "s1", "frame": 0, "joints": [[x, y], ...14], "joints3d": [[x, y, z], ...], "vis": [...]}

``joints3d`` (meters, camera frame) and ``vis`` are optional.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
from scipy.optimize import fsolve
from scipy.spatial.transform import Rotation

from . import geometry as geo
from .bodymodel import NUM_BETAS, BodyModel, lbs_forward, regress_joints

logger = logging.getLogger(__name__)

N_JOINTS = geo.SKELETON.num_joints


class KeypointFormatError(ValueError):
    pass


class SchemaError(ValueError):
    pass


@dataclass
class KeypointSequence:
    sequence_id: str
    joints2d: np.ndarray  # [L, N, 2]
    joints3d: np.ndarray | None = None  # [L, N, 3]
    vis: np.ndarray | None = None  # [L, N]
    frame_ids: np.ndarray | None = None
    fps: float = 50.0

    def __post_init__(self):
        self.joints2d = np.asarray(self.joints2d, dtype=np.float64)
        if self.frame_ids is None:
            self.frame_ids = np.arange(len(self.joints2d))
        self.frame_ids = np.asarray(self.frame_ids, dtype=np.int64)
        if self.joints3d is not None:
            self.joints3d = np.asarray(self.joints3d, dtype=np.float64)

    def __len__(self) -> int:
        return len(self.joints2d)


@dataclass
class RejectedFrame:
    sequence_id: str
    frame: int
    line: int
    reason: str


# -- file format ---------------------------------------------------------

def _check_joints(value, dims: int, lineno: int, key: str) -> np.ndarray:
    arr = np.array(value, dtype=object)
    if arr.ndim != 2 or arr.shape[1] != dims:
        raise SchemaError(f"line {lineno}: '{key}' must be a list of {N_JOINTS} [{'x, y, z'[: 3 * dims - 2]}] entries")
    if arr.shape[0] != N_JOINTS:
        raise SchemaError(f"line {lineno}: '{key}' has {arr.shape[0]} joints, expected {N_JOINTS}")
    return arr


def load_keypoints(path, rejected: list | None = None) -> list[KeypointSequence]:
    """Parse and validate a keypoint file.

    Frames with a missing joint (null coordinate or zero visibility) are dropped
    and reported through ``rejected``; windows never span the resulting gaps.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"keypoint file not found: {path}")
    frames: dict[str, list] = {}
    with path.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise KeypointFormatError(f"line {lineno}: {exc.msg}") from exc
            if not isinstance(rec, dict):
                raise KeypointFormatError(f"line {lineno}: expected a JSON object")
            for key in ("seq", "frame", "joints"):
                if key not in rec:
                    raise KeypointFormatError(f"line {lineno}: missing field '{key}'")
            if not isinstance(rec["frame"], int):
                raise KeypointFormatError(f"line {lineno}: 'frame' must be an integer")
            j2 = _check_joints(rec["joints"], 2, lineno, "joints")
            j3 = _check_joints(rec["joints3d"], 3, lineno, "joints3d") if rec.get("joints3d") is not None else None
            vis = rec.get("vis")
            if vis is not None and len(vis) != N_JOINTS:
                raise SchemaError(f"line {lineno}: 'vis' has {len(vis)} entries, expected {N_JOINTS}")
            frames.setdefault(str(rec["seq"]), []).append((rec["frame"], lineno, j2, j3, vis))

    sequences = []
    for seq_id, recs in frames.items():
        recs.sort(key=lambda r: r[0])
        ids = [r[0] for r in recs]
        if len(set(ids)) != len(ids):
            raise SchemaError(f"sequence {seq_id!r}: duplicate frame indices")
        if ids[-1] - ids[0] + 1 != len(ids):
            raise SchemaError(f"sequence {seq_id!r}: frame indices are not contiguous")
        keep2, keep3, keepv, keep_ids = [], [], [], []
        has3d = all(r[3] is not None for r in recs)
        for frame, lineno, j2, j3, vis in recs:
            missing = any(v is None for v in j2.ravel())
            if vis is not None and any(not v for v in vis):
                missing = True
            if missing:
                if rejected is not None:
                    rejected.append(RejectedFrame(seq_id, frame, lineno, "missing joint"))
                logger.warning("sequence %s frame %d (line %d) rejected: missing joint", seq_id, frame, lineno)
                continue
            keep2.append(j2.astype(np.float64))
            keep3.append(j3.astype(np.float64) if has3d else None)
            keepv.append(vis)
            keep_ids.append(frame)
        if not keep2:
            continue
        sequences.append(
            KeypointSequence(
                sequence_id=seq_id,
                joints2d=np.stack(keep2),
                joints3d=np.stack(keep3) if has3d else None,
                vis=np.array(keepv, dtype=np.float64) if all(v is not None for v in keepv) else None,
                frame_ids=np.array(keep_ids),
            )
        )
    return sequences


def write_keypoints(path, sequences: Sequence[KeypointSequence], extra: dict | None = None) -> None:
    """Write sequences as JSON lines; floats are emitted with full round-trip precision."""
    with Path(path).open("w", encoding="utf-8") as fh:
        for seq in sequences:
            for i, frame in enumerate(seq.frame_ids):
                rec = {"seq": seq.sequence_id, "frame": int(frame), "joints": seq.joints2d[i].tolist()}
                if seq.joints3d is not None:
                    rec["joints3d"] = seq.joints3d[i].tolist()
                if seq.vis is not None:
                    rec["vis"] = seq.vis[i].tolist()
                if extra and seq.sequence_id in extra:
                    for key, values in extra[seq.sequence_id].items():
                        rec[key] = np.asarray(values[i]).tolist()
                fh.write(json.dumps(rec) + "\n")


# -- windows -------------------------------------------------------------

@dataclass
class WindowBatch:
    joints: np.ndarray  # [B, T, N, 2] normalized
    next_joints: np.ndarray  # [B, T, N, 2] normalized stride-1 successor (zeros where absent)
    has_next: np.ndarray  # [B] bool
    provenance: list[tuple[str, int]]
    scale: np.ndarray  # [B]
    joints3d: np.ndarray | None = None
    next_joints3d: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.joints)

    @staticmethod
    def channels(joints: np.ndarray) -> np.ndarray:
        B, T, N, _ = joints.shape
        return joints.reshape(B, T, 2 * N).transpose(0, 2, 1)

    @property
    def x2d(self) -> np.ndarray:
        """[B, 2N, T] network input."""
        return self.channels(self.joints)

    @property
    def next_x2d(self) -> np.ndarray:
        return self.channels(self.next_joints)


def _contiguous(ids: np.ndarray) -> bool:
    return bool(np.all(np.diff(ids) == 1))


def window_index(sequences: Sequence[KeypointSequence], T: int, stride: int = 1) -> list[tuple[int, int, bool]]:
    """All (sequence, start, has_successor) triples for windows of T contiguous frames."""
    out = []
    for si, seq in enumerate(sequences):
        L = len(seq)
        for s in range(0, L - T + 1, stride):
            if not _contiguous(seq.frame_ids[s : s + T]):
                continue
            nxt = s + 1 <= L - T and _contiguous(seq.frame_ids[s + 1 : s + 1 + T])
            out.append((si, s, nxt))
    return out


def assemble_batch(sequences: Sequence[KeypointSequence], items: Sequence[tuple[int, int, bool]], T: int) -> WindowBatch:
    joints, nxt, scale, prov, has_next = [], [], [], [], []
    j3, n3 = [], []
    with3d = all(sequences[si].joints3d is not None for si, _, _ in items)
    for si, s, has in items:
        seq = sequences[si]
        w = geo.normalize_window(seq.joints2d[s : s + T])
        joints.append(w.joints)
        scale.append(w.scale)
        prov.append((seq.sequence_id, int(seq.frame_ids[s])))
        has_next.append(has)
        if has:
            nxt.append(geo.normalize_window(seq.joints2d[s + 1 : s + 1 + T]).joints)
        else:
            nxt.append(np.zeros_like(w.joints))
        if with3d:
            j3.append(seq.joints3d[s : s + T])
            n3.append(seq.joints3d[s + 1 : s + 1 + T] if has else np.zeros_like(seq.joints3d[s : s + T]))
    return WindowBatch(
        joints=np.stack(joints),
        next_joints=np.stack(nxt),
        has_next=np.array(has_next, dtype=bool),
        provenance=prov,
        scale=np.array(scale),
        joints3d=np.stack(j3) if with3d else None,
        next_joints3d=np.stack(n3) if with3d else None,
    )


def make_windows(
    sequences: Sequence[KeypointSequence],
    T: int,
    stride: int = 1,
    rng: np.random.Generator | None = None,
    batch_size: int = 64,
) -> Iterator[WindowBatch]:
    """One epoch of window batches; starts are shuffled by ``rng`` when given."""
    index = window_index(sequences, T, stride)
    order = np.arange(len(index)) if rng is None else rng.permutation(len(index))
    for b in range(0, len(order), batch_size):
        yield assemble_batch(sequences, [index[i] for i in order[b : b + batch_size]], T)


def replicate_single_frame(frame, T: int) -> geo.PoseWindow2D:
    frame = np.asarray(frame, dtype=np.float64)
    return geo.PoseWindow2D(np.repeat(frame[None], T, axis=0))


# -- synthetic motion ----------------------------------------------------

# per SMPL joint: (low, high) local rotation-vector range per axis, radians
_RANGES = {
    1: ((-1.1, 0.4), (-0.3, 0.3), (-0.1, 0.45)),
    2: ((-1.1, 0.4), (-0.3, 0.3), (-0.45, 0.1)),
    4: ((0.0, 1.4), (0.0, 0.0), (0.0, 0.0)),
    5: ((0.0, 1.4), (0.0, 0.0), (0.0, 0.0)),
    7: ((-0.3, 0.3), (-0.1, 0.1), (-0.1, 0.1)),
    8: ((-0.3, 0.3), (-0.1, 0.1), (-0.1, 0.1)),
    12: ((-0.3, 0.3), (-0.3, 0.3), (-0.2, 0.2)),
    15: ((-0.3, 0.3), (-0.4, 0.4), (-0.2, 0.2)),
    16: ((-0.5, 0.5), (-0.7, 0.7), (0.1, 1.4)),
    17: ((-0.5, 0.5), (-0.7, 0.7), (-1.4, -0.1)),
    18: ((0.0, 0.0), (0.0, 1.9), (0.0, 0.0)),
    19: ((0.0, 0.0), (-1.9, 0.0), (0.0, 0.0)),
    20: ((-0.3, 0.3), (-0.3, 0.3), (-0.3, 0.3)),
    21: ((-0.3, 0.3), (-0.3, 0.3), (-0.3, 0.3)),
}


@dataclass
class MotionConfig:
    """Synthetic motion settings.

    Spine and collar joints are held still so every skeleton edge, torso edges
    included, is a rigid distance; this keeps the bone-length oracle exact.
    """

    amplitude: float = 1.0
    fps: float = 50.0
    freq_range: tuple[float, float] = (0.15, 1.0)
    components: int = 3
    yaw_speed: float = 0.6
    pitch: float = 0.15
    shape_std: float = 0.3
    canonical: bool = True
    joint_source: str = "fk"  # "fk" or "regressed"
    regressor: np.ndarray | None = field(default=None, repr=False)
    camera: geo.CameraConvention = geo.CAMERA


def _band_limited(rng, length, fps, cfg: MotionConfig, size):
    """Sum of random sinusoids with total amplitude <= 1, shape [length, *size]."""
    t = np.arange(length) / fps
    out = np.zeros((length,) + size)
    weights = rng.dirichlet(np.ones(cfg.components), size=size)  # [*size, C]
    for c in range(cfg.components):
        f = rng.uniform(*cfg.freq_range, size=size)
        phase = rng.uniform(0, 2 * np.pi, size=size)
        out += weights[..., c] * np.sin(2 * np.pi * f * t.reshape((-1,) + (1,) * len(size)) + phase)
    return out


def random_pose_params(rng: np.random.Generator, length: int, cfg: MotionConfig = MotionConfig()):
    """Smooth joint-angle trajectories, rotations [L, 24, 3, 3], and one beta vector."""
    K = 24
    rotvec = np.zeros((length, K, 3))
    wave = _band_limited(rng, length, cfg.fps, cfg, (K, 3))
    for k, axes in _RANGES.items():
        for a, (lo, hi) in enumerate(axes):
            centre, half = 0.5 * (lo + hi), 0.5 * (hi - lo)
            rotvec[:, k, a] = centre + cfg.amplitude * half * wave[:, k, a]
    t = np.arange(length) / cfg.fps
    yaw = rng.uniform(-np.pi, np.pi) + rng.uniform(-cfg.yaw_speed, cfg.yaw_speed) * t
    pitch = cfg.pitch * cfg.amplitude * _band_limited(rng, length, cfg.fps, cfg, ())
    local = Rotation.from_rotvec(rotvec.reshape(-1, 3)).as_matrix().reshape(length, K, 3, 3)
    glob = np.stack([geo.rotation_from_angles(y, p) for y, p in zip(yaw, pitch)])
    local[:, 0] = glob
    betas = rng.normal(0.0, cfg.shape_std, size=NUM_BETAS) if cfg.shape_std > 0 else np.zeros(NUM_BETAS)
    return rotations_checked(local), betas


def rotations_checked(R: np.ndarray) -> np.ndarray:
    err = np.abs(np.swapaxes(R, -1, -2) @ R - np.eye(3)).max()
    if err > 1e-9:
        raise ValueError(f"rotation trajectory left SO(3) by {err:.2g}")
    return R


def _place_canonical(P: np.ndarray, camera: geo.CameraConvention, t0: np.ndarray) -> np.ndarray:
    """Translation t such that P + t projects with its 2D hip midpoint on the
    optical axis and its head exactly 1/c from it."""
    sk = geo.SKELETON
    target = 1.0 / camera.c

    def residual(t):
        Q = P + t
        uv = Q[:, :2] / Q[:, 2:3]
        root = 0.5 * (uv[sk.l_hip] + uv[sk.r_hip])
        return [root[0], root[1], np.linalg.norm(uv[sk.head] - root) - target]

    t, info, ok, msg = fsolve(residual, t0, xtol=1e-13, full_output=True)
    if np.max(np.abs(residual(t))) > 1e-12:
        raise RuntimeError(f"canonical placement failed: {msg}")
    return t


def synth_motion(
    body: BodyModel,
    rng: np.random.Generator,
    num_sequences: int,
    length: int,
    cfg: MotionConfig = MotionConfig(),
    prefix: str = "synth",
) -> list[KeypointSequence]:
    """Random smooth motions driven through the body model, with exact 3D ground truth.

    With ``cfg.canonical`` each frame is translated (a rigid motion) so its 2D
    projection is already normalized; re-lifting normalized 2D with the true
    depths then reproduces the ground truth exactly.
    """
    camera = cfg.camera
    sequences = []
    regressor = cfg.regressor if cfg.regressor is not None else body.regressor
    for n in range(num_sequences):
        R, betas = random_pose_params(rng, length, cfg)
        verts, fk = lbs_forward(body, np.repeat(betas[None], length, axis=0), R)
        if cfg.joint_source == "fk":
            joints = fk.data[:, body.joint_map]
        elif cfg.joint_source == "regressed":
            joints = regress_joints(regressor[body.joint_map], verts.data).data
        else:
            raise ValueError(f"unknown joint_source {cfg.joint_source!r}")
        root = 0.5 * (joints[:, geo.L_HIP] + joints[:, geo.R_HIP])
        placed = np.empty_like(joints)
        if cfg.canonical:
            t = camera.placement - root[0]
            for j in range(length):
                t = _place_canonical(joints[j], camera, t if j else camera.placement - root[j])
                placed[j] = joints[j] + t
        else:
            drift = 0.3 * _band_limited(rng, length, cfg.fps, cfg, (3,)) * np.array([1.0, 0.2, 1.0])
            placed = joints - root[:, None] + (camera.placement + drift)[:, None, :]
        if np.any(placed[..., 2] <= camera.depth_floor):
            raise RuntimeError("synthetic subject crossed the depth floor")
        uv = placed[..., :2] / placed[..., 2:3]
        sequences.append(KeypointSequence(f"{prefix}{n:04d}", uv, placed, fps=cfg.fps))
    return sequences


def synth_pose_windows(
    body: BodyModel,
    rng: np.random.Generator,
    num_windows: int,
    T: int,
    cfg: MotionConfig = MotionConfig(),
) -> list[KeypointSequence]:
    """Independent short clips, one window (+1 successor frame) each."""
    return synth_motion(body, rng, num_windows, T + 1, cfg, prefix="clip")


__all__ = [
    "KeypointSequence",
    "KeypointFormatError",
    "SchemaError",
    "RejectedFrame",
    "WindowBatch",
    "MotionConfig",
    "load_keypoints",
    "write_keypoints",
    "window_index",
    "assemble_batch",
    "make_windows",
    "replicate_single_frame",
    "random_pose_params",
    "synth_motion",
    "synth_pose_windows",
]
