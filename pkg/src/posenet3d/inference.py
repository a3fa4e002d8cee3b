"""Sliding-window inference over whole sequences."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import geometry as geo
from .bodymodel import BodyModel
from .data import replicate_single_frame
from .losses import center_root
from .networks import ModelParams, backbone_forward, student_forward, teacher_forward
from .training import student_joints


@dataclass
class SequencePrediction:
    teacher: np.ndarray  # [L, N, 3] root-centered
    student: np.ndarray | None = None  # [L, N, 3] root-centered
    rotations: np.ndarray | None = None  # [L, K, 3, 3]
    betas: np.ndarray | None = None  # [10]

    @property
    def fused(self) -> np.ndarray:
        if self.student is None:
            raise ValueError("no student prediction to fuse")
        return 0.5 * (self.teacher + self.student)

    def joints(self, source: str) -> np.ndarray:
        if source == "teacher":
            return self.teacher
        if source == "student":
            if self.student is None:
                raise ValueError("no student prediction")
            return self.student
        if source == "fused":
            return self.fused
        raise ValueError(f"unknown source {source!r}")


def _pad_to_window(joints2d: np.ndarray, T: int) -> tuple[np.ndarray, int]:
    """Sequences shorter than T: a single frame is replicated, others edge-padded."""
    L = len(joints2d)
    if L >= T:
        return joints2d, 0
    if L == 1:
        return replicate_single_frame(joints2d[0], T).joints, (T - 1) // 2
    before = (T - L) // 2
    return np.pad(joints2d, ((before, T - L - before), (0, 0), (0, 0)), mode="edge"), before


def regressor_mode(params: ModelParams) -> str:
    if params.cfg.linear_sja and "lsja.A" in params.values:
        return "linear"
    return "sja" if "sja.logits" in params.values else "fixed"


def predict_sequence(
    params: ModelParams,
    joints2d: np.ndarray,
    body: BodyModel | None = None,
    with_student: bool = True,
    chunk: int = 256,
) -> SequencePrediction:
    """Average per-frame predictions over all windows covering the frame.

    Student rotations for a frame come from the window in which it is most
    central; betas are averaged over windows.
    """
    cfg = params.cfg
    T = cfg.T
    padded, offset = _pad_to_window(np.asarray(joints2d, dtype=np.float64), T)
    Lp = len(padded)
    starts = np.arange(Lp - T + 1)
    teacher_sum = np.zeros((Lp, cfg.N, 3))
    student_sum = np.zeros((Lp, cfg.N, 3))
    counts = np.zeros(Lp)
    rot = np.zeros((Lp, cfg.K, 3, 3))
    rot_dist = np.full(Lp, np.inf)
    betas = []
    student = with_student and body is not None
    mode = regressor_mode(params)
    for c in range(0, len(starts), chunk):
        s = starts[c : c + chunk]
        win = np.stack([geo.normalize_window(padded[i : i + T]).joints for i in s])
        B = len(s)
        x2d = win.reshape(B, T, -1).transpose(0, 2, 1)
        feats = backbone_forward(params.values, params.buffers, x2d, cfg, "eval")
        offsets = teacher_forward(params.values, params.buffers, feats, cfg, "eval")
        X = center_root(geo.lift(win, offsets)).data
        if student:
            R, b = student_forward(params.values, params.buffers, feats, cfg, "eval")
            J = student_joints(params.values, body, R, b, mode)
            Js = center_root(J.data[:, :, body.joint_map]).data
            betas.append(b.data)
        for k, i in enumerate(s):
            teacher_sum[i : i + T] += X[k]
            counts[i : i + T] += 1
            if student:
                student_sum[i : i + T] += Js[k]
                dist = np.abs(np.arange(T) - (T - 1) / 2)
                better = dist < rot_dist[i : i + T]
                rot[i : i + T][better] = R.data[k][better]
                rot_dist[i : i + T] = np.minimum(rot_dist[i : i + T], dist)
    keep = slice(offset, offset + len(joints2d))
    out = SequencePrediction(teacher=(teacher_sum / counts[:, None, None])[keep])
    if student:
        out.student = (student_sum / counts[:, None, None])[keep]
        out.rotations = rot[keep]
        out.betas = np.concatenate(betas).mean(axis=0)
    return out
