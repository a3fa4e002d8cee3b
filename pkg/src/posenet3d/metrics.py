"""Evaluation metrics on 3D joint sequences.  Inputs are in meters, outputs in mm."""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import geometry as geo

MM = 1000.0
AUC_THRESHOLDS = np.arange(5.0, 151.0, 5.0)  # mm, t = 0 left out


def aligned(pred, gt) -> np.ndarray:
    """Each predicted frame similarity-aligned to its ground-truth frame, [F, N, 3]."""
    pred, gt = _pair(pred, gt)
    return np.stack([geo.procrustes_align(p, g).aligned for p, g in zip(pred, gt)])


def joint_errors(pred, gt) -> np.ndarray:
    """Per-frame, per-joint error after alignment, mm, [F, N]."""
    pred, gt = _pair(pred, gt)
    return MM * np.linalg.norm(aligned(pred, gt) - gt, axis=-1)


def _pair(pred, gt):
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape or pred.ndim != 3 or pred.shape[-1] != 3:
        raise ValueError(f"expected matching [F, N, 3] arrays, got {pred.shape} and {gt.shape}")
    return pred, gt


def p_mpjpe(pred, gt) -> float:
    return float(joint_errors(pred, gt).mean())


def mpjve(pred, gt, fps: float = 50.0) -> float:
    """Mean per-joint error of first differences of the aligned sequences, mm/frame.

    ``fps`` only labels the unit; values are per frame.
    """
    pred, gt = _pair(pred, gt)
    if len(pred) < 2:
        raise ValueError("velocity error needs at least 2 frames")
    a = aligned(pred, gt)
    dv = np.diff(a, axis=0) - np.diff(gt, axis=0)
    return float(MM * np.linalg.norm(dv, axis=-1).mean())


def bone_length_std(seq, bones=geo.METRIC_BONES) -> np.ndarray:
    """Population std over frames of each bone length, mm, [E]."""
    seq = np.asarray(seq, dtype=np.float64)
    a = np.array([b[0] for b in bones])
    b = np.array([b[1] for b in bones])
    lengths = np.linalg.norm(seq[:, a] - seq[:, b], axis=-1)
    return MM * lengths.std(axis=0)


def mblstd(sequences: Sequence, bones=geo.METRIC_BONES) -> float:
    """Bone-length std averaged over the limb segments and all sequences."""
    if isinstance(sequences, np.ndarray) and sequences.ndim == 3:
        sequences = [sequences]
    if not len(sequences):
        raise ValueError("no sequences")
    return float(np.mean([bone_length_std(s, bones).mean() for s in sequences]))


def pck_from_errors(errors, threshold: float = 150.0) -> float:
    return float(100.0 * np.mean(np.asarray(errors) < threshold))


def auc_from_errors(errors, thresholds=AUC_THRESHOLDS) -> float:
    e = np.asarray(errors).ravel()
    return float(np.mean([100.0 * np.mean(e < t) for t in thresholds]))


def pck_auc(pred, gt, threshold: float = 150.0, thresholds=AUC_THRESHOLDS) -> tuple[float, float]:
    e = joint_errors(pred, gt)
    return pck_from_errors(e, threshold), auc_from_errors(e, thresholds)


def fuse_predictions(teacher3d, student3d) -> np.ndarray:
    """Elementwise mean of two root-centered predictions."""
    teacher3d, student3d = np.asarray(teacher3d), np.asarray(student3d)
    if teacher3d.shape != student3d.shape:
        raise ValueError(f"shape mismatch {teacher3d.shape} vs {student3d.shape}")
    return 0.5 * (teacher3d + student3d)


@dataclass
class EvalReport:
    p_mpjpe_mm: float
    mpjve_mm_per_frame: float | None
    mblstd_mm: float
    pck150_percent: float
    auc_percent: float
    num_sequences: int
    num_frames: int
    per_sequence: dict[str, dict] = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), indent=2, sort_keys=True) + "\n"

    def validate(self) -> None:
        for name in ("p_mpjpe_mm", "mblstd_mm", "pck150_percent", "auc_percent"):
            v = getattr(self, name)
            if not np.isfinite(v) or v < 0:
                raise ValueError(f"{name} = {v} is not a valid metric value")
        if not (0 <= self.pck150_percent <= 100 and 0 <= self.auc_percent <= 100):
            raise ValueError("percentages out of range")


def evaluate(pred: Mapping[str, np.ndarray], gt: Mapping[str, np.ndarray], fps: float = 50.0) -> EvalReport:
    """Full report over sequences keyed by id; aggregates weight every frame equally."""
    missing = sorted(set(gt) - set(pred))
    extra = sorted(set(pred) - set(gt))
    if missing or extra:
        raise KeyError(f"sequence ids differ: missing predictions {missing}, unknown predictions {extra}")
    if not gt:
        raise ValueError("nothing to evaluate")
    errors, vel, per_seq, stds = [], [], {}, []
    for sid in sorted(gt):
        p, g = _pair(pred[sid], gt[sid])
        e = joint_errors(p, g)
        errors.append(e)
        row = {"frames": len(g), "p_mpjpe_mm": float(e.mean()), "pck150_percent": pck_from_errors(e)}
        if len(g) >= 2:
            a = aligned(p, g)
            v = MM * np.linalg.norm(np.diff(a, axis=0) - np.diff(g, axis=0), axis=-1)
            vel.append(v)
            row["mpjve_mm_per_frame"] = float(v.mean())
        s = bone_length_std(p)
        stds.append(s.mean())
        row["mblstd_mm"] = float(s.mean())
        per_seq[sid] = row
    all_e = np.concatenate(errors)
    report = EvalReport(
        p_mpjpe_mm=float(all_e.mean()),
        mpjve_mm_per_frame=float(np.concatenate(vel).mean()) if vel else None,
        mblstd_mm=float(np.mean(stds)),
        pck150_percent=pck_from_errors(all_e),
        auc_percent=auc_from_errors(all_e),
        num_sequences=len(gt),
        num_frames=int(sum(len(g) for g in gt.values())),
        per_sequence=per_seq,
    )
    report.validate()
    return report
