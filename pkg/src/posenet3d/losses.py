"""Training objectives.  Every loss is summed over frames and joints of a window
and averaged over any leading batch axes."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Mapping

import numpy as np

from . import autodiff as ad
from . import geometry as geo
from .autodiff import Tensor


@dataclass(frozen=True)
class LossWeights:
    mss: float = 2.0
    tc: float = 1.0
    bl: float = 2.0
    rot: float = 30.0
    beta: float = 10.0
    student: float = 2.0
    adv: float = 1.0  # generator adversarial terms; 0 disables them

    def __post_init__(self):
        for f in dataclasses.fields(self):
            if getattr(self, f.name) < 0:
                raise ad.ConfigError(f"loss weight {f.name} must be >= 0")


def _per_window(x: Tensor, core: int) -> Tensor:
    """Sum over the trailing ``core`` axes, mean over the rest."""
    x = x.sum(axis=tuple(range(x.ndim - core, x.ndim)))
    return x.mean() if x.ndim else x


def _masked_mean(per_item: Tensor, mask) -> Tensor:
    if mask is None:
        return per_item.mean() if per_item.ndim else per_item
    mask = np.asarray(mask, dtype=np.float64)
    return (per_item * mask).sum() / max(1.0, float(mask.sum()))


def loss_mss(Y, Y_tilde) -> Tensor:
    """Squared distance between a placed 3D window and its re-lifted reprojection."""
    d = ad.as_tensor(Y) - Y_tilde
    return _per_window(d * d, 3)


def loss_tc(X_t, X_t1, mask=None) -> Tensor:
    """Disagreement of two stride-1 windows over their T-1 shared frames.

    ``mask`` ([B] bool) drops items without a successor window.
    """
    X_t, X_t1 = ad.as_tensor(X_t), ad.as_tensor(X_t1)
    d = X_t[..., 1:, :, :] - X_t1[..., :-1, :, :]
    per_item = (d * d).sum(axis=(-3, -2, -1))
    return _masked_mean(per_item, mask)


def bone_lengths(X, edges=geo.BONES) -> Tensor:
    X = ad.as_tensor(X)
    a = np.array([e[0] for e in edges])
    b = np.array([e[1] for e in edges])
    d = X[..., a, :] - X[..., b, :]
    return ad.sqrt((d * d).sum(axis=-1))  # [..., T, E]


def loss_bl(X, edges=geo.BONES) -> Tensor:
    """Population variance over frames of each bone length, summed over bones."""
    X = ad.as_tensor(X)
    if X.shape[-3] < 2:
        raise ad.ShapeError("bone-length variance needs at least 2 frames")
    var = bone_lengths(X, edges).var(axis=-2)  # [..., E]
    return _per_window(var, 1)


def loss_adv_disc(real_logits, fake_logits) -> Tensor:
    """BCE with real -> 1 and fake -> 0, in the softplus form."""
    real, fake = ad.as_tensor(real_logits), ad.as_tensor(fake_logits)
    return ad.softplus(-real).mean() + ad.softplus(fake).mean()


def loss_adv_gen(fake_logits) -> Tensor:
    """Non-saturating generator loss: BCE with fake -> 1."""
    return ad.softplus(-ad.as_tensor(fake_logits)).mean()


def disc_accuracy(real_logits: np.ndarray, fake_logits: np.ndarray) -> float:
    real, fake = np.asarray(real_logits), np.asarray(fake_logits)
    correct = np.count_nonzero(real > 0) + np.count_nonzero(fake < 0)
    return correct / (real.size + fake.size)


def center_root(X, skeleton: geo.SkeletonSpec = geo.SKELETON) -> Tensor:
    X = ad.as_tensor(X)
    root = geo.root_of(X, skeleton)
    return X - root.reshape(root.shape[:-1] + (1, 3))


def loss_kd(X_teacher, student_joints, joint_map, skeleton: geo.SkeletonSpec = geo.SKELETON) -> Tensor:
    """Teacher joints vs mapped student joints, both centred at their hip midpoint.

    ``X_teacher`` is [..., T, N, 3]; ``student_joints`` is [..., T, K, 3].
    """
    mapped = ad.as_tensor(student_joints)[..., np.asarray(joint_map), :]
    d = center_root(X_teacher, skeleton) - center_root(mapped, skeleton)
    return _per_window(d * d, 3)


def loss_rot_reg(rotations) -> Tensor:
    """Squared Frobenius deviation from identity, summed over frames and joints."""
    d = ad.as_tensor(rotations) - np.eye(3)
    return _per_window(d * d, 4)


def loss_beta(betas) -> Tensor:
    b = ad.as_tensor(betas)
    return _per_window(b * b, 1)


def teacher_objective(w: LossWeights, parts: Mapping[str, Tensor]) -> Tensor:
    return w.mss * parts["mss"] + w.tc * parts["tc"] + w.bl * parts["bl"] + parts["adv_t"]


def student_objective(w: LossWeights, parts: Mapping[str, Tensor]) -> Tensor:
    return parts["kd"] + w.rot * parts["rot"] + w.beta * parts["beta"]


def stage_losses(w: LossWeights, parts: Mapping[str, Tensor], stage: int) -> Tensor:
    """Stage 1: L_T.  Stages 2, 3: L_S.  Stage 4: L_T + lambda_S L_S + L_D^S."""
    if stage == 1:
        return teacher_objective(w, parts)
    if stage in (2, 3):
        return student_objective(w, parts)
    if stage == 4:
        return teacher_objective(w, parts) + w.student * student_objective(w, parts) + parts["adv_s"]
    raise ad.ConfigError(f"unknown stage {stage}")
