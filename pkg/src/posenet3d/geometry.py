"""Camera model, 2D normalization, depth-offset lifting, reprojection and Procrustes.

Coordinates follow the image convention: x to the right, y downwards, z along
the optical axis.  The camera has unit focal length and sits at the origin.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

JOINT_NAMES = (
    "head",
    "neck",
    "l_shoulder",
    "r_shoulder",
    "l_elbow",
    "r_elbow",
    "l_wrist",
    "r_wrist",
    "l_hip",
    "r_hip",
    "l_knee",
    "r_knee",
    "l_ankle",
    "r_ankle",
)
HEAD, NECK, L_SHOULDER, R_SHOULDER, L_ELBOW, R_ELBOW, L_WRIST, R_WRIST = range(8)
L_HIP, R_HIP, L_KNEE, R_KNEE, L_ANKLE, R_ANKLE = range(8, 14)

BONES = (
    (HEAD, NECK),
    (NECK, L_SHOULDER),
    (NECK, R_SHOULDER),
    (L_SHOULDER, L_ELBOW),
    (L_ELBOW, L_WRIST),
    (R_SHOULDER, R_ELBOW),
    (R_ELBOW, R_WRIST),
    (NECK, L_HIP),
    (NECK, R_HIP),
    (L_HIP, R_HIP),
    (L_HIP, L_KNEE),
    (L_KNEE, L_ANKLE),
    (R_HIP, R_KNEE),
    (R_KNEE, R_ANKLE),
)

# upper/lower arm and leg, left and right
METRIC_BONES = (
    (L_SHOULDER, L_ELBOW),
    (L_ELBOW, L_WRIST),
    (R_SHOULDER, R_ELBOW),
    (R_ELBOW, R_WRIST),
    (L_HIP, L_KNEE),
    (L_KNEE, L_ANKLE),
    (R_HIP, R_KNEE),
    (R_KNEE, R_ANKLE),
)


@dataclass(frozen=True)
class SkeletonSpec:
    joint_names: tuple[str, ...] = JOINT_NAMES
    bones: tuple[tuple[int, int], ...] = BONES
    metric_bones: tuple[tuple[int, int], ...] = METRIC_BONES
    head: int = HEAD
    l_hip: int = L_HIP
    r_hip: int = R_HIP

    @property
    def num_joints(self) -> int:
        return len(self.joint_names)

    def validate(self) -> None:
        n = self.num_joints
        for a, b in self.bones:
            if not (0 <= a < n and 0 <= b < n) or a == b:
                raise ValueError(f"bone ({a}, {b}) does not connect two valid joints")
        edges = {frozenset(e) for e in self.bones}
        for e in self.metric_bones:
            if frozenset(e) not in edges:
                raise ValueError(f"metric bone {e} is not a skeleton edge")


SKELETON = SkeletonSpec()


@dataclass(frozen=True)
class CameraConvention:
    focal: float = 1.0
    c: float = 10.0
    azimuth_range: tuple[float, float] = (-np.pi, np.pi)
    elevation_range: tuple[float, float] = (-np.pi / 9, np.pi / 9)
    depth_floor: float = 1.0

    def __post_init__(self):
        if not self.c > self.depth_floor > 0:
            raise ValueError("camera distance must exceed the depth floor, which must be positive")

    @property
    def placement(self) -> np.ndarray:
        return np.array([0.0, 0.0, self.c])


CAMERA = CameraConvention()


class DegenerateSkeletonError(ValueError):
    pass


class ProjectionDomainError(ValueError):
    pass


class AlignmentDegenerateError(ValueError):
    pass


@dataclass
class PoseWindow2D:
    joints: np.ndarray  # [T, N, 2]
    frame_ids: np.ndarray = field(default=None)
    normalized: bool = False
    scale: float = 1.0

    def __post_init__(self):
        self.joints = np.asarray(self.joints, dtype=np.float64)
        if self.frame_ids is None:
            self.frame_ids = np.arange(len(self.joints))
        self.frame_ids = np.asarray(self.frame_ids, dtype=np.int64)


@dataclass
class PoseWindow3D:
    joints: np.ndarray  # [T, N, 3], camera coordinates in meters
    frame_ids: np.ndarray = field(default=None)

    def __post_init__(self):
        self.joints = np.asarray(self.joints, dtype=np.float64)
        if self.frame_ids is None:
            self.frame_ids = np.arange(len(self.joints))

    def check_depths(self, floor: float = CAMERA.depth_floor) -> None:
        if np.any(self.joints[..., 2] < floor):
            raise ProjectionDomainError(f"joint depth below the {floor} m floor")


def _joints(x):
    if isinstance(x, (PoseWindow2D, PoseWindow3D)):
        return x.joints
    return x


def normalize_window(raw, frame_ids=None, skeleton: SkeletonSpec = SKELETON, camera: CameraConvention = CAMERA) -> PoseWindow2D:
    """Root-center each frame and rescale the window so the mean head-root distance is 1/c."""
    raw = np.asarray(_joints(raw), dtype=np.float64)
    root = 0.5 * (raw[:, skeleton.l_hip] + raw[:, skeleton.r_hip])
    centered = raw - root[:, None, :]
    dist = np.linalg.norm(centered[:, skeleton.head], axis=-1).mean()
    if dist < 1e-9:
        raise DegenerateSkeletonError(f"mean head-root distance {dist:.3g} is degenerate")
    target = 1.0 / camera.c
    scale = 1.0 if dist == target else target / dist
    return PoseWindow2D(centered * scale, frame_ids, normalized=True, scale=scale)


def normalize_joints(x: Tensor, skeleton: SkeletonSpec = SKELETON, camera: CameraConvention = CAMERA) -> Tensor:
    """Differentiable counterpart of ``normalize_window`` over [..., T, N, 2] tensors."""
    x = ad.as_tensor(x)
    root = 0.5 * (x[..., skeleton.l_hip : skeleton.l_hip + 1, :] + x[..., skeleton.r_hip : skeleton.r_hip + 1, :])
    centered = x - root
    head = centered[..., skeleton.head, :]
    dist = ad.sqrt((head * head).sum(axis=-1)).mean(axis=-1, keepdims=True)  # [..., 1]
    scale = (1.0 / camera.c) / dist
    return centered * scale.reshape(scale.shape + (1, 1))


def lift(pose2d, offsets, camera: CameraConvention = CAMERA) -> Tensor:
    """X = (x z, y z, z) with z = max(floor, c + offset)."""
    x = ad.as_tensor(_joints(pose2d))
    offsets = ad.as_tensor(offsets)
    if x.shape[:-1] != offsets.shape or x.shape[-1] != 2:
        raise ad.ShapeError(f"lift: 2D joints {x.shape} do not match offsets {offsets.shape}")
    z = ad.maximum(offsets + camera.c, camera.depth_floor)
    zz = z.reshape(z.shape + (1,))
    return ad.concat([x * zz, zz], axis=-1)


def root_of(joints, skeleton: SkeletonSpec = SKELETON) -> Tensor:
    """Midpoint of the two hip joints, over [..., N, D]."""
    j = ad.as_tensor(_joints(joints))
    return 0.5 * (j[..., skeleton.l_hip, :] + j[..., skeleton.r_hip, :])


def rotation_from_angles(azimuth: float, elevation: float) -> np.ndarray:
    """Q = R_elev @ R_azim; azimuth about the vertical (image y) axis, elevation about image x."""
    ca, sa = np.cos(azimuth), np.sin(azimuth)
    ce, se = np.cos(elevation), np.sin(elevation)
    r_azim = np.array([[ca, 0.0, sa], [0.0, 1.0, 0.0], [-sa, 0.0, ca]])
    r_elev = np.array([[1.0, 0.0, 0.0], [0.0, ce, -se], [0.0, se, ce]])
    return r_elev @ r_azim


def sample_rotation(rng: np.random.Generator, camera: CameraConvention = CAMERA, size: int | None = None) -> np.ndarray:
    if size is None:
        az = rng.uniform(*camera.azimuth_range)
        el = rng.uniform(*camera.elevation_range)
        return rotation_from_angles(az, el)
    az = rng.uniform(*camera.azimuth_range, size=size)
    el = rng.uniform(*camera.elevation_range, size=size)
    return np.stack([rotation_from_angles(a, e) for a, e in zip(az, el)])


def rotate_place(X, Q, skeleton: SkeletonSpec = SKELETON, camera: CameraConvention = CAMERA) -> Tensor:
    """Y_i = Q (X_i - X_root) + C per frame.

    ``X`` is [..., T, N, 3]; ``Q`` is a single 3x3 matrix or one per leading item,
    broadcast over frames and joints.
    """
    X = ad.as_tensor(_joints(X))
    Q = np.asarray(Q, dtype=np.float64)
    root = root_of(X, skeleton)
    centered = X - root.reshape(root.shape[:-1] + (1, 3))
    if Q.ndim == 2:
        rotated = ad.matmul(centered, Q.T)
    else:
        extra = X.ndim - 2 - (Q.ndim - 2)
        Qt = np.swapaxes(Q, -1, -2).reshape(Q.shape[:-2] + (1,) * extra + (3, 3))
        rotated = ad.matmul(centered, Qt)
    return rotated + camera.placement


def project(Y) -> Tensor:
    """Perspective projection with unit focal length: (X/Z, Y/Z)."""
    Y = ad.as_tensor(_joints(Y))
    if np.any(Y.data[..., 2] <= 0):
        raise ProjectionDomainError("cannot project points with nonpositive depth")
    z = Y[..., 2:3]
    return Y[..., 0:2] / z


class Alignment(NamedTuple):
    scale: float
    rotation: np.ndarray
    translation: np.ndarray
    aligned: np.ndarray
    residual: float


def procrustes_align(P, G) -> Alignment:
    """Similarity transform (s, R, t) minimizing sum ||s R P_i + t - G_i||^2."""
    P = np.asarray(P, dtype=np.float64)
    G = np.asarray(G, dtype=np.float64)
    if P.shape != G.shape or P.ndim != 2 or P.shape[1] != 3:
        raise ValueError(f"procrustes_align expects two [N,3] arrays, got {P.shape} and {G.shape}")
    if len(P) < 3:
        raise AlignmentDegenerateError("need at least 3 points")
    mu_p, mu_g = P.mean(axis=0), G.mean(axis=0)
    P0, G0 = P - mu_p, G - mu_g
    sg = np.linalg.svd(G0, compute_uv=False)
    if sg[1] <= 1e-12 * max(sg[0], 1e-300):
        raise AlignmentDegenerateError("target points are collinear or coincident")
    H = P0.T @ G0
    U, S, Vt = np.linalg.svd(H)
    d = np.sign(np.linalg.det(Vt.T @ U.T))
    D = np.diag([1.0, 1.0, d if d != 0 else 1.0])
    R = Vt.T @ D @ U.T
    norm_p = (P0**2).sum()
    s = float((S * np.diag(D)).sum() / norm_p) if norm_p > 0 else 0.0
    t = mu_g - s * R @ mu_p
    aligned = s * P @ R.T + t
    residual = float(np.linalg.norm(aligned - G, axis=1).mean())
    return Alignment(s, R, t, aligned, residual)
