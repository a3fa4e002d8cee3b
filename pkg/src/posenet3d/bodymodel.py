"""Linear-blend-skinned parametric body with SMPL-compatible joint layout.

The licensed SMPL data is not shipped.  ``synth_model`` builds a procedural
humanoid with the same 24-joint tree, and genuine models can be loaded from the
container format if converted (``shape_dirs`` must carry exactly 10 directions).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import nnls

from . import autodiff as ad
from . import container
from .autodiff import Tensor

K_JOINTS = 24
NUM_BETAS = 10
MAGIC = b"PN3D-BM"

SMPL_JOINT_NAMES = (
    "pelvis", "l_hip", "r_hip", "spine1", "l_knee", "r_knee", "spine2", "l_ankle",
    "r_ankle", "spine3", "l_foot", "r_foot", "neck", "l_collar", "r_collar", "head",
    "l_shoulder", "r_shoulder", "l_elbow", "r_elbow", "l_wrist", "r_wrist", "l_hand", "r_hand",
)  # fmt: skip
SMPL_PARENTS = np.array([-1, 0, 0, 0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 9, 9, 12, 13, 14, 16, 17, 18, 19, 20, 21])

# 14-joint skeleton order (see geometry.JOINT_NAMES) -> SMPL joint index
SMPL_JOINT_MAP = np.array([15, 12, 16, 17, 18, 19, 20, 21, 1, 2, 4, 5, 7, 8])

# rest pose, meters, y up, subject facing -z; flipped to image convention (y down) at the end
_REST_JOINTS = np.array([
    [0.00, 0.00, 0.00], [0.09, -0.08, 0.00], [-0.09, -0.08, 0.00], [0.00, 0.11, 0.00],
    [0.10, -0.48, 0.00], [-0.10, -0.48, 0.00], [0.00, 0.24, 0.00], [0.10, -0.88, 0.00],
    [-0.10, -0.88, 0.00], [0.00, 0.38, 0.00], [0.10, -0.94, -0.12], [-0.10, -0.94, -0.12],
    [0.00, 0.56, 0.00], [0.07, 0.48, 0.00], [-0.07, 0.48, 0.00], [0.00, 0.70, 0.00],
    [0.18, 0.50, 0.00], [-0.18, 0.50, 0.00], [0.44, 0.50, 0.00], [-0.44, 0.50, 0.00],
    [0.68, 0.50, 0.00], [-0.68, 0.50, 0.00], [0.76, 0.50, 0.00], [-0.76, 0.50, 0.00],
])  # fmt: skip

# capsule radius of the geometry owned by each joint (segments to its children)
_RADII = np.array([
    0.12, 0.075, 0.075, 0.13, 0.055, 0.055, 0.13, 0.045, 0.045, 0.12, 0.035, 0.035,
    0.05, 0.05, 0.05, 0.10, 0.045, 0.045, 0.037, 0.037, 0.03, 0.03, 0.035, 0.035,
])  # fmt: skip

_LEG = (1, 2, 4, 5, 7, 8, 10, 11)
_ARM = (16, 17, 18, 19, 20, 21, 22, 23)


class OrthonormalizationError(ValueError):
    pass


class ModelInvariantError(ValueError):
    pass


@dataclass(frozen=True)
class BodyModel:
    parent: np.ndarray  # [K] int, parent[0] = -1
    template: np.ndarray  # [V, 3]
    shape_dirs: np.ndarray  # [V, 3, 10]
    skin_weights: np.ndarray  # [V, K]
    regressor: np.ndarray  # [K, V]
    joint_map: np.ndarray  # [N]

    @property
    def num_vertices(self) -> int:
        return self.template.shape[0]

    @property
    def num_joints(self) -> int:
        return len(self.parent)

    def validate(self) -> None:
        K, V = self.num_joints, self.num_vertices
        if self.parent[0] != -1:
            raise ModelInvariantError("joint 0 must be the root (parent -1)")
        for k in range(1, K):
            if not 0 <= self.parent[k] < k:
                raise ModelInvariantError(f"parent of joint {k} must precede it, got {self.parent[k]}")
        if self.template.shape != (V, 3):
            raise ModelInvariantError(f"template shape {self.template.shape}")
        if self.shape_dirs.shape != (V, 3, NUM_BETAS):
            raise ModelInvariantError(f"shape_dirs must be [V,3,{NUM_BETAS}], got {self.shape_dirs.shape}")
        for name, w, shape in (("skin_weights", self.skin_weights, (V, K)), ("regressor", self.regressor, (K, V))):
            if w.shape != shape:
                raise ModelInvariantError(f"{name} shape {w.shape} != {shape}")
            if np.any(w < 0) or np.any(np.abs(w.sum(axis=1) - 1.0) > 1e-6):
                raise ModelInvariantError(f"{name} rows must be convex")
        jm = self.joint_map
        if len(set(jm.tolist())) != len(jm) or np.any(jm < 0) or np.any(jm >= K):
            raise ModelInvariantError("joint_map must be injective into 0..K-1")

    def rest_joints(self, betas=None) -> np.ndarray:
        shaped = self.template if betas is None else self.template + self.shape_dirs @ np.asarray(betas)
        return self.regressor @ shaped

    def height(self) -> float:
        return float(np.ptp(self.template[:, 1]))


# -- model I/O -----------------------------------------------------------

def save_model(path, model: BodyModel) -> None:
    container.write(
        path,
        MAGIC,
        {
            "parent": model.parent.astype(np.float64),
            "template": model.template,
            "shape_dirs": model.shape_dirs,
            "skin_weights": model.skin_weights,
            "regressor": model.regressor,
            "joint_map": model.joint_map.astype(np.float64),
        },
    )


def load_model(path) -> BodyModel:
    arrays = container.read(path, MAGIC)
    missing = {"parent", "template", "shape_dirs", "skin_weights", "regressor", "joint_map"} - set(arrays)
    if missing:
        raise container.FormatError(f"body model file lacks arrays {sorted(missing)}")
    model = BodyModel(
        parent=arrays["parent"].astype(np.int64),
        template=arrays["template"],
        shape_dirs=arrays["shape_dirs"],
        skin_weights=arrays["skin_weights"],
        regressor=arrays["regressor"],
        joint_map=arrays["joint_map"].astype(np.int64),
    )
    model.validate()
    return model


# -- procedural humanoid -------------------------------------------------

def _segments(parent):
    children = {k: [] for k in range(len(parent))}
    for k in range(1, len(parent)):
        children[int(parent[k])].append(k)
    return children


def _point_segment_distance(p, a, b):
    ab = b - a
    denom = ab @ ab
    u = np.clip(((p - a) @ ab) / denom, 0.0, 1.0) if denom > 0 else np.zeros(len(p))
    closest = a + u[:, None] * ab
    return np.linalg.norm(p - closest, axis=1), closest


def _convex_fit(vertices: np.ndarray, target: np.ndarray, neighbors: int, ridge: float = 1e-3) -> np.ndarray:
    d = np.linalg.norm(vertices - target, axis=1)
    idx = np.argsort(d, kind="stable")[:neighbors]
    m = len(idx)
    A = np.vstack([vertices[idx].T, 100.0 * np.ones((1, m)), np.sqrt(ridge) * np.eye(m)])
    b = np.concatenate([target, [100.0], np.sqrt(ridge) * np.full(m, 1.0 / m)])
    w, _ = nnls(A, b)
    row = np.zeros(len(vertices))
    row[idx] = w / w.sum()
    return row


def synth_model(
    rng: np.random.Generator,
    num_vertices: int = 800,
    limb_scale: float = 1.0,
    girth_scale: float = 1.0,
    regressor_neighbors: int = 16,
) -> BodyModel:
    """Procedural humanoid: capsule-sampled vertices per bone, distance-falloff skinning.

    The result is rescaled so the regressed rest-pose head-to-hip-midpoint
    distance is exactly 1, matching the 1 m skeleton scale of the camera setup.
    """
    K = K_JOINTS
    if num_vertices < 2 * K:
        raise ValueError(f"need at least {2 * K} vertices, got {num_vertices}")
    parent = SMPL_PARENTS.copy()
    joints = _REST_JOINTS.copy()
    joints[:, 0] *= np.where(np.isin(np.arange(K), _ARM), limb_scale, 1.0)
    joints[_LEG, 1] = joints[_LEG, 1] * limb_scale
    radii = _RADII * girth_scale
    children = _segments(parent)

    # geometry pieces: (owner joint, start, end, radius); leaves become spheres
    pieces = []
    for k in range(K):
        if children[k]:
            for c in children[k]:
                pieces.append((k, joints[k], joints[c], radii[k]))
        else:
            pieces.append((k, joints[k], joints[k], radii[k]))
    areas = np.array(
        [2 * np.pi * r * np.linalg.norm(b - a) + 4 * np.pi * r * r for _, a, b, r in pieces]
    )
    counts = np.maximum(2, np.floor(areas / areas.sum() * num_vertices).astype(int))
    while counts.sum() > num_vertices:
        counts[np.argmax(counts)] -= 1
    while counts.sum() < num_vertices:
        counts[np.argmax(areas / counts)] += 1

    verts, owner, axis_pt = [], [], []
    for (k, a, b, r), n in zip(pieces, counts):
        d = b - a
        length = np.linalg.norm(d)
        if length < 1e-9:
            dirs = rng.normal(size=(n, 3))
            dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
            if k == 15:  # head sphere sits above the head joint
                centre = a + np.array([0.0, 0.06, 0.0])
            else:
                centre = a
            verts.append(centre + r * dirs)
            axis_pt.append(np.repeat(centre[None], n, axis=0))
        else:
            axis = d / length
            helper = np.array([0.0, 0.0, 1.0]) if abs(axis[2]) < 0.9 else np.array([1.0, 0.0, 0.0])
            e1 = np.cross(axis, helper)
            e1 /= np.linalg.norm(e1)
            e2 = np.cross(axis, e1)
            u = rng.uniform(0.0, 1.0, size=n)
            theta = rng.uniform(0.0, 2 * np.pi, size=n)
            on_axis = a + u[:, None] * d
            verts.append(on_axis + r * (np.cos(theta)[:, None] * e1 + np.sin(theta)[:, None] * e2))
            axis_pt.append(on_axis)
        owner.extend([k] * n)
    template = np.concatenate(verts)
    axis_pt = np.concatenate(axis_pt)
    owner = np.array(owner)
    V = len(template)

    # skinning: gaussian falloff on the distance to each joint's owned geometry
    dist = np.full((V, K), np.inf)
    for k, a, b, _ in pieces:
        dk, _ = _point_segment_distance(template, a, b)
        dist[:, k] = np.minimum(dist[:, k], dk)
    rel = dist - dist.min(axis=1, keepdims=True)
    sigma = 0.03
    w = np.exp(-((rel / sigma) ** 2))
    cutoff = np.sort(w, axis=1)[:, -4][:, None]
    w[w < cutoff] = 0.0
    w[w < 1e-6] = 0.0
    skin = w / w.sum(axis=1, keepdims=True)

    # regressor: convex weights over the vertices nearest each joint, fitted so
    # their weighted centroid lands on the designed joint location
    regressor = np.zeros((K, V))
    for k in range(K):
        regressor[k] = _convex_fit(template, joints[k], regressor_neighbors)

    # shape directions, each a linear displacement field of the template
    sd = np.zeros((V, 3, NUM_BETAS))
    radial = template - axis_pt
    leg = np.isin(owner, _LEG)
    arm = np.isin(owner, _ARM)
    head = owner == 15
    sd[:, :, 0] = 0.06 * template
    sd[:, :, 1] = 0.15 * radial
    sd[leg, 1, 2] = 0.08 * np.minimum(template[leg, 1] - joints[1, 1], 0.0)
    sd[arm, 0, 3] = 0.08 * (template[arm, 0] - np.sign(template[arm, 0]) * joints[16, 0])
    sd[:, 1, 4] = 0.05 * np.maximum(template[:, 1], 0.0)
    sd[arm | np.isin(owner, (13, 14)), 0, 5] = 0.02 * np.sign(template[arm | np.isin(owner, (13, 14)), 0])
    sd[leg, 0, 6] = 0.015 * np.sign(template[leg, 0])
    sd[head, :, 7] = 0.1 * (template[head] - (joints[15] + np.array([0.0, 0.06, 0.0])))
    sd[arm, :, 8] = 0.15 * radial[arm]
    sd[leg, :, 9] = 0.15 * radial[leg]

    # image convention: y down
    flip = np.array([1.0, -1.0, 1.0])
    template = template * flip
    sd = sd * flip[None, :, None]

    rest = regressor @ template
    hip_mid = 0.5 * (rest[1] + rest[2])
    unit = np.linalg.norm(rest[15] - hip_mid)
    template = (template - rest[0]) / unit
    sd = sd / unit

    model = BodyModel(
        parent=parent,
        template=template,
        shape_dirs=sd,
        skin_weights=skin,
        regressor=regressor,
        joint_map=SMPL_JOINT_MAP.copy(),
    )
    model.validate()
    return model


def annotation_regressor(
    model: BodyModel,
    shifts: dict[int, tuple[float, float, float]] | None = None,
    neighbors: int = 12,
) -> np.ndarray:
    """Convex regressor whose selected joints sit near the body surface.

    Mimics a 2D annotation convention that differs from the model's joints
    (e.g. hips near the periphery rather than the pelvis centre).  ``shifts``
    maps joint index -> displacement of the target point in model units.
    """
    if shifts is None:
        shifts = {1: (0.12, 0.0, 0.0), 2: (-0.12, 0.0, 0.0), 15: (0.0, -0.12, 0.0), 12: (0.0, 0.0, -0.06)}
    W = model.regressor.copy()
    rest = model.rest_joints()
    for k, delta in shifts.items():
        W[k] = _convex_fit(model.template, rest[k] + np.asarray(delta), neighbors)
    return W


# -- differentiable operations -------------------------------------------

def _cross(a: Tensor, b: Tensor) -> Tensor:
    ax, ay, az = a[..., 0], a[..., 1], a[..., 2]
    bx, by, bz = b[..., 0], b[..., 1], b[..., 2]
    return ad.stack([ay * bz - az * by, az * bx - ax * bz, ax * by - ay * bx], axis=-1)


def orthonormalize(M, max_condition: float = 1e6) -> Tensor:
    """Gram-Schmidt on the first two columns, third column = their cross product."""
    M = ad.as_tensor(M)
    if M.shape[-2:] != (3, 3):
        raise ad.ShapeError(f"orthonormalize expects [..., 3, 3], got {M.shape}")
    sv = np.linalg.svd(M.data[..., :, :2], compute_uv=False)
    if np.any(sv[..., 1] * max_condition <= sv[..., 0]) or np.any(sv[..., 0] == 0):
        raise OrthonormalizationError("first two columns are near-parallel or vanishing")
    a1, a2 = M[..., :, 0], M[..., :, 1]
    e1 = a1 / ad.sqrt((a1 * a1).sum(axis=-1, keepdims=True))
    u2 = a2 - (e1 * a2).sum(axis=-1, keepdims=True) * e1
    e2 = u2 / ad.sqrt((u2 * u2).sum(axis=-1, keepdims=True))
    e3 = _cross(e1, e2)
    return ad.stack([e1, e2, e3], axis=-1)


def lbs_forward(model: BodyModel, betas, rotations) -> tuple[Tensor, Tensor]:
    """Skinned vertices [..., V, 3] and posed joints [..., K, 3].

    ``betas`` is [10] or [F, 10]; ``rotations`` is [K, 3, 3] or [F, K, 3, 3].
    No pose-corrective blendshapes.
    """
    betas = ad.as_tensor(betas)
    R = ad.as_tensor(rotations)
    single = R.ndim == 3
    if single:
        R = R.reshape((1,) + R.shape)
    if betas.ndim == 1:
        betas = betas.reshape(1, -1)
    F, K = R.shape[0], model.num_joints
    V = model.num_vertices
    sd = model.shape_dirs.reshape(V * 3, NUM_BETAS)
    shaped = (betas @ sd.T).reshape(betas.shape[0], V, 3) + model.template  # [F or 1, V, 3]
    j_rest = ad.matmul(model.regressor, shaped)  # [F, K, 3]
    if j_rest.shape[0] != F:
        j_rest = j_rest * np.ones((F, 1, 1))
        shaped = shaped * np.ones((F, 1, 1))

    rot = [R[:, 0]]
    trans = [j_rest[:, 0]]
    for k in range(1, K):
        p = int(model.parent[k])
        offset = j_rest[:, k] - j_rest[:, p]
        rot.append(ad.matmul(rot[p], R[:, k]))
        trans.append(ad.matmul(rot[p], offset.reshape(F, 3, 1)).reshape(F, 3) + trans[p])
    G_rot = ad.stack(rot, axis=1)  # [F, K, 3, 3]
    G_t = ad.stack(trans, axis=1)  # [F, K, 3]

    # skinning transforms map rest-space points: A_k(x) = G_rot_k (x - j_rest_k) + G_t_k
    A_t = G_t - ad.matmul(G_rot, j_rest.reshape(F, K, 3, 1)).reshape(F, K, 3)
    blend_rot = ad.matmul(model.skin_weights, G_rot.reshape(F, K, 9)).reshape(F, V, 3, 3)
    blend_t = ad.matmul(model.skin_weights, A_t)  # [F, V, 3]
    verts = ad.matmul(blend_rot, shaped.reshape(F, V, 3, 1)).reshape(F, V, 3) + blend_t
    if single:
        return verts.reshape(V, 3), G_t.reshape(K, 3)
    return verts, G_t


def regress_joints(weights, vertices) -> Tensor:
    """J = W V, broadcasting over leading vertex batch axes."""
    return ad.matmul(weights, vertices)


def sja_weights(logits) -> Tensor:
    return ad.softmax_rows(logits)


def sja_init(W: np.ndarray, eps: float = 1e-8) -> np.ndarray:
    """Logits whose row-softmax reproduces W up to eps * V per row."""
    return np.log(np.asarray(W, dtype=np.float64) + eps)


def linear_sja(J, A, b) -> Tensor:
    """Unconstrained affine correction of the vectorized joints (ablation only)."""
    J = ad.as_tensor(J)
    return ad.matmul(J, ad.as_tensor(A).T) + b


def mapped_joints(model: BodyModel, weights, vertices) -> Tensor:
    """Regressed joints selected through the joint map, [..., N, 3]."""
    return regress_joints(ad.as_tensor(weights)[model.joint_map], vertices)
