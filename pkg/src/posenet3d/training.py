"""Four-stage schedule: teacher with adversarial reprojection, distillation into the
parametric student, joint-regressor adaptation, and joint fine-tuning.

Each stage draws its randomness (window order, dropout, camera rotations) from
``default_rng([seed, stage])`` and starts a fresh Adam state, so running stages
one at a time from checkpoints matches running them back to back.
"""
from __future__ import annotations

import dataclasses
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from . import autodiff as ad
from . import geometry as geo
from . import losses as L
from .autodiff import Tensor
from .bodymodel import BodyModel, lbs_forward, linear_sja, regress_joints, sja_init, sja_weights
from .data import KeypointSequence, WindowBatch, assemble_batch, window_index
from .networks import (
    ModelParams,
    NetConfig,
    backbone_forward,
    discriminator_forward,
    student_forward,
    teacher_forward,
)

logger = logging.getLogger(__name__)

GENERATOR = ("backbone.", "teacher.")
STUDENT = ("student.",)
DISC = ("disc.",)


class DivergenceError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    net: NetConfig = NetConfig()
    weights: L.LossWeights = L.LossWeights()
    batch_size: int = 64
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    epochs: tuple[int, int, int, int] = (60, 30, 30, 30)
    seed: int = 0
    disc_steps: int = 1
    rotation_samples: int = 1
    stride: int = 1
    max_windows: int = 0  # per epoch, 0 = all
    freeze_disc: bool = False
    distill_target: str = "teacher"  # or "gt" when windows carry 3D targets
    log_wall_time: bool = False

    @property
    def T(self) -> int:
        return self.net.T

    def validate(self) -> None:
        self.net.validate()
        if self.batch_size < 1:
            raise ad.ConfigError("batch_size must be >= 1")
        if not (self.lr > 0 and 0 < self.beta1 < 1 and 0 < self.beta2 < 1 and self.eps > 0):
            raise ad.ConfigError("learning rate and Adam constants must be positive (betas below 1)")
        if len(self.epochs) != 4 or any(e < 0 for e in self.epochs):
            raise ad.ConfigError("epochs must list four non-negative counts")
        if self.distill_target not in ("teacher", "gt"):
            raise ad.ConfigError(f"distill_target must be 'teacher' or 'gt', got {self.distill_target!r}")
        if self.disc_steps < 0 or self.rotation_samples < 1 or self.stride < 1:
            raise ad.ConfigError("disc_steps >= 0, rotation_samples >= 1 and stride >= 1 required")

    # flat dotted-key view used by config files and manifests
    def to_flat(self) -> dict[str, object]:
        out: dict[str, object] = {}
        for k, v in self.net.to_dict().items():
            out[f"net.{k}"] = v
        for k, v in dataclasses.asdict(self.weights).items():
            out[f"loss.{k}"] = v
        for f in dataclasses.fields(self):
            if f.name in ("net", "weights"):
                continue
            v = getattr(self, f.name)
            out[f"train.{f.name}"] = list(v) if isinstance(v, tuple) else v
        return out

    @classmethod
    def from_flat(cls, flat: Mapping[str, object], base: "TrainConfig | None" = None) -> "TrainConfig":
        base = base or cls()
        net = base.net.to_dict()
        weights = dataclasses.asdict(base.weights)
        top = {f.name: getattr(base, f.name) for f in dataclasses.fields(cls) if f.name not in ("net", "weights")}
        for key, raw in flat.items():
            section, _, name = key.partition(".")
            target = {"net": net, "loss": weights, "train": top}.get(section)
            if name.startswith("epochs.stage") and section == "train":
                idx = int(name[len("epochs.stage") :]) - 1
                if not 0 <= idx < 4:
                    raise ad.ConfigError(f"unknown config key {key!r}")
                ep = list(top["epochs"])
                ep[idx] = int(raw)
                top["epochs"] = tuple(ep)
                continue
            if target is None or name not in target:
                raise ad.ConfigError(f"unknown config key {key!r}")
            target[name] = _coerce(raw, target[name], key)
        cfg = cls(net=NetConfig.from_dict(net), weights=L.LossWeights(**weights), **top)
        cfg.validate()
        return cfg


def _coerce(raw, current, key):
    try:
        if isinstance(current, bool):
            if isinstance(raw, str):
                if raw.lower() not in ("true", "false", "1", "0", "yes", "no"):
                    raise ValueError(raw)
                return raw.lower() in ("true", "1", "yes")
            return bool(raw)
        if isinstance(current, (tuple, list)):
            items = raw.split(",") if isinstance(raw, str) else list(raw)
            return tuple(type(current[0])(x) for x in items)
        if isinstance(current, int):
            return int(raw)
        if isinstance(current, float):
            return float(raw)
        return str(raw)
    except (TypeError, ValueError) as exc:
        raise ad.ConfigError(f"config key {key!r}: cannot interpret {raw!r}") from exc


# -- optimizer -------------------------------------------------------------

@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adam_step(
    values: dict[str, np.ndarray],
    grads: Mapping[str, np.ndarray | None],
    state: AdamState,
    lr: float = 1e-4,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """Bias-corrected Adam.  Parameters are replaced, never mutated in place,
    so tensors bound before the step keep their old values."""
    state.t += 1
    c1 = 1.0 - beta1**state.t
    c2 = 1.0 - beta2**state.t
    for name, g in grads.items():
        if g is None:
            g = np.zeros_like(values[name])
        m = state.m.get(name)
        v = state.v.get(name)
        m = (1.0 - beta1) * g if m is None else beta1 * m + (1.0 - beta1) * g
        v = (1.0 - beta2) * g * g if v is None else beta2 * v + (1.0 - beta2) * g * g
        state.m[name], state.v[name] = m, v
        values[name] = values[name] - lr * (m / c1) / (np.sqrt(v / c2) + eps)


# -- lifters ---------------------------------------------------------------

def channels(joints) -> Tensor:
    """[B, T, N, 2] -> [B, 2N, T], differentiable."""
    j = ad.as_tensor(joints)
    B, T, N, _ = j.shape
    return j.reshape(B, T, 2 * N).transpose(0, 2, 1)


class NetworkLifter:
    """Backbone + teacher head as a lifter; ignores ground truth."""

    def __init__(self, P, buffers, cfg: NetConfig, mode: str = "train", rng=None):
        self.P, self.buffers, self.cfg, self.mode, self.rng = P, buffers, cfg, mode, rng

    def __call__(self, joints, truth=None) -> Tensor:
        feats = backbone_forward(self.P, self.buffers, channels(joints), self.cfg, self.mode, self.rng)
        return teacher_forward(self.P, self.buffers, feats, self.cfg, self.mode, self.rng)


class OracleLifter:
    """Returns the true depth offsets z - c; needs ground truth."""

    def __init__(self, camera: geo.CameraConvention = geo.CAMERA):
        self.camera = camera

    def __call__(self, joints, truth=None) -> Tensor:
        if truth is None:
            raise ValueError("the oracle lifter needs ground-truth 3D joints")
        truth = truth.data if isinstance(truth, Tensor) else np.asarray(truth)
        return Tensor(truth[..., 2] - self.camera.c)


@dataclass
class TeacherPass:
    parts: dict[str, Tensor]
    X: Tensor  # lifted windows [B, T, N, 3]
    Q: np.ndarray  # [B * samples, 3, 3]
    Y: Tensor  # rotated and placed
    y: Tensor  # reprojection [B * samples, T, N, 2]


def stage1_losses(
    lifter: Callable,
    batch: WindowBatch,
    rng: np.random.Generator,
    samples: int = 1,
    camera: geo.CameraConvention = geo.CAMERA,
) -> TeacherPass:
    """Geometric teacher losses (self-supervision, temporal consistency, bone length).

    The reprojection is re-lifted without renormalization so that exact offsets
    reproduce Y exactly.
    """
    B = len(batch)
    idx = np.flatnonzero(batch.has_next)
    J = np.concatenate([batch.joints, batch.next_joints[idx]])
    truth = None
    if batch.joints3d is not None:
        truth = np.concatenate([batch.joints3d, batch.next_joints3d[idx]])
    X_all = geo.lift(J, lifter(J, truth), camera)
    X = X_all[:B]
    if len(idx):
        tc = L.loss_tc(X[idx], X_all[B:])
    else:
        tc = Tensor(0.0)
    bl = L.loss_bl(X)
    Q = geo.sample_rotation(rng, camera, size=B * samples)
    X_rep = X if samples == 1 else ad.concat([X] * samples, axis=0)
    Y = geo.rotate_place(X_rep, Q, camera=camera)
    if np.any(Y.data[..., 2] <= 0):
        raise DivergenceError("rotated skeleton crossed the camera plane")
    y = geo.project(Y)
    Y_tilde = geo.lift(y, lifter(y, Y.data), camera)
    mss = L.loss_mss(Y, Y_tilde)
    return TeacherPass({"mss": mss, "tc": tc, "bl": bl}, X, Q, Y, y)


def _disc_update(params: ModelParams, real_x2d, fake_x2d, cfg: TrainConfig, rng, state: AdamState) -> tuple[float, float]:
    """One discriminator step on detached fakes; only disc parameters are bound as trainable."""
    names = params.names(DISC)
    P = params.bind(names)
    real = discriminator_forward(P, real_x2d, cfg.net, "train", rng)
    fake = discriminator_forward(P, fake_x2d, cfg.net, "train", rng)
    loss = L.loss_adv_disc(real, fake)
    ad.backward(loss)
    adam_step(params.values, {n: P[n].grad for n in names}, state, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)
    return loss.item(), L.disc_accuracy(real.data, fake.data)


def _fake_logits(params: ModelParams, y: Tensor, cfg: TrainConfig, rng) -> Tensor:
    """Discriminator logits for reprojections, disc parameters held constant."""
    P = {n: params.values[n] for n in params.names(DISC)}
    return discriminator_forward(P, channels(geo.normalize_joints(y)), cfg.net, "train", rng)


def student_joints(P, body: BodyModel, rotations: Tensor, betas: Tensor, regressor: str = "fixed") -> Tensor:
    """Regressed joints [B, T, K, 3] of the skinned student mesh.

    ``regressor`` is "fixed" (model regressor), "sja" (row-softmax of the
    learned logits) or "linear" (affine correction of the fixed regression).
    """
    B, T, K = rotations.shape[:3]
    F = B * T
    b = (betas.reshape(B, 1, -1) * np.ones((1, T, 1))).reshape(F, -1)
    verts, _ = lbs_forward(body, b, rotations.reshape(F, K, 3, 3))
    if regressor == "sja":
        J = regress_joints(sja_weights(P["sja.logits"]), verts)
    else:
        J = regress_joints(body.regressor, verts)
        if regressor == "linear":
            J = linear_sja(J.reshape(F, 3 * K), P["lsja.A"], P["lsja.b"]).reshape(F, K, 3)
    return J.reshape(B, T, K, 3)


def _regressor_mode(params: ModelParams, stage: int) -> str:
    if stage < 3:
        return "fixed"
    if params.cfg.linear_sja:
        return "linear"
    return "sja" if "sja.logits" in params.values else "fixed"


# -- per-batch steps -------------------------------------------------------

@dataclass
class StepContext:
    params: ModelParams
    cfg: TrainConfig
    body: BodyModel | None
    rng: np.random.Generator
    gen_state: AdamState = field(default_factory=AdamState)
    disc_state: AdamState = field(default_factory=AdamState)


def _apply(ctx: StepContext, P, names, total: Tensor, state: AdamState) -> None:
    ad.backward(total)
    cfg = ctx.cfg
    adam_step(ctx.params.values, {n: P[n].grad for n in names}, state, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)


def _values(parts: Mapping[str, Tensor]) -> dict[str, float]:
    return {k: float(v.item()) for k, v in parts.items()}


def step_stage1(ctx: StepContext, batch: WindowBatch) -> dict[str, float]:
    params, cfg, rng = ctx.params, ctx.cfg, ctx.rng
    names = params.names(GENERATOR)
    P = params.bind(names)
    tp = stage1_losses(NetworkLifter(P, params.buffers, cfg.net, "train", rng), batch, rng, cfg.rotation_samples)
    fake = channels(geo.normalize_joints(tp.y))
    log = {}
    if not cfg.freeze_disc:
        for _ in range(cfg.disc_steps):
            log["disc"], log["disc_acc"] = _disc_update(params, batch.x2d, fake.data, cfg, rng, ctx.disc_state)
    parts = dict(tp.parts)
    parts["adv_t"] = cfg.weights.adv * L.loss_adv_gen(_fake_logits(params, tp.y, cfg, rng))
    total = L.stage_losses(cfg.weights, parts, 1)
    log.update(_values(parts), total=total.item())
    _check_finite(log, batch)
    _apply(ctx, P, names, total, ctx.gen_state)
    return log


def _distill_targets(ctx: StepContext, batch: WindowBatch) -> tuple[np.ndarray, np.ndarray]:
    """Frozen backbone features and the teacher's lifted joints (or batch 3D)."""
    params, net = ctx.params, ctx.cfg.net
    feats = backbone_forward(params.values, params.buffers, batch.x2d, net, "eval")
    if ctx.cfg.distill_target == "gt":
        if batch.joints3d is None:
            raise ValueError("distill_target = gt needs windows with 3D joints")
        return feats.data, batch.joints3d
    offsets = teacher_forward(params.values, params.buffers, feats, net, "eval")
    return feats.data, geo.lift(batch.joints, offsets).data


def step_stage2(ctx: StepContext, batch: WindowBatch, stage: int = 2) -> dict[str, float]:
    params, cfg, rng = ctx.params, ctx.cfg, ctx.rng
    if ctx.body is None:
        raise ValueError("student stages need a body model")
    feats, target = _distill_targets(ctx, batch)
    mode = _regressor_mode(params, stage)
    names = params.names(STUDENT)
    if mode == "sja":
        names.append("sja.logits")
    elif mode == "linear":
        names += ["lsja.A", "lsja.b"]
    P = params.bind(names)
    R, betas = student_forward(P, params.buffers, feats, cfg.net, "train", rng)
    J = student_joints(P, ctx.body, R, betas, mode)
    parts = {"kd": L.loss_kd(target, J, ctx.body.joint_map), "rot": L.loss_rot_reg(R), "beta": L.loss_beta(betas)}
    total = L.stage_losses(cfg.weights, parts, stage)
    log = dict(_values(parts), total=total.item())
    _check_finite(log, batch)
    _apply(ctx, P, names, total, ctx.gen_state)
    return log


def step_stage3(ctx: StepContext, batch: WindowBatch) -> dict[str, float]:
    return step_stage2(ctx, batch, stage=3)


def step_stage4(ctx: StepContext, batch: WindowBatch) -> dict[str, float]:
    params, cfg, rng, body = ctx.params, ctx.cfg, ctx.rng, ctx.body
    if body is None:
        raise ValueError("student stages need a body model")
    mode = _regressor_mode(params, 4)
    names = [n for n in params.names() if not n.startswith(DISC)]
    if mode != "sja":
        names = [n for n in names if not n.startswith("sja.")]
    if mode != "linear":
        names = [n for n in names if not n.startswith("lsja.")]
    P = params.bind(names)
    net = cfg.net
    tp = stage1_losses(NetworkLifter(P, params.buffers, net, "train", rng), batch, rng, cfg.rotation_samples)
    feats = backbone_forward(P, params.buffers, batch.x2d, net, "train", rng)
    R, betas = student_forward(P, params.buffers, feats, net, "train", rng)
    J = student_joints(P, body, R, betas, mode)
    parts = dict(tp.parts)
    parts.update(kd=L.loss_kd(tp.X, J, body.joint_map), rot=L.loss_rot_reg(R), beta=L.loss_beta(betas))

    # student skeleton placed like the teacher's: hip midpoint to C, same rotation
    Jm = J[:, :, body.joint_map, :]
    Jm_rep = Jm if cfg.rotation_samples == 1 else ad.concat([Jm] * cfg.rotation_samples, axis=0)
    Ys = geo.rotate_place(Jm_rep, tp.Q)
    if np.any(Ys.data[..., 2] <= 0):
        raise DivergenceError("student skeleton crossed the camera plane")
    ys = geo.project(Ys)
    log = {}
    if not cfg.freeze_disc:
        fake = np.concatenate([channels(geo.normalize_joints(tp.y)).data, channels(geo.normalize_joints(ys)).data])
        for _ in range(cfg.disc_steps):
            log["disc"], log["disc_acc"] = _disc_update(params, batch.x2d, fake, cfg, rng, ctx.disc_state)
    parts["adv_t"] = cfg.weights.adv * L.loss_adv_gen(_fake_logits(params, tp.y, cfg, rng))
    parts["adv_s"] = cfg.weights.adv * L.loss_adv_gen(_fake_logits(params, ys, cfg, rng))
    total = L.stage_losses(cfg.weights, parts, 4)
    log.update(_values(parts), total=total.item())
    _check_finite(log, batch)
    _apply(ctx, P, names, total, ctx.gen_state)
    return log


STEPS = {1: step_stage1, 2: step_stage2, 3: step_stage3, 4: step_stage4}


def _check_finite(log: Mapping[str, float], batch: WindowBatch) -> None:
    bad = [k for k, v in log.items() if not np.isfinite(v)]
    if bad:
        raise DivergenceError(f"non-finite loss {bad} on windows {batch.provenance}")


# -- epoch loop ------------------------------------------------------------

def stage_rng(seed: int, stage: int) -> np.random.Generator:
    return np.random.default_rng([seed, stage])


def prepare_stage(params: ModelParams, stage: int, body: BodyModel | None) -> None:
    """Stage-entry initialization: stage 3 warm-starts the SJA logits from W."""
    if stage == 3:
        if body is None:
            raise ValueError("stage 3 needs a body model")
        params.values["sja.logits"] = sja_init(body.regressor)
        if params.cfg.linear_sja:
            K = body.num_joints
            params.values["lsja.A"] = np.eye(3 * K)
            params.values["lsja.b"] = np.zeros(3 * K)


def run_stage(
    stage: int,
    params: ModelParams,
    sequences: Sequence[KeypointSequence],
    cfg: TrainConfig,
    body: BodyModel | None = None,
    log_path=None,
    epochs: int | None = None,
    on_epoch: Callable[[dict, ModelParams], None] | None = None,
) -> tuple[ModelParams, list[dict]]:
    """Train one stage in place on ``params``; returns params and per-epoch log records."""
    cfg.validate()
    if stage not in STEPS:
        raise ad.ConfigError(f"unknown stage {stage}")
    rng = stage_rng(cfg.seed, stage)
    prepare_stage(params, stage, body)
    ctx = StepContext(params, cfg, body, rng)
    index = window_index(sequences, cfg.T, cfg.stride)
    if not index:
        raise ValueError(f"no window of {cfg.T} contiguous frames in the training data")
    n_epochs = cfg.epochs[stage - 1] if epochs is None else epochs
    records = []
    for epoch in range(1, n_epochs + 1):
        start = time.perf_counter()
        order = rng.permutation(len(index))
        if cfg.max_windows:
            order = order[: cfg.max_windows]
        sums: dict[str, float] = {}
        count = 0
        for b in range(0, len(order), cfg.batch_size):
            batch = assemble_batch(sequences, [index[i] for i in order[b : b + cfg.batch_size]], cfg.T)
            out = STEPS[stage](ctx, batch)
            for k, v in out.items():
                sums[k] = sums.get(k, 0.0) + v * len(batch)
            count += len(batch)
        rec = {"stage": stage, "epoch": epoch}
        rec.update({k: v / count for k, v in sorted(sums.items())})
        if cfg.log_wall_time:
            rec["wall_time"] = time.perf_counter() - start
        records.append(rec)
        if log_path is not None:
            with Path(log_path).open("a", encoding="utf-8") as fh:
                fh.write(json.dumps(rec) + "\n")
        logger.info("stage %d epoch %d: %s", stage, epoch, rec)
        if on_epoch is not None:
            on_epoch(rec, params)
    return params, records


def train_stage1_teacher(cfg, data, params, body=None, **kw):
    return run_stage(1, params, data, cfg, body, **kw)


def train_stage2_distill(cfg, data, params, body, **kw):
    return run_stage(2, params, data, cfg, body, **kw)


def train_stage3_sja(cfg, data, params, body, **kw):
    return run_stage(3, params, data, cfg, body, **kw)


def train_stage4_finetune(cfg, data, params, body, **kw):
    return run_stage(4, params, data, cfg, body, **kw)
