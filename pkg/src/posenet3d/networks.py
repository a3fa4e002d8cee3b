"""Temporal backbone, teacher and student heads, discriminator, init and checkpoints.

Forward functions take a mapping ``P`` from parameter name to a Tensor (trainable)
or a plain array (frozen constant).  BatchNorm running statistics live in a
separate ``buffers`` dict and are updated in place in train mode.
"""
from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from . import autodiff as ad
from . import container
from .autodiff import Tensor
from .bodymodel import K_JOINTS, NUM_BETAS, orthonormalize, sja_init

CKPT_MAGIC = b"PN3D-CP"


class ConfigMismatchError(ValueError):
    pass


@dataclass(frozen=True)
class NetConfig:
    T: int = 9
    N: int = 14
    K: int = K_JOINTS
    channels: int = 1024
    dropout: float = 0.25
    kernel: int = 3
    dilations: tuple[int, int, int] = (1, 3, 1)
    teacher_blocks: int = 1
    student_blocks: int = 4
    linear_sja: bool = False

    def validate(self) -> None:
        if self.T < 1 or self.T % 2 == 0:
            raise ad.ConfigError(f"window length T must be odd and >= 1, got {self.T}")
        if not 0.0 <= self.dropout < 1.0:
            raise ad.ConfigError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.channels < 1:
            raise ad.ConfigError("channels must be positive")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["dilations"] = list(self.dilations)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "NetConfig":
        d = dict(d)
        if "dilations" in d:
            d["dilations"] = tuple(d["dilations"])
        return cls(**d)


@dataclass
class ModelParams:
    cfg: NetConfig
    values: dict[str, np.ndarray]
    buffers: dict[str, np.ndarray] = field(default_factory=dict)

    def names(self, prefix: str | tuple[str, ...] = "") -> list[str]:
        prefixes = (prefix,) if isinstance(prefix, str) else prefix
        return [n for n in self.values if any(n.startswith(p) for p in prefixes)]

    def copy(self) -> "ModelParams":
        return ModelParams(
            self.cfg,
            {k: v.copy() for k, v in self.values.items()},
            {k: v.copy() for k, v in self.buffers.items()},
        )

    def bind(self, trainable=()) -> dict[str, Tensor]:
        """Tensors for a forward pass; names in ``trainable`` require gradients."""
        trainable = set(trainable)
        return {k: Tensor(v, requires_grad=k in trainable, name=k) for k, v in self.values.items()}

    def digest(self, prefix: str | tuple[str, ...] = "") -> str:
        h = hashlib.sha256()
        for name in sorted(self.names(prefix)):
            h.update(name.encode())
            h.update(np.ascontiguousarray(self.values[name]).tobytes())
        return h.hexdigest()

    def count(self, prefix: str = "") -> int:
        return int(sum(self.values[n].size for n in self.names(prefix)))


# -- init ------------------------------------------------------------------

def _uniform(rng, shape, fan_in, gain=1.0):
    bound = gain / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def _conv_stack(rng, values, buffers, prefix, cfg: NetConfig, c_in: int, batchnorm: bool):
    C, ks = cfg.channels, cfg.kernel
    for i in range(3):
        cin = c_in if i == 0 else C
        values[f"{prefix}.conv{i}.weight"] = _uniform(rng, (C, cin, ks), cin * ks)
        values[f"{prefix}.conv{i}.bias"] = np.zeros(C)
        if batchnorm:
            values[f"{prefix}.bn{i}.gamma"] = np.ones(C)
            values[f"{prefix}.bn{i}.beta"] = np.zeros(C)
            buffers[f"{prefix}.bn{i}.running_mean"] = np.zeros(C)
            buffers[f"{prefix}.bn{i}.running_var"] = np.ones(C)


def _fc_block(rng, values, buffers, prefix, C):
    for i in range(2):
        values[f"{prefix}.fc{i}.weight"] = _uniform(rng, (C, C), C)
        values[f"{prefix}.fc{i}.bias"] = np.zeros(C)
        values[f"{prefix}.bn{i}.gamma"] = np.ones(C)
        values[f"{prefix}.bn{i}.beta"] = np.zeros(C)
        buffers[f"{prefix}.bn{i}.running_mean"] = np.zeros(C)
        buffers[f"{prefix}.bn{i}.running_var"] = np.ones(C)


def init_params(rng: np.random.Generator, cfg: NetConfig = NetConfig(), regressor: np.ndarray | None = None) -> ModelParams:
    """Fan-in uniform weights, zero biases, identity-biased rotation head.

    ``regressor`` ([K, V]) seeds the SJA logits; without it no SJA parameters exist.
    """
    cfg.validate()
    C, N, K = cfg.channels, cfg.N, cfg.K
    values: dict[str, np.ndarray] = {}
    buffers: dict[str, np.ndarray] = {}
    _conv_stack(rng, values, buffers, "backbone", cfg, 2 * N, batchnorm=True)
    for b in range(cfg.teacher_blocks):
        _fc_block(rng, values, buffers, f"teacher.block{b}", C)
    values["teacher.out.weight"] = _uniform(rng, (N, C), C, gain=1e-2)
    values["teacher.out.bias"] = np.zeros(N)
    for b in range(cfg.student_blocks):
        _fc_block(rng, values, buffers, f"student.block{b}", C)
    values["student.rot.weight"] = _uniform(rng, (K * 9, C), C, gain=1e-2)
    values["student.rot.bias"] = np.tile(np.eye(3).ravel(), K)
    values["student.beta.weight"] = _uniform(rng, (NUM_BETAS, C), C, gain=1e-2)
    values["student.beta.bias"] = np.zeros(NUM_BETAS)
    _conv_stack(rng, values, buffers, "disc", cfg, 2 * N, batchnorm=False)
    values["disc.out.weight"] = _uniform(rng, (1, C), C)
    values["disc.out.bias"] = np.zeros(1)
    if regressor is not None:
        values["sja.logits"] = sja_init(regressor)
    if cfg.linear_sja:
        values["lsja.A"] = np.eye(3 * K)
        values["lsja.b"] = np.zeros(3 * K)
    return ModelParams(cfg, values, buffers)


# -- forward passes --------------------------------------------------------

def _conv_block(P, buffers, prefix, i, x, dilation, mode, rng, p_drop, batchnorm):
    h = ad.conv1d(x, P[f"{prefix}.conv{i}.weight"], P[f"{prefix}.conv{i}.bias"], dilation=dilation)
    if batchnorm:
        h = ad.batchnorm(
            h,
            P[f"{prefix}.bn{i}.gamma"],
            P[f"{prefix}.bn{i}.beta"],
            buffers.get(f"{prefix}.bn{i}.running_mean"),
            buffers.get(f"{prefix}.bn{i}.running_var"),
            mode=mode,
        )
    h = ad.relu(h)
    return ad.dropout(h, p_drop, rng, mode)


def _temporal(P, buffers, prefix, x, cfg: NetConfig, mode, rng, batchnorm):
    x = ad.as_tensor(x)
    if x.ndim != 3 or x.shape[1] != 2 * cfg.N:
        raise ad.ShapeError(f"{prefix}: expected input [B, {2 * cfg.N}, T], got {x.shape}")
    d0, d1, d2 = cfg.dilations
    h = _conv_block(P, buffers, prefix, 0, x, d0, mode, rng, cfg.dropout, batchnorm)
    r = _conv_block(P, buffers, prefix, 1, h, d1, mode, rng, cfg.dropout, batchnorm)
    r = _conv_block(P, buffers, prefix, 2, r, d2, mode, rng, cfg.dropout, batchnorm)
    return h + r


def backbone_forward(P, buffers, x2d, cfg: NetConfig, mode: str = "eval", rng=None) -> Tensor:
    """[B, 2N, T] -> [B, C, T] shared temporal features."""
    return _temporal(P, buffers, "backbone", x2d, cfg, mode, rng, batchnorm=True)


def _fc_residual(P, buffers, prefix, f, mode, rng, p_drop):
    h = f
    for i in range(2):
        h = ad.linear(h, P[f"{prefix}.fc{i}.weight"], P[f"{prefix}.fc{i}.bias"])
        h = ad.batchnorm(
            h,
            P[f"{prefix}.bn{i}.gamma"],
            P[f"{prefix}.bn{i}.beta"],
            buffers.get(f"{prefix}.bn{i}.running_mean"),
            buffers.get(f"{prefix}.bn{i}.running_var"),
            mode=mode,
        )
        h = ad.dropout(ad.relu(h), p_drop, rng, mode)
    return f + h


def _per_step(features) -> tuple[Tensor, int, int]:
    features = ad.as_tensor(features)
    B, C, T = features.shape
    return features.transpose(0, 2, 1).reshape(B * T, C), B, T


def teacher_forward(P, buffers, features, cfg: NetConfig, mode: str = "eval", rng=None) -> Tensor:
    """[B, C, T] -> depth offsets [B, T, N], applied independently per time step."""
    f, B, T = _per_step(features)
    for b in range(cfg.teacher_blocks):
        f = _fc_residual(P, buffers, f"teacher.block{b}", f, mode, rng, cfg.dropout)
    out = ad.linear(f, P["teacher.out.weight"], P["teacher.out.bias"])
    return out.reshape(B, T, cfg.N)


def student_forward(P, buffers, features, cfg: NetConfig, mode: str = "eval", rng=None) -> tuple[Tensor, Tensor]:
    """[B, C, T] -> (rotations [B, T, K, 3, 3], betas [B, 10]).

    Rotations come from a per-step 216-wide layer followed by Gram-Schmidt;
    betas from the temporal mean of the trunk output, shared by the window.
    """
    f, B, T = _per_step(features)
    for b in range(cfg.student_blocks):
        f = _fc_residual(P, buffers, f"student.block{b}", f, mode, rng, cfg.dropout)
    raw = ad.linear(f, P["student.rot.weight"], P["student.rot.bias"]).reshape(B, T, cfg.K, 3, 3)
    pooled = f.reshape(B, T, -1).mean(axis=1)
    betas = ad.linear(pooled, P["student.beta.weight"], P["student.beta.bias"])
    return orthonormalize(raw), betas


def discriminator_forward(P, x2d, cfg: NetConfig, mode: str = "eval", rng=None) -> Tensor:
    """[B, 2N, T] -> logits [B]; backbone clone without BatchNorm, temporal mean, linear."""
    h = _temporal(P, {}, "disc", x2d, cfg, mode, rng, batchnorm=False)
    pooled = h.mean(axis=2)
    return ad.linear(pooled, P["disc.out.weight"], P["disc.out.bias"]).reshape(-1)


def window_output_count(cfg: NetConfig) -> int:
    """Student outputs per window: betas plus one 3x3 block per joint per frame."""
    return NUM_BETAS + 9 * cfg.K * cfg.T


# -- checkpoints -----------------------------------------------------------

@dataclass
class Checkpoint:
    params: ModelParams
    meta: dict = field(default_factory=dict)


def save_checkpoint(path, params: ModelParams, meta: dict | None = None) -> None:
    """Parameters, BN buffers, NetConfig and free-form JSON metadata (train config, rng state)."""
    arrays: dict[str, np.ndarray] = {"meta/netconfig": container.pack_json(params.cfg.to_dict())}
    arrays["meta/info"] = container.pack_json(meta or {})
    for k, v in params.values.items():
        arrays[f"param/{k}"] = v
    for k, v in params.buffers.items():
        arrays[f"buffer/{k}"] = v
    container.write(path, CKPT_MAGIC, arrays)


def load_checkpoint(path, cfg: NetConfig | None = None) -> Checkpoint:
    arrays = container.read(path, CKPT_MAGIC)
    if "meta/netconfig" not in arrays:
        raise container.FormatError("checkpoint lacks its network config record")
    stored = NetConfig.from_dict(container.unpack_json(arrays["meta/netconfig"]))
    if cfg is not None and stored != cfg:
        diff = {k: (v, getattr(cfg, k)) for k, v in stored.to_dict().items() if cfg.to_dict()[k] != v}
        raise ConfigMismatchError(f"checkpoint was written for a different network config: {diff}")
    values = {k[6:]: v for k, v in arrays.items() if k.startswith("param/")}
    buffers = {k[7:]: v for k, v in arrays.items() if k.startswith("buffer/")}
    meta = container.unpack_json(arrays["meta/info"]) if "meta/info" in arrays else {}
    return Checkpoint(ModelParams(stored, values, buffers), meta)
