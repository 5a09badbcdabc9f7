"""Small hand-differentiated change-detection network.

Input features per pixel are the concatenation (|a-b|, a, b) of the two
temporal images, so a C-channel pair yields 3*C input channels. The body
is conv3x3 -> ReLU -> conv3x3 -> ReLU -> conv1x1 with 16 hidden channels
and zero padding, keeping the output at input resolution.

Convolutions run as batched GEMMs over channel-major patch buffers of
shape (B, Cin*9, H*W); the backward pass is the hand-derived chain rule
over the same buffers. All ops preserve the parameter dtype (float32 for
training, float64 for gradient verification).
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from typing import List, Sequence, Tuple

import numpy as np

from .numerics import ImagePair, raster_bytes, read_raster

HIDDEN = 16
N_CLASSES = 2
KSIZE = 3


@dataclass
class ModelParams:
    conv1_w: np.ndarray  # (16, 3*C, 3, 3)
    conv1_b: np.ndarray  # (16,)
    conv2_w: np.ndarray  # (16, 16, 3, 3)
    conv2_b: np.ndarray  # (16,)
    head_w: np.ndarray   # (2, 16, 1, 1)
    head_b: np.ndarray   # (2,)

    def astype(self, dtype) -> "ModelParams":
        return ModelParams(*(getattr(self, f.name).astype(dtype) for f in fields(self)))

    def copy(self) -> "ModelParams":
        return ModelParams(*(getattr(self, f.name).copy() for f in fields(self)))

    @property
    def in_channels(self) -> int:
        return self.conv1_w.shape[1]

    @property
    def dtype(self):
        return self.conv1_w.dtype

    def tensors(self) -> List[Tuple[str, np.ndarray]]:
        return [(f.name, getattr(self, f.name)) for f in fields(self)]


# Gradients share the parameter layout exactly.
Gradients = ModelParams


@dataclass
class OptimizerState:
    velocity: ModelParams
    momentum: float = 0.9


def init_params(rng: np.random.Generator, image_channels: int, dtype=np.float32) -> ModelParams:
    """Uniform [-s, s] weights with s = sqrt(6 / (fan_in + fan_out)), zero biases."""
    cin = 3 * image_channels

    def uniform(shape):
        fan_in = shape[1] * shape[2] * shape[3]
        fan_out = shape[0] * shape[2] * shape[3]
        s = np.sqrt(6.0 / (fan_in + fan_out))
        return rng.uniform(-s, s, size=shape).astype(dtype)

    return ModelParams(
        conv1_w=uniform((HIDDEN, cin, KSIZE, KSIZE)),
        conv1_b=np.zeros(HIDDEN, dtype=dtype),
        conv2_w=uniform((HIDDEN, HIDDEN, KSIZE, KSIZE)),
        conv2_b=np.zeros(HIDDEN, dtype=dtype),
        head_w=uniform((N_CLASSES, HIDDEN, 1, 1)),
        head_b=np.zeros(N_CLASSES, dtype=dtype),
    )


def zeros_like_params(params: ModelParams) -> ModelParams:
    return ModelParams(*(np.zeros_like(t) for _, t in params.tensors()))


def init_optimizer(params: ModelParams, momentum: float = 0.9) -> OptimizerState:
    return OptimizerState(velocity=zeros_like_params(params), momentum=momentum)


def pair_features(pair: ImagePair, dtype) -> np.ndarray:
    """(3*C, H, W) feature stack (|a-b|, a, b) in the requested dtype."""
    a = pair.img_a.astype(dtype, copy=False)
    b = pair.img_b.astype(dtype, copy=False)
    return np.concatenate([np.abs(a - b), a, b], axis=0)


@dataclass
class ForwardCache:
    shape: Tuple[int, int, int]  # (B, H, W)
    c1: np.ndarray  # (B, Cin*9, H*W) input patches
    z1: np.ndarray  # (B, 16, H*W) pre-activations, layer 1
    c2: np.ndarray  # (B, 16*9, H*W) hidden patches
    z2: np.ndarray  # (B, 16, H*W) pre-activations, layer 2
    a2: np.ndarray  # (B, 16, H*W) hidden activations


def forward_batch(params: ModelParams, pairs: Sequence[ImagePair]):
    """Logits (B, 2, H, W) plus the cache needed for the backward pass."""
    if len(pairs) == 0:
        raise ValueError("empty batch")
    h, w, c = pairs[0].height, pairs[0].width, pairs[0].channels
    for p in pairs:
        if (p.height, p.width, p.channels) != (h, w, c):
            raise ValueError("all pairs in a batch must share dimensions")
    if params.in_channels != 3 * c:
        raise ValueError(
            f"model expects {params.in_channels // 3}-channel imagery, got {c} channels"
        )
    dtype = params.dtype
    x = np.stack([pair_features(p, dtype) for p in pairs])  # (B, 3C, H, W)
    b = x.shape[0]

    w1 = params.conv1_w.reshape(HIDDEN, -1)
    w2 = params.conv2_w.reshape(HIDDEN, -1)
    w3 = params.head_w.reshape(N_CLASSES, HIDDEN)

    c1 = _im2col(x)
    z1 = w1 @ c1 + params.conv1_b[:, None]
    a1 = np.maximum(z1, 0)
    c2 = _im2col(a1.reshape(b, HIDDEN, h, w))
    z2 = w2 @ c2 + params.conv2_b[:, None]
    a2 = np.maximum(z2, 0)
    z3 = w3 @ a2 + params.head_b[:, None]

    return z3.reshape(b, N_CLASSES, h, w), ForwardCache((b, h, w), c1, z1, c2, z2, a2)


def forward(params: ModelParams, pair: ImagePair):
    """Single-pair forward: logits (2, H, W) plus cache."""
    logits, cache = forward_batch(params, [pair])
    return logits[0], cache


def backward(params: ModelParams, cache: ForwardCache, dlogits: np.ndarray) -> Gradients:
    """Exact gradients of the loss w.r.t. every parameter.

    `dlogits` is (B, 2, H, W) (or (2, H, W) for a single-pair cache) and
    must come from the matching forward call.
    """
    b, h, w = cache.shape
    if dlogits.ndim == 3:
        dlogits = dlogits[None]
    if dlogits.shape != (b, N_CLASSES, h, w):
        raise ValueError(
            f"dlogits shape {dlogits.shape} does not match cache {(b, N_CLASSES, h, w)}"
        )
    dtype = cache.z1.dtype
    g3 = np.ascontiguousarray(dlogits, dtype=dtype).reshape(b, N_CLASSES, h * w)

    w2 = params.conv2_w.reshape(HIDDEN, -1)
    w3 = params.head_w.reshape(N_CLASSES, HIDDEN)

    dw3 = np.matmul(g3, cache.a2.transpose(0, 2, 1)).sum(axis=0)
    db3 = g3.sum(axis=(0, 2))
    dz2 = (w3.T @ g3) * (cache.z2 > 0)
    dw2 = np.matmul(dz2, cache.c2.transpose(0, 2, 1)).sum(axis=0)
    db2 = dz2.sum(axis=(0, 2))
    da1 = _col2im(w2.T @ dz2, b, HIDDEN, h, w).reshape(b, HIDDEN, h * w)
    dz1 = da1 * (cache.z1 > 0)
    dw1 = np.matmul(dz1, cache.c1.transpose(0, 2, 1)).sum(axis=0)
    db1 = dz1.sum(axis=(0, 2))

    cin = params.in_channels
    return Gradients(
        conv1_w=dw1.reshape(HIDDEN, cin, KSIZE, KSIZE),
        conv1_b=db1,
        conv2_w=dw2.reshape(HIDDEN, HIDDEN, KSIZE, KSIZE),
        conv2_b=db2,
        head_w=dw3.reshape(N_CLASSES, HIDDEN, 1, 1),
        head_b=db3,
    )


def add_gradients(a: Gradients, b: Gradients) -> Gradients:
    return Gradients(*(ta + tb for (_, ta), (_, tb) in zip(a.tensors(), b.tensors())))


def sgd_step(
    params: ModelParams, grads: Gradients, state: OptimizerState, lr: float
) -> Tuple[ModelParams, OptimizerState]:
    """v <- mu*v + g; theta <- theta - lr*v. Returns fresh arrays."""
    mu = state.momentum
    new_v = []
    new_p = []
    for (_, p), (_, g), (_, v) in zip(params.tensors(), grads.tensors(), state.velocity.tensors()):
        vn = mu * v + g
        new_v.append(vn)
        new_p.append(p - lr * vn)
    return ModelParams(*new_p), OptimizerState(ModelParams(*new_v), momentum=mu)


def ema_update(teacher: ModelParams, student: ModelParams, beta: float) -> ModelParams:
    """theta_tea <- beta * theta_tea + (1 - beta) * theta_stu, scalarwise."""
    if not 0.0 <= beta <= 1.0:
        raise ValueError("beta must be in [0, 1]")
    return ModelParams(
        *(
            beta * t + (1.0 - beta) * s
            for (_, t), (_, s) in zip(teacher.tensors(), student.tensors())
        )
    )


def quantize_checkpoint_precision(params: ModelParams) -> ModelParams:
    """Round parameters to the float32 stored in checkpoints, keeping dtype."""
    dtype = params.dtype
    return ModelParams(*(t.astype(np.float32).astype(dtype) for _, t in params.tensors()))


def save_checkpoint(path, params: ModelParams) -> None:
    """One raster container per tensor, concatenated; shapes in a text manifest."""
    manifest_lines = []
    with open(path, "wb") as f:
        for name, t in params.tensors():
            flat = t.astype(np.float32).reshape(1, 1, -1)
            f.write(raster_bytes(flat))
            manifest_lines.append(name + " " + " ".join(str(d) for d in t.shape))
    with open(str(path) + ".manifest", "w") as f:
        f.write("\n".join(manifest_lines) + "\n")


def load_checkpoint(path, dtype=np.float32) -> ModelParams:
    with open(str(path) + ".manifest") as f:
        entries = [line.split() for line in f.read().splitlines() if line.strip()]
    tensors = {}
    with open(path, "rb") as f:
        for entry in entries:
            name, shape = entry[0], tuple(int(d) for d in entry[1:])
            tensors[name] = read_raster(f).reshape(shape).astype(dtype)
    try:
        return ModelParams(**tensors)
    except TypeError as e:
        raise ValueError(f"checkpoint manifest does not describe a model: {e}") from e


# --- conv plumbing ------------------------------------------------------------


def _im2col(x: np.ndarray) -> np.ndarray:
    """(B, C, H, W) -> (B, C*9, H*W) channel-major patches of the zero-padded input."""
    b, c, h, w = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    cols = np.empty((b, c, KSIZE * KSIZE, h, w), dtype=x.dtype)
    t = 0
    for ky in range(KSIZE):
        for kx in range(KSIZE):
            cols[:, :, t] = xp[:, :, ky : ky + h, kx : kx + w]
            t += 1
    return cols.reshape(b, c * KSIZE * KSIZE, h * w)


def _col2im(dcols: np.ndarray, b: int, c: int, h: int, w: int) -> np.ndarray:
    """Adjoint of _im2col: scatter-add patch gradients back to (B, C, H, W)."""
    d = dcols.reshape(b, c, KSIZE * KSIZE, h, w)
    out = np.zeros((b, c, h + 2, w + 2), dtype=dcols.dtype)
    t = 0
    for ky in range(KSIZE):
        for kx in range(KSIZE):
            out[:, :, ky : ky + h, kx : kx + w] += d[:, :, t]
            t += 1
    return np.ascontiguousarray(out[:, :, 1 : 1 + h, 1 : 1 + w])
