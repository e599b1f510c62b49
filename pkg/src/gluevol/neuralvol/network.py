"""The volume-regression network: blocks of conv/leaky-ReLU/batchnorm/pool,
then flatten and a single dense output.

The canonical configuration (channels 32..512 over a 32x32x64 occupancy
grid) halves each spatial dimension per block and flattens to 1024
features. A tiny profile keeps the identical topology at reduced channel
counts so the network trains on a desk CPU, and a shallow two-block variant
of the same stack serves as the comparison baseline.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import layers
from .layers import ShapeMismatch

TINY_CHANNELS = (8, 16, 32, 64, 128)


@dataclass(frozen=True)
class NetConfig:
    channels: tuple[int, ...] = (32, 64, 128, 256, 512)
    kernel: int = 3
    stride: int = 1
    padding: int = 1
    pool: int = 2
    leaky_slope: float = 0.01
    bn_eps: float = 1e-5
    bn_momentum: float = 0.1
    input_dims: tuple[int, int, int] = (32, 32, 64)
    in_channels: int = 1

    def block_shapes(self) -> list[tuple[int, int, int, int]]:
        """(channels, x, y, z) after each block, input first."""
        shapes = [(self.in_channels,) + tuple(self.input_dims)]
        dims = tuple(self.input_dims)
        for c_out in self.channels:
            dims = tuple(
                (d + 2 * self.padding - self.kernel) // self.stride + 1 for d in dims
            )
            if any(d % self.pool for d in dims):
                raise ShapeMismatch(f"dims {dims} not divisible by pool {self.pool}")
            dims = tuple(d // self.pool for d in dims)
            shapes.append((c_out,) + dims)
        return shapes

    @property
    def flatten_length(self) -> int:
        return int(np.prod(self.block_shapes()[-1]))


def tiny_config() -> NetConfig:
    return NetConfig(channels=TINY_CHANNELS)


def baseline_config(base: NetConfig | None = None) -> NetConfig:
    """Shallow two-block variant of the same layer stack."""
    base = base or NetConfig()
    return replace(base, channels=base.channels[:2])


@dataclass
class BlockWeights:
    conv_w: np.ndarray
    conv_b: np.ndarray
    bn_gamma: np.ndarray
    bn_beta: np.ndarray
    bn_mean: np.ndarray
    bn_var: np.ndarray


@dataclass
class ModelWeights:
    """All parameter tensors plus the target scaling learned at fit time."""

    blocks: list[BlockWeights]
    dense_w: np.ndarray
    dense_b: np.ndarray
    target_mean: float = 0.0
    target_std: float = 1.0

    def trainable(self) -> list[np.ndarray]:
        arrays = []
        for blk in self.blocks:
            arrays += [blk.conv_w, blk.conv_b, blk.bn_gamma, blk.bn_beta]
        arrays += [self.dense_w, self.dense_b]
        return arrays

    def copy(self) -> "ModelWeights":
        return self.cast(None)

    def cast(self, dtype) -> "ModelWeights":
        """Deep copy, optionally converting every array to ``dtype``.

        Training runs on a float32 working copy; the persisted weights stay
        float64.
        """

        def conv(arr):
            arr = np.array(arr)
            return arr if dtype is None else arr.astype(dtype)

        return ModelWeights(
            blocks=[
                BlockWeights(*(conv(getattr(b, f.name)) for f in
                               b.__dataclass_fields__.values()))
                for b in self.blocks
            ],
            dense_w=conv(self.dense_w),
            dense_b=conv(self.dense_b),
            target_mean=self.target_mean,
            target_std=self.target_std,
        )


def init_weights(cfg: NetConfig, seed: int = 0) -> ModelWeights:
    """Gaussian init: conv/dense weights N(0, 0.02^2), batchnorm scale
    N(1, 0.02^2), biases and shifts zero. Deterministic per seed."""
    rng = np.random.default_rng(seed)
    blocks = []
    c_in = cfg.in_channels
    for c_out in cfg.channels:
        blocks.append(
            BlockWeights(
                conv_w=rng.normal(0.0, 0.02, (c_out, c_in) + (cfg.kernel,) * 3),
                conv_b=np.zeros(c_out),
                bn_gamma=rng.normal(1.0, 0.02, c_out),
                bn_beta=np.zeros(c_out),
                bn_mean=np.zeros(c_out),
                bn_var=np.ones(c_out),
            )
        )
        c_in = c_out
    dense_w = rng.normal(0.0, 0.02, (cfg.flatten_length, 1))
    return ModelWeights(blocks=blocks, dense_w=dense_w, dense_b=np.zeros(1))


def param_count(cfg: NetConfig) -> int:
    """Closed-form trainable parameter count (running stats excluded)."""
    total = 0
    c_in = cfg.in_channels
    for c_out in cfg.channels:
        total += c_out * c_in * cfg.kernel**3 + c_out  # conv kernel + bias
        total += 2 * c_out  # batchnorm scale + shift
        c_in = c_out
    total += cfg.flatten_length + 1  # dense weight + bias
    return total


def rnet_forward(x, weights: ModelWeights, cfg: NetConfig, training: bool = False):
    """Forward pass; returns (predictions (B,), caches).

    Predictions are in the network's internal (possibly standardized) target
    units; use ``predict`` for volumes in mm^3. In training mode the caches
    carry updated batchnorm running statistics, applied to ``weights`` by
    ``apply_running_stats``.
    """
    x = np.asarray(x)
    if x.dtype != weights.dense_w.dtype:
        x = x.astype(weights.dense_w.dtype)
    expected = (cfg.in_channels,) + tuple(cfg.input_dims)
    if x.ndim != 5 or x.shape[1:] != expected:
        raise ShapeMismatch(f"input shape {x.shape[1:]} != expected {expected}")
    caches = []
    h = x
    for blk in weights.blocks:
        h, conv_cache = layers.conv3d_forward(h, blk.conv_w, blk.conv_b, cfg.stride, cfg.padding)
        h, relu_cache = layers.leaky_relu_forward(h, cfg.leaky_slope)
        h, bn_cache, new_mean, new_var = layers.batchnorm3d_forward(
            h, blk.bn_gamma, blk.bn_beta, blk.bn_mean, blk.bn_var,
            eps=cfg.bn_eps, momentum=cfg.bn_momentum, training=training,
        )
        h, pool_cache = layers.maxpool3d_forward(h, cfg.pool)
        caches.append((conv_cache, relu_cache, bn_cache, pool_cache, new_mean, new_var))
    flat = h.reshape(h.shape[0], -1)
    out, dense_cache = layers.dense_forward(flat, weights.dense_w, weights.dense_b)
    caches.append((dense_cache, h.shape))
    return out[:, 0], caches


def rnet_backward(grad_pred, caches):
    """Backward pass; returns per-parameter gradients in trainable() order."""
    dense_cache, pre_flat_shape = caches[-1]
    grad_out = np.asarray(grad_pred, dtype=np.float64)[:, None]
    grad_flat, grad_dw, grad_db = layers.dense_backward(grad_out, dense_cache)
    grad_h = grad_flat.reshape(pre_flat_shape)
    block_grads = []
    n_blocks = len(caches) - 1
    for i, (conv_cache, relu_cache, bn_cache, pool_cache, _, _) in enumerate(
        reversed(caches[:-1])
    ):
        grad_h = layers.maxpool3d_backward(grad_h, pool_cache)
        grad_h, grad_gamma, grad_beta = layers.batchnorm3d_backward(grad_h, bn_cache)
        grad_h = layers.leaky_relu_backward(grad_h, relu_cache)
        # The first block's input gradient leads nowhere; skip its GEMM.
        grad_h, grad_w, grad_b = layers.conv3d_backward(
            grad_h, conv_cache, need_input_grad=i < n_blocks - 1
        )
        block_grads.append([grad_w, grad_b, grad_gamma, grad_beta])
    grads = []
    for blk in reversed(block_grads):
        grads += blk
    grads += [grad_dw, grad_db]
    return grads


def apply_running_stats(weights: ModelWeights, caches) -> None:
    """Install the batch-updated running statistics from a training forward."""
    for blk, cache in zip(weights.blocks, caches[:-1]):
        blk.bn_mean = cache[4]
        blk.bn_var = cache[5]


def predict(x, weights: ModelWeights, cfg: NetConfig, batch_size: int = 64) -> np.ndarray:
    """Eval-mode volume predictions in mm^3 (target scaling undone)."""
    x = np.asarray(x)
    outputs = []
    for lo in range(0, x.shape[0], batch_size):
        pred, _ = rnet_forward(x[lo : lo + batch_size], weights, cfg, training=False)
        outputs.append(pred)
    raw = np.concatenate(outputs) if outputs else np.zeros(0)
    return raw.astype(np.float64) * weights.target_std + weights.target_mean
