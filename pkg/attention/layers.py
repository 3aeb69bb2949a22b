"""
Attention blocks of the completion network.

- :class:`Mhsa2d` / :class:`PyramidEnhancer`: multi-head self-attention on the
  smallest encoder scale, applied to every pyramid level through a
  downsize → attend → restore → residual path.
- :class:`VectorAttentionLayer`: neighborhood vector cross-attention over a
  feature point cloud with subtraction relation and relative-position encoding.
- :class:`GlobalAttentionLayer`: scalar dot-product attention over a
  downsampled point set, each point attending to every other point.
"""

import logging
import math
from dataclasses import dataclass

import numpy as np

from main.exceptions import ConfigError, ContractError, DimensionError
from tensor_core import ops
from tensor_core.nn import MLP, ConvTranspose2d, DepthwiseSeparableConv2d, Linear, Module

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class Mhsa2dConfig:
    """
    Attention on the smallest scale. ``height``/``width`` pin the grid when
    set; left as None the layer accepts any grid of the right width.
    """

    heads: int
    channels: int
    height: int | None = None
    width: int | None = None

    def __post_init__(self):
        if self.heads < 1 or self.channels < 1:
            raise ConfigError(f"heads and channels must be positive, got {self.heads}/{self.channels}")
        if self.channels % self.heads:
            raise ConfigError(
                f"attention channels {self.channels} are not divisible by {self.heads} heads"
            )
        if (self.height is None) != (self.width is None):
            raise ConfigError("attention grid needs both height and width, or neither")
        if self.height is not None and (self.height < 1 or self.width < 1):
            raise ConfigError(f"attention grid must be non-empty, got {self.height}×{self.width}")

    def accepts(self, shape) -> bool:
        if shape[0] != self.channels:
            return False
        return self.height is None or tuple(shape[1:]) == (self.height, self.width)


class Mhsa2d(Module):
    """Multi-head self-attention over the pixels of a C×H×W map, no output projection."""

    def __init__(self, cfg: Mhsa2dConfig, rng):
        self.cfg = cfg
        self.query = Linear(cfg.channels, cfg.channels, rng, bias=False)
        self.key = Linear(cfg.channels, cfg.channels, rng, bias=False)
        self.value = Linear(cfg.channels, cfg.channels, rng, bias=False)

    def __call__(self, f_tilde):
        cfg = self.cfg
        f_tilde = ops.as_tensor(f_tilde)
        if f_tilde.ndim != 3 or not cfg.accepts(f_tilde.shape):
            raise DimensionError(f"MHSA built for {cfg}, got input {f_tilde.shape}")
        channels, height, width = f_tilde.shape
        n, heads = height * width, cfg.heads
        head_width = channels // heads
        tokens = ops.transpose(ops.reshape(f_tilde, (channels, n)), (1, 0))

        def split(x):
            return ops.transpose(ops.reshape(x, (n, heads, head_width)), (1, 0, 2))

        q, k, v = split(self.query(tokens)), split(self.key(tokens)), split(self.value(tokens))
        logits = ops.matmul(q, ops.transpose(k, (0, 2, 1))) / math.sqrt(head_width)
        attended = ops.matmul(ops.softmax(logits, axis=-1), v)
        merged = ops.reshape(ops.transpose(attended, (1, 0, 2)), (n, channels))
        return ops.reshape(ops.transpose(merged, (1, 0)), (channels, height, width))


def mhsa_2d(f_tilde, cfg: Mhsa2dConfig, layer: Mhsa2d):
    if layer.cfg.heads != cfg.heads or layer.cfg.channels != cfg.channels:
        raise ConfigError(f"layer was built for {layer.cfg}, called with {cfg}")
    f_tilde = ops.as_tensor(f_tilde)
    if not cfg.accepts(f_tilde.shape):
        raise DimensionError(f"MHSA input {f_tilde.shape} does not match {cfg}")
    return layer(f_tilde)


def halved(size: int) -> int:
    """Spatial size after a stride-2, kernel-3, padding-1 convolution."""
    return (size - 1) // 2 + 1


class LevelEnhancer(Module):
    """
    Summarize one pyramid level to the attention grid with ``stages``
    stride-2 depthwise-separable convolutions, attend, restore with a
    transposed convolution (kernel = stride = 2^stages) and add the residual.
    """

    def __init__(self, channels, stages, cfg: Mhsa2dConfig, rng):
        self.channels = channels
        self.stages = stages
        if stages:
            self.downsize = [
                DepthwiseSeparableConv2d(
                    channels if i == 0 else cfg.channels, cfg.channels, 3, rng, stride=2, padding=1
                )
                for i in range(stages)
            ]
        else:
            self.downsize = [DepthwiseSeparableConv2d(channels, cfg.channels, 1, rng)]
        self.attention = Mhsa2d(cfg, rng)
        factor = 2**stages
        self.restore = ConvTranspose2d(cfg.channels, channels, factor, rng, stride=factor)

    def __call__(self, f, grid=None):
        f = ops.as_tensor(f)
        if f.ndim != 3 or f.shape[0] != self.channels:
            raise DimensionError(f"level enhancer expects {self.channels} channels, got {f.shape}")
        summary = f
        for stage in self.downsize:
            summary = stage(summary)
        if grid is not None and summary.shape[1:] != tuple(grid):
            raise ConfigError(
                f"{self.stages} stride-2 stage(s) take {f.shape[1:]} to {summary.shape[1:]}, "
                f"not the attention grid {tuple(grid)}"
            )
        restored = self.restore(self.attention(summary), output_size=f.shape[1:])
        return f + restored


class PyramidEnhancer(Module):
    """One :class:`LevelEnhancer` per pyramid level; the last level is the attention grid."""

    def __init__(self, widths, heads, rng):
        if not widths:
            raise ConfigError("pyramid needs at least one level")
        self.cfg = Mhsa2dConfig(heads, widths[-1])
        last = len(widths) - 1
        self.levels = [
            LevelEnhancer(channels, last - index, self.cfg, rng)
            for index, channels in enumerate(widths)
        ]

    def __call__(self, pyramid):
        if len(pyramid) != len(self.levels):
            raise DimensionError(f"expected {len(self.levels)} pyramid levels, got {len(pyramid)}")
        grid = ops.as_tensor(pyramid[-1]).shape[1:]
        return [level(f, grid) for level, f in zip(self.levels, pyramid)]


def enhance_pyramid(pyramid, enhancer: PyramidEnhancer):
    return enhancer(pyramid)


class VectorAttentionLayer(Module):
    """
    Per point i and neighbor j:
    ``δ = θ(p_i − p_j)``, ``a = w(q_i − k_j + δ)``, weights are a per-channel
    softmax of ``a`` over the neighbors, output ``Σ_j weight ⊙ (v_j + δ)``.
    With ``position_in_value`` off, δ enters only the relation.
    """

    def __init__(self, channels, rng, position_in_value=True):
        if channels < 1:
            raise ConfigError(f"channels must be positive, got {channels}")
        self.channels = channels
        self.position_in_value = position_in_value
        self.query = Linear(channels, channels, rng)
        self.key = Linear(channels, channels, rng)
        self.value = Linear(channels, channels, rng)
        self.weight_encoding = MLP(channels, channels, channels, rng)
        self.position_encoding = MLP(3, channels, channels, rng)

    def __call__(self, features, positions, neighbors):
        features, positions = ops.as_tensor(features), ops.as_tensor(positions)
        neighbors = np.asarray(neighbors)
        n, channels = features.shape
        if positions.shape != (n, 3):
            raise DimensionError(f"positions must be {n}×3, got {positions.shape}")
        if neighbors.ndim != 2 or neighbors.shape[0] != n:
            raise DimensionError(f"neighbor table must be {n}×K, got {neighbors.shape}")
        k = neighbors.shape[1]
        flat = neighbors.reshape(-1)

        def around(x, width):
            return ops.reshape(ops.gather_rows(x, flat), (n, k, width))

        query = ops.reshape(self.query(features), (n, 1, channels))
        keys = around(self.key(features), channels)
        values = around(self.value(features), channels)
        relative = ops.reshape(positions, (n, 1, 3)) - around(positions, 3)
        delta = self.position_encoding(relative)
        scores = self.weight_encoding(query - keys + delta)
        weights = ops.softmax(scores, axis=1)
        if self.position_in_value:
            values = values + delta
        return ops.sum(weights * values, axis=1)


def vector_cross_attention(features, positions, neighbors, layer: VectorAttentionLayer):
    return layer(features, positions, neighbors)


class GlobalAttentionLayer(Module):
    def __init__(self, channels, rng):
        if channels < 1:
            raise ConfigError(f"global attention width must be positive, got {channels}")
        self.channels = channels
        self.query = Linear(channels, channels, rng, bias=False)
        self.key = Linear(channels, channels, rng, bias=False)
        self.value = Linear(channels, channels, rng, bias=False)

    def __call__(self, features):
        features = ops.as_tensor(features)
        m = features.shape[0]
        if m < 2:
            raise ContractError(f"global attention needs at least 2 points, got {m}")
        q, k, v = self.query(features), self.key(features), self.value(features)
        logits = ops.matmul(q, ops.transpose(k, (1, 0))) / math.sqrt(self.channels)
        # each point attends to every other point, never itself
        weights = ops.softmax(logits, axis=1, mask=~np.eye(m, dtype=bool))
        return ops.matmul(weights, v)


def global_scalar_attention(features, layer: GlobalAttentionLayer):
    return layer(features)
