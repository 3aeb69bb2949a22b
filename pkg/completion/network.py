"""
The completion network.

:class:`S2DTR` fuses the RGB image and the sparse depth early, encodes them
into a five-level pyramid (optionally enhanced by 2D attention) and decodes an
initial depth map plus a quarter-resolution guidance feature map.
:class:`ThreeDTR` refines the guidance features after uplifting them with the
initial depth, and :class:`FinalDecoder` turns the projected features back
into the final depth map. :class:`DeCoTR` ties the stages together.
"""

import dataclasses
import logging
import math
from dataclasses import dataclass, field

import numpy as np
from django.conf import settings

from attention.layers import GlobalAttentionLayer, PyramidEnhancer, VectorAttentionLayer
from geometry.camera import CameraIntrinsics, DepthMap, SparseDepth
from geometry.cloud import FeaturePointCloud, normalize_unit_ball, project, unproject
from geometry.search import downsample_fps, knn, nearest_selected
from main.exceptions import ConfigError, ContractError, DimensionError
from tensor_core import ops
from tensor_core.nn import MLP, Conv2d, ConvTranspose2d, Module, parameter
from tensor_core.tensor import Tensor

logger = logging.getLogger(__name__)

PYRAMID_LEVELS = 5
# uplift / guidance resolution relative to the input
UPLIFT_STRIDE = 4
# depth the untrained heads start from, meters
INITIAL_DEPTH = 4.0


@dataclass(frozen=True)
class ModelConfig:
    encoder_widths: tuple = (16, 32, 64, 128, 128)
    guidance_width: int = 32
    local_layers: int = 2
    neighbors: int = 16
    global_attention: bool = False
    global_points: int | None = None
    heads: int = 2
    normalize_points: bool = True
    attention_2d: bool = True
    attention_3d: bool = True
    position_in_value: bool = True

    def __post_init__(self):
        widths = tuple(int(w) for w in self.encoder_widths)
        object.__setattr__(self, "encoder_widths", widths)
        if len(widths) != PYRAMID_LEVELS or min(widths) < 1:
            raise ConfigError(f"encoder_widths must be {PYRAMID_LEVELS} positive ints, got {widths}")
        if widths[0] < 2:
            raise ConfigError("the first encoder width must leave room for both fusion branches")
        if self.guidance_width < 1 or self.local_layers < 1 or self.neighbors < 1:
            raise ConfigError("guidance_width, local_layers and neighbors must be >= 1")
        if self.heads < 1 or widths[-1] % self.heads:
            raise ConfigError(f"smallest-scale width {widths[-1]} not divisible by {self.heads} heads")
        if self.global_points is not None and self.global_points < 2:
            raise ConfigError(f"global_points must be >= 2, got {self.global_points}")

    def to_dict(self) -> dict:
        payload = dataclasses.asdict(self)
        payload["encoder_widths"] = list(self.encoder_widths)
        return payload

    def replace(self, **changes) -> "ModelConfig":
        return dataclasses.replace(self, **changes)


def _inverse_softplus(y):
    return math.log(math.expm1(y))


def depth_floor() -> float:
    return getattr(settings, "DEPTH_FLOOR", 1e-3)


def positive_depth(x):
    """Softplus plus a small floor, so every depth is strictly positive."""
    return ops.softplus(x) + depth_floor()


class DepthHead(Conv2d):
    def __init__(self, in_channels, rng):
        super().__init__(in_channels, 1, 3, rng, padding=1)
        self.bias = parameter(np.full(1, _inverse_softplus(INITIAL_DEPTH)))

    def __call__(self, x):
        out = positive_depth(super().__call__(x))
        return ops.reshape(out, out.shape[1:])


class UpBlock(Module):
    """Transposed-conv upsample to the skip's size, ReLU, concat skip, 3×3 conv, ReLU."""

    def __init__(self, in_channels, skip_channels, out_channels, rng, extra_channels=0):
        self.up = ConvTranspose2d(in_channels, out_channels, 2, rng, stride=2)
        self.fuse = Conv2d(out_channels + skip_channels + extra_channels, out_channels, 3, rng, padding=1)

    def __call__(self, x, skip, extra=()):
        up = ops.relu(self.up(x, output_size=skip.shape[1:]))
        return ops.relu(self.fuse(ops.concat([up, skip, *extra], axis=0)))


@dataclass
class S2DOutput:
    initial_depth: Tensor
    guidance: Tensor
    skips: dict = field(default_factory=dict)


class S2DTR(Module):
    def __init__(self, cfg: ModelConfig, rng):
        widths = cfg.encoder_widths
        depth_channels = max(1, widths[0] // 4)
        self.rgb_conv = Conv2d(3, widths[0] - depth_channels, 3, rng, padding=1)
        self.depth_conv = Conv2d(1, depth_channels, 3, rng, padding=1)
        self.encoder = [
            Conv2d(widths[m - 1], widths[m], 3, rng, stride=2, padding=1)
            for m in range(1, PYRAMID_LEVELS)
        ]
        self.enhancer = PyramidEnhancer(widths[1:], cfg.heads, rng) if cfg.attention_2d else None
        # decoder levels 3, 2, 1, 0 (quarter resolution is level 2)
        self.decoder = [
            UpBlock(widths[m + 1], widths[m], widths[m], rng)
            for m in range(PYRAMID_LEVELS - 2, -1, -1)
        ]
        self.depth_head = DepthHead(widths[0], rng)
        self.guidance_head = Conv2d(widths[2], cfg.guidance_width, 1, rng)

    def early_fusion(self, image, sparse):
        image = ops.as_tensor(image)
        sparse = Tensor(sparse.values) if isinstance(sparse, DepthMap) else ops.as_tensor(sparse)
        if image.ndim != 3 or image.shape[0] != 3:
            raise DimensionError(f"image must be 3×H×W, got {image.shape}")
        if sparse.shape != image.shape[1:]:
            raise DimensionError(f"sparse depth {sparse.shape} is not aligned with image {image.shape}")
        depth = ops.reshape(sparse, (1,) + sparse.shape)
        return ops.concat([self.rgb_conv(image), self.depth_conv(depth)], axis=0)

    def __call__(self, image, sparse) -> S2DOutput:
        f1 = self.early_fusion(image, sparse)
        pyramid = [f1]
        for conv in self.encoder:
            pyramid.append(ops.relu(conv(pyramid[-1])))
        if self.enhancer is not None:
            pyramid = [f1] + self.enhancer(pyramid[1:])

        x = pyramid[-1]
        skips = {}
        for block, level in zip(self.decoder, range(PYRAMID_LEVELS - 2, -1, -1)):
            x = block(x, pyramid[level])
            skips[level] = x
        guidance = self.guidance_head(skips[2])
        return S2DOutput(self.depth_head(x), guidance, skips)


def early_fusion(image, sparse, network: S2DTR):
    return network.early_fusion(image, sparse)


def s2d_tr_forward(image, sparse, network: S2DTR) -> S2DOutput:
    return network(image, sparse)


def uplift(guidance, initial_depth, intr: CameraIntrinsics) -> FeaturePointCloud:
    """
    Unproject the quarter-resolution guidance map using every fourth pixel of
    the initial depth; quarter pixel (u, v) sits at full pixel (4u, 4v).
    """
    guidance = ops.as_tensor(guidance)
    depth = Tensor(initial_depth.values) if isinstance(initial_depth, DepthMap) else ops.as_tensor(initial_depth)
    sampled = depth[::UPLIFT_STRIDE, ::UPLIFT_STRIDE]
    if sampled.shape != guidance.shape[1:]:
        raise DimensionError(
            f"guidance {guidance.shape} does not match the uplift grid {sampled.shape}"
        )
    return unproject(sampled, intr.scaled(1.0 / UPLIFT_STRIDE), guidance)


class ThreeDTR(Module):
    """
    Local vector cross-attention layers (each with a residual and a width-2C
    feedforward), optionally followed by global attention on farthest-point
    samples whose updates are broadcast to their nearest-sample members.
    """

    def __init__(
        self,
        channels,
        layers,
        neighbors,
        rng,
        normalize=True,
        global_attention=False,
        global_points=None,
        position_in_value=True,
    ):
        self.channels = channels
        self.neighbors = neighbors
        self.normalize = normalize
        self.global_points = global_points
        self.attention = [
            VectorAttentionLayer(channels, rng, position_in_value) for _ in range(layers)
        ]
        self.feedforward = [MLP(channels, 2 * channels, channels, rng) for _ in range(layers)]
        self.global_layer = GlobalAttentionLayer(channels, rng) if global_attention else None

    def __call__(self, cloud: FeaturePointCloud) -> FeaturePointCloud:
        n = len(cloud)
        if cloud.channels != self.channels:
            raise DimensionError(f"3D stage expects {self.channels} channels, got {cloud.channels}")
        positions = cloud.positions
        if self.normalize:
            positions = normalize_unit_ball(cloud)[0].positions
        features = cloud.features

        if self.attention:
            if n <= self.neighbors:
                raise ContractError(f"3D stage needs more than K={self.neighbors} points, got {n}")
            table = knn(positions.data, self.neighbors)
            for attention, feedforward in zip(self.attention, self.feedforward):
                features = features + attention(features, positions, table)
                features = features + feedforward(features)

        if self.global_layer is not None:
            if n < 2:
                raise ContractError(f"global attention needs at least 2 points, got {n}")
            count = min(self.global_points or max(2, n // 4), n)
            selected = downsample_fps(positions.data, count)
            members = nearest_selected(positions.data, selected)
            update = self.global_layer(ops.gather_rows(features, selected))
            features = features + ops.gather_rows(update, members)
            logger.debug(f"[3DTR] global points={count} of={n}")
        return cloud.with_features(features)


def three_d_tr_stack(cloud, stack: ThreeDTR):
    return stack(cloud)


class FinalDecoder(Module):
    """
    Fuse projected 3D features with the quarter-resolution skip and decode to
    full resolution, where the initial depth joins as an extra channel.
    """

    def __init__(self, cfg: ModelConfig, rng):
        widths = cfg.encoder_widths
        self.quarter = Conv2d(cfg.guidance_width + widths[2], widths[2], 3, rng, padding=1)
        self.half = UpBlock(widths[2], widths[1], widths[1], rng)
        self.full = UpBlock(widths[1], widths[0], widths[0], rng, extra_channels=1)
        self.head = DepthHead(widths[0], rng)

    def __call__(self, projected, skips, initial_depth):
        x = ops.relu(self.quarter(ops.concat([projected, skips[2]], axis=0)))
        x = self.half(x, skips[1])
        depth = ops.reshape(initial_depth, (1,) + initial_depth.shape)
        x = self.full(x, skips[0], extra=(depth,))
        return self.head(x)


@dataclass
class PipelineOutput:
    initial_depth: Tensor
    final_depth: Tensor
    guidance: Tensor
    cloud: FeaturePointCloud | None = None

    @property
    def initial_map(self) -> DepthMap:
        return DepthMap(self.initial_depth.data)

    @property
    def final_map(self) -> DepthMap:
        return DepthMap(self.final_depth.data)


class DeCoTR(Module):
    def __init__(self, cfg: ModelConfig, seed=0):
        rng = np.random.default_rng(seed)
        self.cfg = cfg
        self.seed = seed
        self.s2d = S2DTR(cfg, rng)
        if cfg.attention_3d:
            self.three_d = ThreeDTR(
                cfg.guidance_width,
                cfg.local_layers,
                cfg.neighbors,
                rng,
                normalize=cfg.normalize_points,
                global_attention=cfg.global_attention,
                global_points=cfg.global_points,
                position_in_value=cfg.position_in_value,
            )
            self.final_decoder = FinalDecoder(cfg, rng)
        else:
            self.three_d = None
            self.final_decoder = None

    def __call__(self, image, sparse, intr: CameraIntrinsics) -> PipelineOutput:
        stage = self.s2d(image, sparse)
        if self.three_d is None:
            return PipelineOutput(stage.initial_depth, stage.initial_depth, stage.guidance)
        cloud = uplift(stage.guidance, stage.initial_depth, intr)
        refined = self.three_d(cloud)
        _, height, width = stage.guidance.shape
        projected, _ = project(refined, intr.scaled(1.0 / UPLIFT_STRIDE), height, width)
        final = self.final_decoder(projected, stage.skips, stage.initial_depth)
        return PipelineOutput(stage.initial_depth, final, stage.guidance, refined)


def decotr_forward(image, sparse: SparseDepth, intr: CameraIntrinsics, model: DeCoTR) -> PipelineOutput:
    return model(image, sparse, intr)
