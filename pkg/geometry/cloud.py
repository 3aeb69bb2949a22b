"""
Lifting between the image plane and camera space.

Positions and features stay on the tape, so depth and guidance features both
receive gradients through an uplift followed by a projection.
"""

import dataclasses
import logging
from dataclasses import dataclass, field

import numpy as np

from main.exceptions import DimensionError, EmptyCloudError, GeometryError
from tensor_core import ops
from tensor_core.tensor import Tensor

from .camera import CameraIntrinsics, DepthMap

logger = logging.getLogger(__name__)

# max radius below which a cloud counts as degenerate (scale clamped to 1)
DEGENERATE_RADIUS = 1e-12


@dataclass(frozen=True)
class FeaturePointCloud:
    positions: Tensor
    features: Tensor
    pixel_index: np.ndarray = field(repr=False)
    image_size: tuple[int, int] | None = None

    def __post_init__(self):
        positions = ops.as_tensor(self.positions)
        features = ops.as_tensor(self.features)
        pixel_index = np.asarray(self.pixel_index, dtype=np.int64)
        n = positions.shape[0] if positions.ndim else 0
        if positions.ndim != 2 or positions.shape[1] != 3:
            raise DimensionError(f"positions must be N×3, got {positions.shape}")
        if features.ndim != 2 or features.shape[0] != n:
            raise DimensionError(f"features must be {n}×C, got {features.shape}")
        if pixel_index.shape != (n, 2):
            raise DimensionError(f"pixel_index must be {n}×2, got {pixel_index.shape}")
        if not ops.is_finite(positions):
            raise GeometryError("point positions must be finite")
        if self.image_size is not None and n:
            h, w = self.image_size
            u, v = pixel_index[:, 0], pixel_index[:, 1]
            if u.min() < 0 or v.min() < 0 or u.max() >= w or v.max() >= h:
                raise GeometryError(f"pixel_index outside the {h}×{w} image")
        object.__setattr__(self, "positions", positions)
        object.__setattr__(self, "features", features)
        object.__setattr__(self, "pixel_index", pixel_index)

    def __len__(self):
        return self.positions.shape[0]

    @property
    def channels(self) -> int:
        return self.features.shape[1]

    def with_positions(self, positions) -> "FeaturePointCloud":
        return dataclasses.replace(self, positions=positions)

    def with_features(self, features) -> "FeaturePointCloud":
        return dataclasses.replace(self, features=features)


@dataclass(frozen=True)
class NormalizationTransform:
    centroid: np.ndarray
    scale: float

    def __post_init__(self):
        centroid = np.array(self.centroid, dtype=np.float64).reshape(3)
        centroid.setflags(write=False)
        if not self.scale > 0:
            raise GeometryError(f"normalization scale must be positive, got {self.scale}")
        object.__setattr__(self, "centroid", centroid)
        object.__setattr__(self, "scale", float(self.scale))

    @classmethod
    def identity(cls) -> "NormalizationTransform":
        return cls(np.zeros(3), 1.0)

    def apply(self, positions):
        return (ops.as_tensor(positions) - self.centroid) / self.scale

    def invert(self, positions):
        return ops.as_tensor(positions) * self.scale + self.centroid


def pixel_rays(pixel_index, intr: CameraIntrinsics) -> np.ndarray:
    """Camera-space direction with z = 1 through each ``(u, v)`` pixel."""
    u = pixel_index[:, 0].astype(np.float64)
    v = pixel_index[:, 1].astype(np.float64)
    return np.stack(
        [(u - intr.c_u) / intr.gamma_u, (v - intr.c_v) / intr.gamma_v, np.ones_like(u)], axis=1
    )


def unproject(depth, intr: CameraIntrinsics, features) -> FeaturePointCloud:
    """
    Lift every pixel with positive depth to ``(d(u−c_u)/γ_u, d(v−c_v)/γ_v, d)``
    and attach its feature column. ``depth`` is a :class:`DepthMap` or an H×W
    tensor (e.g. a predicted depth still on the tape).
    """
    depth = Tensor(depth.values) if isinstance(depth, DepthMap) else ops.as_tensor(depth)
    features = ops.as_tensor(features)
    if depth.ndim != 2:
        raise DimensionError(f"depth must be H×W, got {depth.shape}")
    if features.ndim != 3 or features.shape[1:] != depth.shape:
        raise DimensionError(
            f"features {features.shape} are not aligned with depth {depth.shape}"
        )
    h, w = depth.shape
    flat = np.flatnonzero(depth.data.reshape(-1) > 0)
    if flat.size == 0:
        raise EmptyCloudError("depth map has no valid pixels to unproject")
    v, u = np.divmod(flat, w)
    pixel_index = np.stack([u, v], axis=1)

    depths = ops.gather_rows(ops.reshape(depth, (h * w, 1)), flat)
    positions = depths * Tensor(pixel_rays(pixel_index, intr))
    channels = features.shape[0]
    columns = ops.transpose(ops.reshape(features, (channels, h * w)), (1, 0))
    logger.debug(f"[UPLIFT] points={flat.size} of={h * w} channels={channels}")
    return FeaturePointCloud(positions, ops.gather_rows(columns, flat), pixel_index, (h, w))


def project_points(positions, intr: CameraIntrinsics) -> np.ndarray:
    """Pinhole projection of N×3 positions to N×2 ``(u, v)`` pixel coordinates."""
    p = ops.as_tensor(positions).data
    z = p[:, 2]
    if np.any(z <= 0):
        raise GeometryError(f"{int(np.sum(z <= 0))} point(s) at or behind the camera plane")
    return np.stack(
        [intr.gamma_u * p[:, 0] / z + intr.c_u, intr.gamma_v * p[:, 1] / z + intr.c_v], axis=1
    )


def project(cloud: FeaturePointCloud, intr: CameraIntrinsics, height, width):
    """
    Scatter point features back to their source pixels. Returns a C×H×W
    feature tensor (zero where no point lands) and the depth map of the
    points' z values.
    """
    z = cloud.positions.data[:, 2]
    if np.any(z <= 0):
        raise GeometryError(f"{int(np.sum(z <= 0))} point(s) at or behind the camera plane")
    u, v = cloud.pixel_index[:, 0], cloud.pixel_index[:, 1]
    if len(cloud) and (u.min() < 0 or v.min() < 0 or u.max() >= width or v.max() >= height):
        raise GeometryError(f"point pixels fall outside the {height}×{width} image")
    flat = v * width + u
    channels = cloud.channels
    scattered = ops.scatter_rows(cloud.features, flat, height * width)
    feature_map = ops.reshape(ops.transpose(scattered, (1, 0)), (channels, height, width))
    depth = np.zeros(height * width)
    depth[flat] = z
    return feature_map, DepthMap(depth.reshape(height, width))


def normalize_unit_ball(cloud: FeaturePointCloud):
    """
    Center on the centroid and scale so the farthest point has norm 1. The
    scale is clamped to 1 for a degenerate (single or coincident) cloud.
    """
    if len(cloud) < 1:
        raise EmptyCloudError("cannot normalize an empty cloud")
    positions = cloud.positions
    centroid = ops.mean(positions, axis=0, keepdims=True)
    centered = positions - centroid
    radius_sq = ops.amax(ops.sum(centered * centered, axis=1))
    if radius_sq.item() < DEGENERATE_RADIUS**2:
        scale = Tensor(1.0)
    else:
        scale = ops.sqrt(radius_sq)
    transform = NormalizationTransform(centroid.data.reshape(3), scale.item())
    return cloud.with_positions(centered / scale), transform


def denormalize(cloud: FeaturePointCloud, transform: NormalizationTransform) -> FeaturePointCloud:
    return cloud.with_positions(transform.invert(cloud.positions))
