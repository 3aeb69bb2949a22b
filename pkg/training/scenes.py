"""
Procedural desk-scale scenes standing in for an indoor RGB-D dataset.

Every scene has a slanted back wall covering the whole view, plus one to
three extra primitives (an optional floor plane and spheres). Depth is the
analytic ray intersection, z-buffered across primitives. Colors combine a
per-primitive albedo, a checker texture in world space, Lambert shading and
a mild distance fall-off, so RGB carries geometric cues.
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from geometry.camera import CameraIntrinsics, DepthMap
from geometry.cloud import pixel_rays
from geometry.io import read_depth, read_intrinsics, read_ppm, write_intrinsics, write_pfm, write_ppm
from main.exceptions import ContractError, InputError

logger = logging.getLogger(__name__)

MIN_SIZE = 16
MIN_DEPTH = 0.5
FOCAL_FACTOR = 0.8
CHECKER_SIZE = 0.4
LIGHT = np.array([-0.3, -0.6, -1.0]) / np.linalg.norm([-0.3, -0.6, -1.0])


@dataclass(frozen=True)
class SyntheticScene:
    image: np.ndarray = field(repr=False)
    depth: DepthMap
    intrinsics: CameraIntrinsics
    seed: object = None
    primitives: tuple = ()
    labels: np.ndarray = field(default=None, repr=False)

    @property
    def shape(self) -> tuple:
        return self.depth.shape


def _rays(height, width, intr):
    v, u = np.mgrid[0:height, 0:width]
    return pixel_rays(np.stack([u.ravel(), v.ravel()], axis=1), intr).reshape(height, width, 3)


def _plane(rays, z0, a, b):
    """Depth and normal of the plane z = z0 + a·x + b·y."""
    depth = z0 / (1.0 - a * rays[..., 0] - b * rays[..., 1])
    normal = np.array([a, b, -1.0]) / np.sqrt(a * a + b * b + 1.0)
    return depth, np.broadcast_to(normal, rays.shape)


def _floor(rays, height):
    """Depth and normal of the horizontal plane y = height (y points down)."""
    down = rays[..., 1]
    with np.errstate(divide="ignore"):
        depth = np.where(down > 1e-9, height / np.where(down > 1e-9, down, 1.0), np.inf)
    return depth, np.broadcast_to(np.array([0.0, -1.0, 0.0]), rays.shape)


def _sphere(rays, center, radius):
    qa = np.einsum("hwc,hwc->hw", rays, rays)
    qb = rays @ center
    qc = center @ center - radius * radius
    disc = qb * qb - qa * qc
    hit = disc >= 0
    t = (qb - np.sqrt(np.where(hit, disc, 0.0))) / qa
    depth = np.where(hit & (t > 0), t, np.inf)
    with np.errstate(invalid="ignore"):
        points = np.where(np.isfinite(depth)[..., None], depth[..., None] * rays, center)
    return depth, (points - center) / radius


def _primitives(rng, half_u, half_v):
    wall = {
        "kind": "plane",
        "z0": float(rng.uniform(5.0, 6.5)),
        "a": float(rng.uniform(-0.2, 0.2)),
        "b": float(rng.uniform(-0.2, 0.2)),
    }
    primitives = [wall]
    extras = int(rng.integers(1, 4))
    for index in range(extras):
        if index == 0 and rng.random() < 0.5:
            primitives.append({"kind": "floor", "height": float(rng.uniform(1.0, 1.6))})
            continue
        z = rng.uniform(2.5, 5.0)
        center = [rng.uniform(-0.6, 0.6) * half_u * z, rng.uniform(-0.6, 0.6) * half_v * z, z]
        primitives.append(
            {
                "kind": "sphere",
                "center": [float(c) for c in center],
                "radius": float(rng.uniform(0.4, 0.9)),
            }
        )
    return primitives


def _intersect(rays, primitive):
    kind = primitive["kind"]
    if kind == "plane":
        return _plane(rays, primitive["z0"], primitive["a"], primitive["b"])
    if kind == "floor":
        return _floor(rays, primitive["height"])
    return _sphere(rays, np.asarray(primitive["center"]), primitive["radius"])


def make_synthetic_scene(seed, height, width) -> SyntheticScene:
    if height < MIN_SIZE or width < MIN_SIZE:
        raise ContractError(f"scenes need at least {MIN_SIZE}×{MIN_SIZE} pixels, got {height}×{width}")
    rng = np.random.default_rng(seed)
    focal = FOCAL_FACTOR * max(height, width)
    intr = CameraIntrinsics(focal, focal, (width - 1) / 2.0, (height - 1) / 2.0)
    rays = _rays(height, width, intr)
    primitives = _primitives(rng, intr.c_u / focal, intr.c_v / focal)

    hits = [_intersect(rays, p) for p in primitives]
    depths = np.stack([d for d, _ in hits])
    labels = np.argmin(depths, axis=0)
    depth = np.take_along_axis(depths, labels[None], axis=0)[0]
    normals = np.stack([n for _, n in hits])
    normal = np.take_along_axis(normals, labels[None, ..., None].repeat(3, axis=-1), axis=0)[0]

    points = depth[..., None] * rays
    checker = np.floor(points / CHECKER_SIZE).sum(axis=-1) % 2
    albedo = rng.uniform(0.35, 1.0, size=(len(primitives), 3))[labels]
    albedo = albedo * (0.65 + 0.35 * checker)[..., None]
    lambert = np.clip(normal @ LIGHT, 0.0, 1.0)
    shade = (0.2 + 0.8 * lambert) * np.exp(-0.08 * (depth - MIN_DEPTH))
    image = np.clip(albedo * shade[..., None], 0.0, 1.0).transpose(2, 0, 1)

    logger.debug(f"[SCENE] seed={seed} size={height}x{width} primitives={[p['kind'] for p in primitives]}")
    return SyntheticScene(
        image=np.ascontiguousarray(image),
        depth=DepthMap(depth),
        intrinsics=intr,
        seed=seed,
        primitives=tuple(primitives),
        labels=labels,
    )


def make_scene_set(seed, count, height, width) -> list[SyntheticScene]:
    return [make_synthetic_scene([seed, index], height, width) for index in range(count)]


# Scene directories


def scene_paths(directory, index) -> dict[str, Path]:
    stem = Path(directory) / f"scene_{index:04d}"
    return {
        "depth": stem.with_name(f"{stem.name}_depth.pfm"),
        "image": stem.with_name(f"{stem.name}_image.ppm"),
        "intrinsics": stem.with_name(f"{stem.name}_intrinsics.json"),
    }


def write_scene(directory, index, scene: SyntheticScene) -> dict[str, Path]:
    paths = scene_paths(directory, index)
    write_pfm(paths["depth"], scene.depth.values)
    write_ppm(paths["image"], scene.image)
    write_intrinsics(paths["intrinsics"], scene.intrinsics)
    return paths


def load_scene_dir(directory) -> list[SyntheticScene]:
    directory = Path(directory)
    if not directory.is_dir():
        raise InputError("scene directory not found", directory)
    depth_files = sorted(directory.glob("scene_*_depth.pfm"))
    if not depth_files:
        raise InputError("no scene_*_depth.pfm files", directory)
    scenes = []
    for depth_path in depth_files:
        stem = depth_path.name[: -len("_depth.pfm")]
        image_path = directory / f"{stem}_image.ppm"
        intrinsics_path = directory / f"{stem}_intrinsics.json"
        depth = read_depth(depth_path)
        image = read_ppm(image_path)
        if image.shape[1:] != depth.shape:
            raise InputError(f"image {image.shape[1:]} does not match depth {depth.shape}", image_path)
        scenes.append(SyntheticScene(image, depth, read_intrinsics(intrinsics_path), seed=stem))
    logger.info(f"[SCENE] loaded directory={directory} count={len(scenes)}")
    return scenes
