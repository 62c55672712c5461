"""Procedural street scenes with exact labels.

Four classes: 0 road, 1 sky, 2 building, 3 object.  A scene is a horizon
split (sky above, road below) with axis-aligned building and object
rectangles painted on top, plus mild per-pixel noise.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .datasets import CLASS_NAMES, Dataset, Sample
from .errors import BadSize
from .placement import (
    Pose,
    ProjectivePlacement,
    intrinsics_from_fov,
    rot_y,
    warp_patch,
)

ROAD, SKY, BUILDING, OBJECT = range(4)

BASE_COLORS = {
    ROAD: (0.35, 0.35, 0.38),
    SKY: (0.50, 0.70, 0.92),
    BUILDING: (0.62, 0.38, 0.28),
    OBJECT: (0.85, 0.78, 0.18),
}


@dataclass
class SceneLayout:
    horizon: int
    rects: list[tuple[int, int, int, int, int]] = field(default_factory=list)  # (cls, top, bottom, left, right)
    colors: dict[int, tuple[float, float, float]] = field(default_factory=lambda: dict(BASE_COLORS))
    noise: float = 0.03


def render_layout(layout: SceneLayout, size: Sequence[int], rng: np.random.Generator | None = None):
    """Rasterize a layout. Returns (image H x W x 3, labels H x W)."""
    H, W = size
    labels = np.full((H, W), ROAD, dtype=np.int64)
    labels[: layout.horizon] = SKY
    for cls, top, bottom, left, right in layout.rects:
        labels[max(top, 0):min(bottom, H), max(left, 0):min(right, W)] = cls
    palette = np.array([layout.colors[c] for c in range(len(CLASS_NAMES))])
    image = palette[labels]
    if layout.noise > 0:
        rng = rng if rng is not None else np.random.default_rng(0)
        image = image + rng.normal(0.0, layout.noise, size=image.shape)
    return np.clip(image, 0.0, 1.0), labels


def random_layout(rng: np.random.Generator, size: Sequence[int]) -> SceneLayout:
    H, W = size
    horizon = int(rng.uniform(0.38, 0.52) * H)
    rects = []
    for _ in range(rng.integers(2, 5)):
        width = int(rng.integers(W // 10, W // 4 + 1))
        left = int(rng.integers(0, W - width + 1))
        top = int(rng.integers(int(0.08 * H), horizon - 2))
        rects.append((BUILDING, top, horizon, left, left + width))
    for _ in range(rng.integers(1, 4)):
        h = int(rng.integers(H // 10, H // 4 + 1))
        w = int(rng.integers(W // 16, W // 6 + 1))
        top = int(rng.integers(horizon - h // 2, H - h + 1))
        left = int(rng.integers(0, W - w + 1))
        rects.append((OBJECT, top, top + h, left, left + w))
    colors = {c: tuple(np.clip(np.add(rgb, rng.uniform(-0.06, 0.06, 3)), 0, 1)) for c, rgb in BASE_COLORS.items()}
    return SceneLayout(horizon, rects, colors)


def _check_size(size):
    if len(size) != 2 or size[0] < 32 or size[1] < 32:
        raise BadSize(f"scene size must be at least 32x32, got {tuple(size)}")


def generate_synthetic_scene(seed: int = 0, count: int = 16, size: Sequence[int] = (64, 128)) -> Dataset:
    _check_size(size)
    rng = np.random.default_rng(seed)
    samples = []
    for i in range(count):
        image, labels = render_layout(random_layout(rng, size), size, rng)
        samples.append(Sample(image, labels, None, f"scene_{seed}_{i:04d}"))
    return Dataset(samples, len(CLASS_NAMES), "synthetic", CLASS_NAMES)


@dataclass(frozen=True)
class Billboard:
    """Planar billboard in a world frame with y pointing down (ground at y = 0)."""

    top_left: tuple[float, float, float] = (2.0, -5.5, 22.0)
    width_m: float = 8.0
    height_m: float = 4.0
    yaw: float = 0.35
    face_color: tuple[float, float, float] = (0.88, 0.88, 0.86)

    def surface_to_world(self) -> Pose:
        return Pose.from_rt(rot_y(self.yaw), self.top_left)


def camera_pose(x: float, z: float, yaw: float, height: float = 1.5) -> Pose:
    """World-to-camera transform for a forward-looking camera on the road."""
    return Pose.from_rt(rot_y(yaw), (x, -height, z)).inverse()


def generate_projective_scene(seed: int = 0, count: int = 16, size: Sequence[int] = (64, 128),
                              billboard: Billboard = Billboard(), fov: float = np.pi / 2,
                              z_range=(0.0, 12.0)) -> Dataset:
    """Street scenes seen from ``count`` camera poses with one fixed billboard.

    Each sample carries the billboard's :class:`ProjectivePlacement`; the
    billboard face is labeled ``building``.
    """
    _check_size(size)
    H, W = size
    rng = np.random.default_rng(seed)
    K = intrinsics_from_fov(W, H, fov)
    face = np.broadcast_to(np.asarray(billboard.face_color), (8, 16, 3))
    samples = []
    for i in range(count):
        layout = random_layout(rng, size)
        image, labels = render_layout(layout, size, rng)
        pose = camera_pose(rng.uniform(-0.5, 0.5), rng.uniform(*z_range), rng.uniform(-0.05, 0.05))
        plc = ProjectivePlacement(pose, billboard.surface_to_world(), K, (billboard.width_m, billboard.height_m))
        warped, mask = warp_patch(face, plc.homography(face.shape), (H, W))
        m = mask.numpy()
        image = image.copy()
        image[m] = np.clip(warped.numpy()[m] + rng.normal(0, 0.01, size=(m.sum(), 3)), 0, 1)
        labels = labels.copy()
        labels[m] = BUILDING
        samples.append(Sample(image, labels, (plc,), f"view_{seed}_{i:04d}"))
    return Dataset(samples, len(CLASS_NAMES), "projective", CLASS_NAMES)
