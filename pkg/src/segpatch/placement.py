"""Where patches land: randomized affine (EOT) or exact projective placement.

Coordinate convention, shared by patches and canvases: pixel ``(row i, col j)``
covers the unit square ``[j, j+1) x [i, i+1)`` in continuous ``(x, y)``
coordinates, so its center is ``(j + 0.5, i + 0.5)`` and an ``h x w`` patch
spans the rectangle with corners ``(0, 0), (w, 0), (w, h), (0, h)``.  Every
placement reduces to a 3x3 homography from patch coordinates to canvas
coordinates.

Camera frames follow the computer-vision convention (x right, y down, z
forward).
"""
from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .errors import (
    BehindCamera,
    DegenerateConfiguration,
    InvalidFov,
    PatchTooLarge,
    SingularHomography,
    ValidationError,
)

ORTHO_TOL = 1e-6


# --------------------------------------------------------------------------
# camera model


@dataclass(frozen=True)
class CameraIntrinsics:
    focal: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not self.focal > 0:
            raise ValidationError(f"focal length must be positive, got {self.focal}")

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.focal, 0.0, self.cx],
                         [0.0, self.focal, self.cy],
                         [0.0, 0.0, 1.0]])


def intrinsics_from_fov(width: int, height: int, fov: float, convention: str = "pinhole") -> CameraIntrinsics:
    """Pinhole intrinsics for a horizontal field of view ``fov`` (radians).

    ``convention="pinhole"`` uses ``f = w / (2 tan(fov/2))``.  ``"half-width"``
    reproduces ``f = w / tan(fov/2)`` for configurations that were calibrated
    with it.
    """
    if not 0.0 < fov < np.pi:
        raise InvalidFov(f"fov must be in (0, pi), got {fov}")
    t = np.tan(fov / 2.0)
    if convention == "pinhole":
        f = width / (2.0 * t)
    elif convention == "half-width":
        f = width / t
    else:
        raise ValidationError(f"unknown focal convention {convention!r}")
    return CameraIntrinsics(float(f), width / 2.0, height / 2.0, int(width), int(height))


def rot_x(a: float) -> np.ndarray:
    c, s = np.cos(a), np.sin(a)
    return np.array([[1, 0, 0], [0, c, -s], [0, s, c]], dtype=np.float64)


def rot_y(a: float) -> np.ndarray:
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, 0, s], [0, 1, 0], [-s, 0, c]], dtype=np.float64)


def rot_z(a: float) -> np.ndarray:
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]], dtype=np.float64)


@dataclass(frozen=True)
class Pose:
    """Homogeneous rototranslation ``[[R, t], [0, 1]]`` from frame a to frame b."""

    matrix: np.ndarray

    def __post_init__(self):
        m = np.array(self.matrix, dtype=np.float64)
        if m.shape == (16,):
            m = m.reshape(4, 4)
        if m.shape != (4, 4):
            raise ValidationError(f"pose must be 4x4, got {m.shape}")
        R = m[:3, :3]
        if not np.allclose(R.T @ R, np.eye(3), atol=ORTHO_TOL, rtol=0):
            raise ValidationError("pose rotation is not orthonormal")
        if abs(np.linalg.det(R) - 1.0) > ORTHO_TOL:
            raise ValidationError("pose rotation must have determinant +1")
        if not np.allclose(m[3], [0, 0, 0, 1]):
            raise ValidationError("pose bottom row must be [0, 0, 0, 1]")
        m.setflags(write=False)
        object.__setattr__(self, "matrix", m)

    @classmethod
    def from_rt(cls, R, t) -> "Pose":
        m = np.eye(4)
        m[:3, :3] = R
        m[:3, 3] = np.asarray(t, dtype=np.float64)
        return cls(m)

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.eye(4))

    @property
    def R(self) -> np.ndarray:
        return self.matrix[:3, :3]

    @property
    def t(self) -> np.ndarray:
        return self.matrix[:3, 3]

    def __matmul__(self, other: "Pose") -> "Pose":
        return Pose(self.matrix @ other.matrix)

    def inverse(self) -> "Pose":
        return Pose.from_rt(self.R.T, -self.R.T @ self.t)


@dataclass(frozen=True)
class ProjectivePlacement:
    """Scene geometry that pins a patch onto a planar surface.

    The surface frame has its origin at the top-left corner of the attackable
    area, x along its width and y along its height (both meters, z = 0 on the
    surface).  ``corners`` gives the patch corners on that plane in the order
    top-left, top-right, bottom-right, bottom-left; by default the patch
    covers the whole ``surface_size = (width_m, height_m)`` rectangle.
    """

    T_world_camera: Pose
    T_surface_world: Pose
    intrinsics: CameraIntrinsics
    surface_size: tuple[float, float]
    corners: np.ndarray | None = None

    def __post_init__(self):
        if self.corners is None:
            w, h = self.surface_size
            c = np.array([[0.0, 0.0], [w, 0.0], [w, h], [0.0, h]])
        else:
            c = np.asarray(self.corners, dtype=np.float64)
            if c.shape != (4, 2):
                raise ValidationError("corners must be 4 x 2 surface coordinates")
        c.setflags(write=False)
        object.__setattr__(self, "corners", c)
        pts = self.camera_points(np.column_stack([c, np.zeros(4), np.ones(4)]))
        if np.any(pts[:, 2] <= 0):
            raise BehindCamera("a patch corner lies behind the camera")

    def surface_to_camera(self) -> np.ndarray:
        return self.T_world_camera.matrix @ self.T_surface_world.matrix

    def camera_points(self, p_surface: np.ndarray) -> np.ndarray:
        return (self.surface_to_camera() @ np.atleast_2d(p_surface).T).T

    def project_corners(self) -> np.ndarray:
        return np.array([
            project_surface_point(np.array([x, y, 0.0, 1.0]), self) for x, y in self.corners
        ])

    def homography(self, patch_hw: Sequence[int]) -> np.ndarray:
        return estimate_homography(patch_corners(patch_hw), self.project_corners())


def project_point(p_surface, T_world_camera: Pose, T_surface_world: Pose, K) -> np.ndarray:
    """Pixel ``(u, v)`` of a surface point: dehomogenized ``K T_wc T_sw p``."""
    p = np.asarray(p_surface, dtype=np.float64)
    if p.shape == (3,):
        p = np.append(p, 1.0)
    p_cam = T_world_camera.matrix @ T_surface_world.matrix @ p
    p_cam = p_cam[:3] / p_cam[3]
    if p_cam[2] <= 0:
        raise BehindCamera(f"point has camera depth {p_cam[2]:.4g} <= 0")
    q = np.asarray(getattr(K, "K", K)) @ p_cam
    return q[:2] / q[2]


def project_surface_point(p_surface, placement: ProjectivePlacement) -> np.ndarray:
    """Pixel ``(u, v)`` of a homogeneous surface point under ``placement``."""
    return project_point(p_surface, placement.T_world_camera, placement.T_surface_world, placement.intrinsics)


def placement_to_json(placement: ProjectivePlacement) -> dict:
    k = placement.intrinsics
    fov = 2.0 * np.arctan(k.width / (2.0 * k.focal))
    return {
        "T_world_camera": placement.T_world_camera.matrix.reshape(-1).tolist(),
        "T_surface_world": placement.T_surface_world.matrix.reshape(-1).tolist(),
        "fov_rad": float(fov),
        "image_w": k.width,
        "image_h": k.height,
        "surface_w_m": float(placement.surface_size[0]),
        "surface_h_m": float(placement.surface_size[1]),
    }


def placement_from_json(d: dict, focal_convention: str = "pinhole") -> ProjectivePlacement:
    try:
        K = intrinsics_from_fov(int(d["image_w"]), int(d["image_h"]), float(d["fov_rad"]), focal_convention)
        return ProjectivePlacement(
            T_world_camera=Pose(np.asarray(d["T_world_camera"], dtype=np.float64).reshape(4, 4)),
            T_surface_world=Pose(np.asarray(d["T_surface_world"], dtype=np.float64).reshape(4, 4)),
            intrinsics=K,
            surface_size=(float(d["surface_w_m"]), float(d["surface_h_m"])),
        )
    except (KeyError, TypeError) as exc:
        raise ValidationError(f"malformed pose record: {exc}") from exc


def load_pose_file(path) -> list[ProjectivePlacement]:
    """A pose file holds one record, or a list of records (one per patch)."""
    data = json.loads(Path(path).read_text())
    records = data if isinstance(data, list) else [data]
    return [placement_from_json(r) for r in records]


def save_pose_file(path, placements: Sequence[ProjectivePlacement]) -> None:
    records = [placement_to_json(p) for p in placements]
    Path(path).write_text(json.dumps(records[0] if len(records) == 1 else records, indent=2))


# --------------------------------------------------------------------------
# homographies


def patch_corners(patch_hw: Sequence[int]) -> np.ndarray:
    h, w = patch_hw[:2]
    return np.array([[0.0, 0.0], [w, 0.0], [w, h], [0.0, h]])


def _check_general_position(pts: np.ndarray, what: str) -> None:
    scale = max(np.ptp(pts[:, 0]), np.ptp(pts[:, 1]), 1e-300)
    for a, b, c in itertools.combinations(range(4), 3):
        u, v = pts[b] - pts[a], pts[c] - pts[a]
        area = abs(u[0] * v[1] - u[1] * v[0])
        if area <= 1e-9 * scale * scale:
            raise DegenerateConfiguration(f"{what} points {a},{b},{c} are collinear or repeated")


def estimate_homography(src, dst) -> np.ndarray:
    """Exact 4-point homography mapping ``src[i]`` to ``dst[i]``, with ``H[2,2] = 1``."""
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    if src.shape != (4, 2) or dst.shape != (4, 2):
        raise ValidationError("need exactly four 2-D source and destination points")
    _check_general_position(src, "source")
    _check_general_position(dst, "destination")
    A = np.zeros((8, 8))
    b = np.zeros(8)
    for i, ((x, y), (u, v)) in enumerate(zip(src, dst)):
        A[2 * i] = [x, y, 1, 0, 0, 0, -u * x, -u * y]
        A[2 * i + 1] = [0, 0, 0, x, y, 1, -v * x, -v * y]
        b[2 * i], b[2 * i + 1] = u, v
    if np.linalg.cond(A) > 1e12:
        raise DegenerateConfiguration("ill-conditioned homography system")
    h = np.linalg.solve(A, b)
    return np.append(h, 1.0).reshape(3, 3)


def apply_homography(H, pts) -> np.ndarray:
    pts = np.atleast_2d(np.asarray(pts, dtype=np.float64))
    q = np.column_stack([pts, np.ones(len(pts))]) @ np.asarray(H).T
    return q[:, :2] / q[:, 2:3]


# --------------------------------------------------------------------------
# differentiable warping


def _as_patch_tensor(patch) -> torch.Tensor:
    if isinstance(patch, torch.Tensor):
        t = patch
    else:
        t = torch.tensor(np.asarray(getattr(patch, "data", patch)))
    return t[..., None] if t.ndim == 2 else t


def warp_patch(patch, H, canvas: Sequence[int]):
    """Inverse-map bilinear warp of ``patch`` (h x w x C) onto an ``canvas=(H, W)`` grid.

    Returns ``(warped, mask)``: an ``H x W x C`` tensor that is zero outside the
    footprint, and the boolean footprint mask.  Differentiable w.r.t. the
    patch values; samples near the patch border clamp to the edge pixels.
    """
    p = _as_patch_tensor(patch)
    ph, pw, C = p.shape
    Hc, Wc = int(canvas[0]), int(canvas[1])
    Hm = np.asarray(H, dtype=np.float64)
    if Hm.shape != (3, 3) or not np.all(np.isfinite(Hm)):
        raise SingularHomography("homography must be a finite 3x3 matrix")
    if abs(np.linalg.det(Hm)) < 1e-300 or np.linalg.cond(Hm) > 1e12:
        raise SingularHomography("homography is not invertible")
    Hinv = np.linalg.inv(Hm)

    # restrict work to the footprint's bounding box when it is finite
    corners = np.column_stack([patch_corners((ph, pw)), np.ones(4)]) @ Hm.T
    if np.all(corners[:, 2] > 0):
        xy = corners[:, :2] / corners[:, 2:3]
        u0 = int(np.clip(np.floor(xy[:, 0].min()) - 1, 0, Wc))
        u1 = int(np.clip(np.ceil(xy[:, 0].max()) + 1, 0, Wc))
        v0 = int(np.clip(np.floor(xy[:, 1].min()) - 1, 0, Hc))
        v1 = int(np.clip(np.ceil(xy[:, 1].max()) + 1, 0, Hc))
    else:
        u0, u1, v0, v1 = 0, Wc, 0, Hc

    warped = torch.zeros((Hc, Wc, C), dtype=p.dtype)
    mask = torch.zeros((Hc, Wc), dtype=torch.bool)
    if u1 <= u0 or v1 <= v0:
        return warped, mask

    vv, uu = np.meshgrid(np.arange(v0, v1), np.arange(u0, u1), indexing="ij")
    q = np.stack([uu + 0.5, vv + 0.5, np.ones_like(uu, dtype=np.float64)], axis=-1) @ Hinv.T
    w = q[..., 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        x = q[..., 0] / w
        y = q[..., 1] / w
    inside = (w > 0) & (x >= 0) & (x < pw) & (y >= 0) & (y < ph)
    if not inside.any():
        return warped, mask
    rows, cols = vv[inside], uu[inside]
    sx = np.clip(x[inside] - 0.5, 0.0, pw - 1)
    sy = np.clip(y[inside] - 0.5, 0.0, ph - 1)
    x0 = np.floor(sx).astype(np.int64)
    y0 = np.floor(sy).astype(np.int64)
    x1 = np.minimum(x0 + 1, pw - 1)
    y1 = np.minimum(y0 + 1, ph - 1)
    fx = torch.as_tensor(sx - x0, dtype=p.dtype)[:, None]
    fy = torch.as_tensor(sy - y0, dtype=p.dtype)[:, None]
    x0, x1, y0, y1 = (torch.as_tensor(a) for a in (x0, x1, y0, y1))
    vals = ((1 - fy) * ((1 - fx) * p[y0, x0] + fx * p[y0, x1])
            + fy * ((1 - fx) * p[y1, x0] + fx * p[y1, x1]))
    r, c = torch.as_tensor(rows), torch.as_tensor(cols)
    warped = warped.index_put((r, c), vals)
    mask[r, c] = True
    return warped, mask


# --------------------------------------------------------------------------
# EOT placement


@dataclass(frozen=True)
class AffinePlacement:
    """Resolved center (px), scale, rotation (rad), plus the drawn shift fraction."""

    center: tuple[float, float]
    scale: float = 1.0
    rotation: float = 0.0
    shift_fraction: float = 0.0

    def __post_init__(self):
        if not self.scale > 0:
            raise ValidationError(f"scale must be positive, got {self.scale}")

    def homography(self, patch_hw: Sequence[int]) -> np.ndarray:
        h, w = patch_hw[:2]
        cx, cy = self.center
        c, s = np.cos(self.rotation), np.sin(self.rotation)
        to_origin = np.array([[1, 0, -w / 2.0], [0, 1, -h / 2.0], [0, 0, 1]])
        rs = np.array([[c * self.scale, -s * self.scale, 0], [s * self.scale, c * self.scale, 0], [0, 0, 1]])
        to_center = np.array([[1, 0, cx], [0, 1, cy], [0, 0, 1]])
        return to_center @ rs @ to_origin


@dataclass(frozen=True)
class EOTConfig:
    scale_range: tuple[float, float] = (0.8, 1.2)
    shift_range: tuple[float, float] = (0.0, 1.0)
    rotation_range: tuple[float, float] = (0.0, 0.0)

    def __post_init__(self):
        for name in ("scale_range", "shift_range", "rotation_range"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValidationError(f"{name}: lower bound {lo} exceeds upper bound {hi}")
        if self.scale_range[0] <= 0:
            raise ValidationError("scale_range must be positive")


def eot_centers(image_hw: Sequence[int], num_patches: int) -> list[tuple[float, float]]:
    """Nominal patch centers: image center for one patch, else centers of equal vertical strips.

    Two patches therefore sit at the centers of the left and right halves.
    """
    H, W = image_hw[:2]
    return [((k + 0.5) * W / num_patches, H / 2.0) for k in range(num_patches)]


def sample_eot_placement(rng: np.random.Generator, image_hw: Sequence[int], patch_hw: Sequence[int],
                         cfg: EOTConfig = EOTConfig(), center=None) -> AffinePlacement:
    """Draw one randomized placement.

    The center moves uniformly within ``c_x +- r * w/2`` and ``c_y +- r * h/2``
    where ``r`` is itself uniform in ``cfg.shift_range`` and ``(h, w)`` is the
    nominal patch size.
    """
    H, W = image_hw[:2]
    ph, pw = patch_hw[:2]
    if ph >= H or pw >= W:
        raise PatchTooLarge(f"patch {ph}x{pw} does not fit image {H}x{W}")
    cx, cy = center if center is not None else (W / 2.0, H / 2.0)
    r = rng.uniform(*cfg.shift_range)
    dx, dy = rng.uniform(-1.0, 1.0, size=2)
    scale = rng.uniform(*cfg.scale_range)
    rot = rng.uniform(*cfg.rotation_range)
    return AffinePlacement(
        center=(cx + dx * r * pw / 2.0, cy + dy * r * ph / 2.0),
        scale=float(scale), rotation=float(rot), shift_fraction=float(r),
    )


def centered_placements(image_hw: Sequence[int], num_patches: int) -> list[AffinePlacement]:
    return [AffinePlacement(center=c) for c in eot_centers(image_hw, num_patches)]


def resolve_homography(placement, patch_hw: Sequence[int]) -> np.ndarray:
    if hasattr(placement, "homography"):
        return placement.homography(patch_hw)
    H = np.asarray(placement, dtype=np.float64)
    if H.shape != (3, 3):
        raise ValidationError("placement must be AffinePlacement, ProjectivePlacement or a 3x3 matrix")
    return H


# --------------------------------------------------------------------------
# patch application


def apply_patches(image, patches, placements, appearance=None, rng: np.random.Generator | None = None):
    """Paste transformed patches into ``image``.

    ``image`` is H x W x C (tensor or array); ``patches`` a sequence of
    h x w x C tensors (or :class:`~segpatch.core.PatchSet`); ``placements`` one
    placement per patch; ``appearance`` ``None``, one
    :class:`~segpatch.appearance.AppearanceParams` for all patches, or one per
    patch.  Later patches overwrite earlier ones where footprints overlap.

    Returns ``(patched, mask, footprints)`` with ``mask`` the union of the
    boolean ``footprints``.
    """
    from .appearance import AppearanceParams, apply_appearance

    if hasattr(patches, "patches"):
        patches = [torch.tensor(p.data) for p in patches.patches]
    patches = [_as_patch_tensor(p) for p in patches]
    placements = list(placements)
    if len(placements) != len(patches):
        raise ValidationError(f"{len(patches)} patches but {len(placements)} placements")
    x = image if isinstance(image, torch.Tensor) else torch.tensor(np.asarray(getattr(image, "data", image)))
    if x.ndim == 2:
        x = x[..., None]
    dtype = patches[0].dtype if patches[0].is_floating_point() else x.dtype
    x = x.to(dtype)
    if appearance is None or isinstance(appearance, AppearanceParams):
        appearance = [appearance] * len(patches)
    out = x
    union = torch.zeros(x.shape[:2], dtype=torch.bool)
    footprints = []
    for p, plc, app in zip(patches, placements, appearance):
        if p.shape[-1] != x.shape[-1]:
            raise ValidationError("patch and image channel counts differ")
        q = apply_appearance(p, app, rng) if app is not None else p
        warped, m = warp_patch(q, resolve_homography(plc, p.shape), x.shape[:2])
        mf = m[..., None].to(dtype)
        out = out * (1 - mf) + warped * mf
        union |= m
        footprints.append(m)
    return out.clamp(0.0, 1.0), union, footprints
