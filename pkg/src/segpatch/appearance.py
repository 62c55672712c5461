"""Illumination and noise transforms applied to patches before placement."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .errors import BadRange

NOISE_KINDS = ("gaussian", "uniform")


@dataclass(frozen=True)
class AppearanceParams:
    brightness: float = 0.0
    contrast: float = 1.0
    noise_kind: str = "gaussian"
    noise_scale: float = 0.0
    mean_centered: bool = False

    def __post_init__(self):
        if self.noise_scale < 0:
            raise BadRange("noise scale must be >= 0")
        if self.noise_kind not in NOISE_KINDS:
            raise BadRange(f"noise kind must be one of {NOISE_KINDS}")


@dataclass(frozen=True)
class AppearanceConfig:
    """Uniform sampling ranges for :class:`AppearanceParams`."""

    brightness_range: tuple[float, float] = (0.0, 0.0)
    contrast_range: tuple[float, float] = (1.0, 1.0)
    noise_kind: str = "gaussian"
    noise_scale_range: tuple[float, float] = (0.0, 0.0)
    mean_centered: bool = False

    def __post_init__(self):
        for name in ("brightness_range", "contrast_range", "noise_scale_range"):
            lo, hi = getattr(self, name)
            if not (np.isfinite(lo) and np.isfinite(hi)) or lo > hi:
                raise BadRange(f"{name}={lo, hi} is not a valid interval")
        if self.contrast_range[0] <= 0:
            raise BadRange("contrast factors must be positive")
        if self.noise_scale_range[0] < 0:
            raise BadRange("noise scale must be >= 0")
        if self.noise_kind not in NOISE_KINDS:
            raise BadRange(f"noise kind must be one of {NOISE_KINDS}")


PRESETS = {
    "identity": AppearanceConfig(),
    # Gaussian noise only, sigma 5% of the range
    "cityscapes": AppearanceConfig(noise_scale_range=(0.05, 0.05)),
    # brightness/contrast within +-10%, Gaussian noise sigma 10%
    "carla": AppearanceConfig(brightness_range=(-0.10, 0.10), contrast_range=(0.90, 1.10),
                              noise_scale_range=(0.10, 0.10)),
}


def preset(name: str) -> AppearanceConfig:
    try:
        return PRESETS[name]
    except KeyError:
        raise BadRange(f"unknown appearance preset {name!r}; choose from {sorted(PRESETS)}") from None


def sample_appearance(rng: np.random.Generator, cfg: AppearanceConfig | str = AppearanceConfig()) -> AppearanceParams:
    if isinstance(cfg, str):
        cfg = preset(cfg)
    return AppearanceParams(
        brightness=float(rng.uniform(*cfg.brightness_range)),
        contrast=float(rng.uniform(*cfg.contrast_range)),
        noise_kind=cfg.noise_kind,
        noise_scale=float(rng.uniform(*cfg.noise_scale_range)),
        mean_centered=cfg.mean_centered,
    )


def apply_appearance(patch, params: AppearanceParams, rng: np.random.Generator | None = None):
    """``clip(c * patch + b + noise, 0, 1)``; the noise is a constant w.r.t. the patch.

    With ``mean_centered`` the contrast scales about the patch mean instead of 0.
    Accepts a tensor (differentiable) or an array / :class:`~segpatch.core.Patch`.
    """
    is_tensor = isinstance(patch, torch.Tensor)
    p = patch if is_tensor else torch.tensor(np.asarray(getattr(patch, "data", patch), dtype=np.float64))
    if params.mean_centered:
        m = p.mean()
        out = params.contrast * (p - m) + m + params.brightness
    else:
        out = params.contrast * p + params.brightness
    if params.noise_scale > 0:
        rng = rng if rng is not None else np.random.default_rng()
        if params.noise_kind == "gaussian":
            noise = rng.normal(0.0, params.noise_scale, size=tuple(p.shape))
        else:
            noise = rng.uniform(-params.noise_scale, params.noise_scale, size=tuple(p.shape))
        out = out + torch.as_tensor(noise, dtype=p.dtype)
    out = out.clamp(0.0, 1.0)
    if is_tensor:
        return out
    from .core import Patch

    return Patch(out.numpy(), id=getattr(patch, "id", 1))
