"""Fast patch detection from over-activated features at one layer.

Offline: per-location mean/std of the channel-max-compressed activations on
clean images, and the nu-quantile of the normalized values.  Online: compress,
normalize, keep values above the quantile, sum them, compare to a decision
threshold.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch

from .errors import CorruptMeta, EmptyScores, TooFewImages, ValidationError
from .model import SegModel, to_batch

SIGMA_FLOOR = 1e-6


@dataclass(frozen=True)
class DetectorCalibration:
    layer: str
    mu: np.ndarray
    sigma: np.ndarray
    theta_nu: float
    nu: float = 0.999
    rho: float | None = None

    def __post_init__(self):
        mu = np.asarray(self.mu, dtype=np.float64)
        sigma = np.asarray(self.sigma, dtype=np.float64)
        if mu.shape != sigma.shape:
            raise ValidationError("mu and sigma must share a shape")
        if np.any(sigma < SIGMA_FLOOR * (1 - 1e-12)):
            raise ValidationError("sigma must be floored at SIGMA_FLOOR")
        if not np.isfinite(self.theta_nu):
            raise ValidationError("theta_nu must be finite")
        if not 0.0 < self.nu < 1.0:
            raise ValidationError("nu must lie in (0, 1)")
        for a in (mu, sigma):
            a.setflags(write=False)
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "sigma", sigma)

    def with_rho(self, rho: float) -> "DetectorCalibration":
        return DetectorCalibration(self.layer, self.mu, self.sigma, self.theta_nu, self.nu, float(rho))

    def to_json(self) -> dict:
        return {
            "layer": self.layer,
            "mu": {"shape": list(self.mu.shape), "data": self.mu.reshape(-1).tolist()},
            "sigma": {"shape": list(self.sigma.shape), "data": self.sigma.reshape(-1).tolist()},
            "theta_nu": float(self.theta_nu),
            "nu": float(self.nu),
            "rho": None if self.rho is None else float(self.rho),
        }

    @classmethod
    def from_json(cls, d: dict) -> "DetectorCalibration":
        try:
            def arr(x):
                return np.asarray(x["data"], dtype=np.float64).reshape(x["shape"])
            return cls(d["layer"], arr(d["mu"]), arr(d["sigma"]), float(d["theta_nu"]),
                       float(d["nu"]), None if d.get("rho") is None else float(d["rho"]))
        except (KeyError, TypeError, ValueError) as exc:
            raise CorruptMeta(f"bad calibration record: {exc}") from exc

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json()))

    @classmethod
    def load(cls, path) -> "DetectorCalibration":
        try:
            return cls.from_json(json.loads(Path(path).read_text()))
        except json.JSONDecodeError as exc:
            raise CorruptMeta(f"{path}: {exc}") from exc


def compress_features(acts):
    """Max over channels of ``|activation|``: ``C x H x W -> H x W`` (leading batch dims kept)."""
    if isinstance(acts, torch.Tensor):
        return acts.abs().amax(dim=-3)
    return np.abs(np.asarray(acts)).max(axis=-3)


def normalize_features(compressed, cal: DetectorCalibration):
    if isinstance(compressed, torch.Tensor):
        mu = torch.tensor(cal.mu, dtype=compressed.dtype)
        sigma = torch.tensor(cal.sigma, dtype=compressed.dtype)
        return (compressed - mu) / sigma
    return (np.asarray(compressed, dtype=np.float64) - cal.mu) / cal.sigma


def stats_from_features(compressed: Sequence[np.ndarray], nu: float = 0.999,
                        sigma_floor: float = SIGMA_FLOOR):
    """Per-location mean, floored population std, and the pooled nu-quantile."""
    stack = np.stack([np.asarray(c, dtype=np.float64) for c in compressed])
    if stack.shape[0] < 2:
        raise TooFewImages("calibration needs at least two clean images")
    if not 0.0 < nu < 1.0:
        raise ValidationError("nu must lie in (0, 1)")
    mu = stack.mean(axis=0)
    sigma = np.maximum(stack.std(axis=0), sigma_floor)
    theta = float(np.quantile((stack - mu) / sigma, nu, method="linear"))
    return mu, sigma, theta


def layer_features(model: SegModel, images: Iterable, layer: str, batch_size: int = 16) -> list[np.ndarray]:
    """Compressed features for each image (channels-last inputs)."""
    model.check_layers([layer])
    images = list(images)
    out = []
    for i in range(0, len(images), batch_size):
        x = torch.cat([to_batch(im, model) for im in images[i:i + batch_size]])
        with torch.no_grad():
            _, acts = model.run(x, record=(layer,))
        out.extend(compress_features(acts[layer]).double().numpy())
    return out


def calibrate_stats(clean_images, model: SegModel, layer: str | None = None, nu: float = 0.999,
                    sigma_floor: float = SIGMA_FLOOR) -> DetectorCalibration:
    layer = layer or model.fusion_layer_id
    images = list(clean_images)
    if len(images) < 2:
        raise TooFewImages("calibration needs at least two clean images")
    mu, sigma, theta = stats_from_features(layer_features(model, images, layer), nu, sigma_floor)
    return DetectorCalibration(layer, mu, sigma, theta, nu)


def score_compressed(compressed, cal: DetectorCalibration) -> float:
    """Sum of the normalized features strictly above ``theta_nu``."""
    z = normalize_features(compressed, cal)
    return float(z[z > cal.theta_nu].sum())


def detect(model: SegModel, image, cal: DetectorCalibration) -> tuple[float, bool]:
    """Return ``(score, unsafe)``; ``unsafe`` needs a calibrated ``rho``."""
    model.check_layers([cal.layer])
    with torch.no_grad():
        _, acts = model.run(to_batch(image, model), record=(cal.layer,))
    score = score_compressed(compress_features(acts[cal.layer][0]).double().numpy(), cal)
    if cal.rho is None:
        raise ValidationError("calibration has no decision threshold rho")
    return score, score > cal.rho


def detection_scores(model: SegModel, images, cal: DetectorCalibration) -> np.ndarray:
    feats = layer_features(model, images, cal.layer)
    return np.array([score_compressed(f, cal) for f in feats])


def parse_policy(policy) -> tuple[str, float]:
    if isinstance(policy, tuple):
        return policy[0], float(policy[1])
    if policy == "youden":
        return "youden", 0.0
    if isinstance(policy, str) and policy.startswith("fpr:"):
        return "fpr", float(policy.split(":", 1)[1])
    raise ValidationError(f"unknown threshold policy {policy!r}; use 'youden' or 'fpr:<alpha>'")


def calibrate_decision_threshold(clean_scores, attacked_scores, policy="youden") -> float:
    """Decision threshold rho for ``unsafe = score > rho``.

    ``"youden"`` maximizes TPR - FPR over thresholds placed midway between
    consecutive distinct scores (ties go to the lower FPR, then the larger
    threshold).  ``"fpr:<alpha>"`` returns the smallest threshold flagging at
    most ``floor(alpha * n_clean)`` clean scores.
    """
    clean = np.asarray(clean_scores, dtype=np.float64).ravel()
    attacked = np.asarray(attacked_scores, dtype=np.float64).ravel()
    if clean.size == 0 or attacked.size == 0:
        raise EmptyScores("both clean and attacked scores are required")
    kind, alpha = parse_policy(policy)
    if kind == "fpr":
        if not 0.0 <= alpha <= 1.0:
            raise ValidationError("alpha must lie in [0, 1]")
        k = int(np.floor(alpha * clean.size + 1e-9))
        s = np.sort(clean)
        if k >= clean.size:
            return float(s[0] - 1.0)
        return float(s[clean.size - 1 - k])
    values = np.unique(np.concatenate([clean, attacked]))
    cands = np.concatenate([[values[0] - 1.0], (values[:-1] + values[1:]) / 2.0, [values[-1] + 1.0]])
    tpr = (attacked[None, :] > cands[:, None]).mean(axis=1)
    fpr = (clean[None, :] > cands[:, None]).mean(axis=1)
    j = tpr - fpr
    best = np.flatnonzero(np.isclose(j, j.max(), rtol=0, atol=1e-12))
    best = best[np.lexsort((-cands[best], fpr[best]))]
    return float(cands[best[0]])
