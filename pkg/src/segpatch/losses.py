"""Objectives and gradient-combination rules for patch optimization.

Conventions: logits are ``N x N_c`` (one row per pixel) or ``B x N_c x H x W``;
pixel sets are boolean masks; ``ignore_value`` pixels never contribute.
Gradient-mixing helpers normalize each constituent to unit L2 norm and skip
constituents whose norm is zero.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Mapping, Sequence, Union

import numpy as np
import torch

from .core import IGNORE_INDEX, ClassPalette
from .errors import (
    AllZeroGradients,
    EmptyDomain,
    EmptyPixelSet,
    NoOtherClass,
    NonFiniteGradient,
    PatchTooSmall,
    ShapeMismatch,
    ValidationError,
)

GAMMA_MODES = ("adaptive", "ce-all", "ce-outside")


@dataclass(frozen=True)
class LossConfig:
    """Attack objective and loss weights.

    ``gamma`` is a float in [0, 1], ``"adaptive"``, ``"ce-all"`` (plain CE on
    every pixel) or ``"ce-outside"`` (plain CE outside the patches).  For a
    targeted attack set ``attacked`` to the class to remove and ``target`` to a
    class id or ``"nn"``.  ``beta`` enables the defense-aware mix.
    """

    targeted: bool = False
    attacked: int | None = None
    target: Union[int, str, None] = None
    gamma: Union[float, str] = "adaptive"
    w_adv: float = 1.0
    w_nps: float = 0.0
    w_smooth: float = 1.0
    beta: float | None = None
    palette: ClassPalette = field(default_factory=ClassPalette)
    ignore_value: int = IGNORE_INDEX

    def __post_init__(self):
        if isinstance(self.gamma, str):
            if self.gamma not in GAMMA_MODES:
                raise ValidationError(f"gamma must be a float or one of {GAMMA_MODES}")
        elif not 0.0 <= float(self.gamma) <= 1.0:
            raise ValidationError("gamma must lie in [0, 1]")
        if min(self.w_adv, self.w_nps, self.w_smooth) < 0:
            raise ValidationError("loss weights must be non-negative")
        if self.beta is not None and not 0.0 <= self.beta <= 1.0:
            raise ValidationError("beta must lie in [0, 1]")
        if self.targeted and (self.attacked is None or self.target is None):
            raise ValidationError("targeted attacks need both 'attacked' and 'target'")

    def to_dict(self) -> dict:
        return {
            "targeted": self.targeted, "attacked": self.attacked, "target": self.target,
            "gamma": self.gamma, "w_adv": self.w_adv, "w_nps": self.w_nps,
            "w_smooth": self.w_smooth, "beta": self.beta,
            "palette": self.palette.colors.tolist(), "ignore_value": self.ignore_value,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "LossConfig":
        d = dict(d)
        if "palette" in d:
            d["palette"] = ClassPalette(np.asarray(d["palette"]))
        return cls(**d)


def _mask(m, n: int | None = None) -> torch.Tensor:
    t = m if isinstance(m, torch.Tensor) else torch.as_tensor(np.asarray(getattr(m, "mask", m)))
    t = t.to(torch.bool).reshape(-1)
    if n is not None and t.numel() != n:
        raise ShapeMismatch(f"pixel mask has {t.numel()} entries, expected {n}")
    return t


def _labels(y, n: int | None = None) -> torch.Tensor:
    t = y if isinstance(y, torch.Tensor) else torch.as_tensor(np.asarray(getattr(y, "data", y)))
    t = t.to(torch.int64).reshape(-1)
    if n is not None and t.numel() != n:
        raise ShapeMismatch(f"label map has {t.numel()} entries, expected {n}")
    return t


def _rows(logits: torch.Tensor) -> torch.Tensor:
    if logits.ndim == 4:
        return logits.permute(0, 2, 3, 1).reshape(-1, logits.shape[1])
    if logits.ndim == 3:
        return logits.permute(1, 2, 0).reshape(-1, logits.shape[0])
    return logits


def ce_per_pixel(logits, labels, ignore_value: int = IGNORE_INDEX):
    """Per-pixel softmax cross-entropy (log-sum-exp form) and the valid-pixel mask."""
    z = _rows(logits)
    y = _labels(labels, z.shape[0])
    valid = y != ignore_value
    safe = torch.where(valid, y, torch.zeros_like(y))
    ce = torch.logsumexp(z, dim=1) - z.gather(1, safe[:, None])[:, 0]
    return ce, valid


def pixelwise_ce(logits, labels, pixels=None, ignore_value: int = IGNORE_INDEX, reduction: str = "mean"):
    """Mean (or summed) cross-entropy over ``pixels`` minus ignored labels."""
    ce, valid = ce_per_pixel(logits, labels, ignore_value)
    keep = valid if pixels is None else valid & _mask(pixels, valid.numel())
    if not keep.any():
        raise EmptyPixelSet("no pixels left to evaluate the loss on")
    sel = ce[keep]
    return sel.mean() if reduction == "mean" else sel.sum()


def split_upsilon(pred, labels, patch_mask, ignore_value: int = IGNORE_INDEX) -> np.ndarray:
    """Boolean mask of out-of-patch, non-ignored pixels whose prediction matches ``labels``."""
    p = np.asarray(getattr(pred, "data", pred))
    y = np.asarray(getattr(labels, "data", labels))
    m = np.asarray(getattr(patch_mask, "mask", patch_mask), dtype=bool)
    if p.shape != y.shape or m.shape != y.shape:
        raise ShapeMismatch(f"shapes {p.shape}, {y.shape}, {m.shape} differ")
    return (p == y) & ~m & (y != ignore_value)


def adaptive_gamma(upsilon, domain) -> float:
    """``|upsilon| / |domain|``."""
    n = int(np.count_nonzero(np.asarray(getattr(domain, "mask", domain))))
    if n == 0:
        raise EmptyDomain("no out-of-patch pixels")
    return int(np.count_nonzero(np.asarray(getattr(upsilon, "mask", upsilon)))) / n


def unit(g: torch.Tensor | None) -> torch.Tensor | None:
    if g is None:
        return None
    n = torch.linalg.vector_norm(g)
    if not torch.isfinite(n):
        raise NonFiniteGradient("gradient norm is not finite")
    return None if n == 0 else g / n


def gamma_mix(g_correct, g_wrong, gamma: float):
    """``gamma * g_correct/|g_correct| + (1 - gamma) * g_wrong/|g_wrong|``.

    A missing (``None``) or zero term is dropped and the other keeps its own
    weight.  Returns ``None`` when both vanish.
    """
    a, b = unit(g_correct), unit(g_wrong)
    out = None
    if a is not None:
        out = gamma * a
    if b is not None:
        out = (1.0 - gamma) * b if out is None else out + (1.0 - gamma) * b
    return out


@dataclass
class AdvGradient:
    grads: list                 # per image: list of per-input gradients
    gamma: list[float]          # gamma used per image
    loss: list[float]           # mean CE outside the patches per image (monitoring)
    upsilon: list[np.ndarray]   # boolean H x W per image


def adv_gradient(logits, wrt, labels, patch_mask, cfg: LossConfig = LossConfig(), retain_graph: bool = False) -> AdvGradient:
    """Balanced adversarial gradient of the CE split, per image and input.

    ``logits`` is ``B x N_c x H x W`` produced from inputs in ``wrt``, a
    sequence (one per image) of tensors that only influence their own image.
    ``labels`` and ``patch_mask`` are ``B x H x W``.  The returned directions
    point uphill of the loss on ``labels``; the caller decides the sign.
    """
    B, _, H, W = logits.shape
    labels = np.asarray(labels).reshape(B, H, W)
    patch_mask = np.asarray(patch_mask, dtype=bool).reshape(B, H, W)
    ce, valid = ce_per_pixel(logits, labels, cfg.ignore_value)
    ce = ce.reshape(B, H * W)
    valid = valid.reshape(B, H * W).numpy()
    pred = logits.detach().argmax(dim=1).numpy()
    wrt = [list(w) if isinstance(w, (list, tuple)) else [w] for w in wrt]
    flat_wrt = [t for ws in wrt for t in ws]

    ups, gammas, losses = [], [], []
    m_mask = np.zeros((B, H * W), dtype=bool)
    mbar_mask = np.zeros((B, H * W), dtype=bool)
    for b in range(B):
        outside = (~patch_mask[b]).reshape(-1) & valid[b]
        u = split_upsilon(pred[b], labels[b], patch_mask[b], cfg.ignore_value)
        ups.append(u)
        m_mask[b] = u.reshape(-1)
        mbar_mask[b] = outside & ~m_mask[b]
        if cfg.gamma == "adaptive":
            gammas.append(adaptive_gamma(u, outside))
        elif isinstance(cfg.gamma, str):
            gammas.append(float("nan"))
        else:
            gammas.append(float(cfg.gamma))
        losses.append(float(ce[b].detach()[torch.as_tensor(outside)].mean()) if outside.any() else float("nan"))

    def grad_of(mask, reduction, retain):
        sel = torch.as_tensor(mask)
        if not sel.any():
            return [None] * len(flat_wrt)
        if reduction == "mean":
            counts = sel.sum(dim=1).clamp(min=1)
            total = ((ce * sel).sum(dim=1) / counts).sum()
        else:
            total = (ce * sel).sum()
        return list(torch.autograd.grad(total, flat_wrt, retain_graph=retain, allow_unused=True))

    def regroup(flat):
        out, i = [], 0
        for ws in wrt:
            out.append(flat[i:i + len(ws)])
            i += len(ws)
        return out

    if cfg.gamma in ("ce-all", "ce-outside"):
        dom = valid if cfg.gamma == "ce-all" else (m_mask | mbar_mask)
        g = regroup(grad_of(dom, "mean", retain_graph))
        grads = [[unit(t) for t in gs] for gs in g]
    else:
        gm = regroup(grad_of(m_mask, "sum", True))
        gb = regroup(grad_of(mbar_mask, "sum", retain_graph))
        grads = [[gamma_mix(a, c, gammas[b]) for a, c in zip(gm[b], gb[b])] for b in range(B)]
    for gs in grads:
        for g in gs:
            if g is not None and not torch.all(torch.isfinite(g)):
                raise NonFiniteGradient("adversarial gradient contains non-finite values")
    return AdvGradient(grads=grads, gamma=gammas, loss=losses, upsilon=ups)


def nps(patch, palette: ClassPalette = ClassPalette()) -> torch.Tensor:
    """Mean over pixels of the product of distances to every printable color."""
    p = patch if isinstance(patch, torch.Tensor) else torch.as_tensor(np.asarray(getattr(patch, "data", patch)))
    colors = torch.tensor(palette.colors, dtype=p.dtype)
    if p.shape[-1] != colors.shape[1]:
        raise ShapeMismatch("patch channels and palette dimension differ")
    d = torch.linalg.vector_norm(p[..., None, :] - colors, dim=-1)
    return d.prod(dim=-1).mean()


def smoothness(patch) -> torch.Tensor:
    """Sum of squared forward differences along both axes and all channels."""
    p = patch if isinstance(patch, torch.Tensor) else torch.as_tensor(np.asarray(getattr(patch, "data", patch)))
    if p.ndim == 2:
        p = p[..., None]
    if p.shape[0] < 2 or p.shape[1] < 2:
        raise PatchTooSmall(f"smoothness needs a patch of at least 2x2, got {tuple(p.shape[:2])}")
    return ((p[1:] - p[:-1]) ** 2).sum() + ((p[:, 1:] - p[:, :-1]) ** 2).sum()


def total_gradient(grads: Mapping[str, torch.Tensor | None], weights: Mapping[str, float]) -> torch.Tensor:
    """``sum_l w_l * g_l / |g_l|`` over the named components; zero-norm terms are skipped."""
    out = None
    shape = None
    for name, g in grads.items():
        if g is None:
            continue
        if shape is None:
            shape = g.shape
        elif g.shape != shape:
            raise ShapeMismatch(f"gradient {name!r} has shape {tuple(g.shape)}, expected {tuple(shape)}")
        w = float(weights.get(name, 0.0))
        u = unit(g)
        if w == 0.0 or u is None:
            continue
        out = w * u if out is None else out + w * u
    if out is None:
        raise AllZeroGradients("every weighted gradient component is zero")
    return out


def defense_aware_gradient(g_adv, g_act, beta: float) -> torch.Tensor:
    """``beta * g_adv/|g_adv| - (1 - beta) * g_act/|g_act|`` with zero-norm terms skipped."""
    if g_adv is not None and g_act is not None and g_adv.shape != g_act.shape:
        raise ShapeMismatch("adversarial and activation gradients differ in shape")
    a, c = unit(g_adv), unit(g_act)
    out = None
    if a is not None and beta != 0.0:
        out = beta * a
    if c is not None and beta != 1.0:
        out = -(1.0 - beta) * c if out is None else out - (1.0 - beta) * c
    if out is None:
        raise AllZeroGradients("both adversarial and activation gradients vanish")
    return out


def activation_loss(c_hat) -> torch.Tensor:
    """Squared L2 norm of the normalized compressed features."""
    t = c_hat if isinstance(c_hat, torch.Tensor) else torch.as_tensor(np.asarray(c_hat))
    return (t * t).sum()


def build_target_label(y, attacked: int, target: Union[int, str], ignore_value: int = IGNORE_INDEX) -> np.ndarray:
    """Target map that removes class ``attacked``.

    ``target`` is a class id (plain substitution) or ``"nn"``: every attacked
    pixel takes the class of its nearest non-attacked pixel under 4-connected
    (Manhattan) distance, ties going to the lowest class id.  Ignored pixels
    are neither relabeled nor used as sources.
    """
    y = np.asarray(getattr(y, "data", y))
    out = y.copy()
    attacked_mask = y == attacked
    if not attacked_mask.any():
        warnings.warn(f"class {attacked} does not occur in the label map", stacklevel=2)
        return out
    if not (isinstance(target, str)):
        out[attacked_mask] = int(target)
        return out
    if target.lower() != "nn":
        raise ValidationError(f"target must be a class id or 'nn', got {target!r}")
    source = ~attacked_mask & (y != ignore_value)
    if not source.any():
        raise NoOtherClass("nearest-neighbor relabeling needs at least one other class")

    H, W = y.shape
    dist = np.full((H, W), -1, dtype=np.int64)
    lab = np.where(source, y, -1)
    dist[source] = 0
    frontier = list(zip(*np.nonzero(source)))
    d = 0
    while frontier:
        d += 1
        best: dict[tuple[int, int], int] = {}
        for r, c in frontier:
            for rr, cc in ((r - 1, c), (r + 1, c), (r, c - 1), (r, c + 1)):
                if 0 <= rr < H and 0 <= cc < W and dist[rr, cc] < 0 and attacked_mask[rr, cc]:
                    k = (rr, cc)
                    cand = lab[r, c]
                    if k not in best or cand < best[k]:
                        best[k] = cand
        for (rr, cc), cls in best.items():
            dist[rr, cc] = d
            lab[rr, cc] = cls
        frontier = sorted(best)
    # attacked regions walled off by ignored pixels have no source to copy
    lab[attacked_mask & (dist < 0)] = ignore_value
    out[attacked_mask] = lab[attacked_mask]
    return out
