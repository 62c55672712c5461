"""Patch optimization loop and patch evaluation.

Each step pastes the current patches into a set of images (with freshly
sampled placements and appearance), computes the gamma-balanced adversarial
direction per image, sums it over the images, mixes in the physical
realizability terms, and takes one Adam (or plain gradient) step followed by
clipping to [0, 1].
"""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence, Union

import numpy as np
import torch

from .appearance import AppearanceConfig, preset, sample_appearance
from .core import Patch, PatchSet
from .detector import DetectorCalibration, compress_features, normalize_features
from .errors import AllZeroGradients, BadSize, NonFiniteGradient, PatchTooLarge, ValidationError
from .losses import (
    LossConfig,
    activation_loss,
    adv_gradient,
    build_target_label,
    defense_aware_gradient,
    nps,
    smoothness,
    total_gradient,
)
from .metrics import ConfusionMatrix, accumulate_confusion, mask_patch_white, miou_macc
from .model import SegModel
from .placement import EOTConfig, apply_patches, eot_centers, sample_eot_placement

log = logging.getLogger(__name__)

PLACEMENT_MODES = ("eot", "projective")
STEP_RULES = ("adam", "ascent")


@dataclass(frozen=True)
class OptimizeConfig:
    """Settings for :func:`optimize_patch`.

    ``batch_size=None`` accumulates over the whole dataset before every step
    (one step per epoch); an integer takes one step per mini-batch.
    ``step_rule="ascent"`` moves by ``lr`` times the combined unit-norm
    direction.  ``detector`` is required when ``loss.beta`` is set.
    """

    epochs: int = 200
    lr: float = 0.5
    step_rule: str = "adam"
    batch_size: int | None = None
    seed: int = 0
    placement: str = "eot"
    loss: LossConfig = field(default_factory=LossConfig)
    eot: EOTConfig = field(default_factory=EOTConfig)
    appearance: Union[str, AppearanceConfig] = "cityscapes"
    detector: DetectorCalibration | None = None
    checkpoint_every: int = 0
    checkpoint_dir: str | None = None
    validate_every: int = 1
    chunk_size: int = 16

    def __post_init__(self):
        if self.epochs < 1:
            raise ValidationError("epochs must be >= 1")
        if not self.lr >= 0:
            raise ValidationError("lr must be non-negative")
        if self.step_rule not in STEP_RULES:
            raise ValidationError(f"step_rule must be one of {STEP_RULES}")
        if self.placement not in PLACEMENT_MODES:
            raise ValidationError(f"placement must be one of {PLACEMENT_MODES}")
        if self.batch_size is not None and self.batch_size < 1:
            raise ValidationError("batch_size must be >= 1")
        if self.loss.beta is not None and self.detector is None:
            raise ValidationError("defense-aware optimization (beta) needs a detector calibration")
        if isinstance(self.appearance, str):
            preset(self.appearance)


@dataclass
class OptimizeReport:
    loss: list[float] = field(default_factory=list)        # mean CE outside the patches
    nps: list[float] = field(default_factory=list)
    smoothness: list[float] = field(default_factory=list)
    activation: list[float] = field(default_factory=list)  # nan unless defense-aware
    gamma: list[float] = field(default_factory=list)       # mean gamma over the epoch's images
    val_miou: list[float] = field(default_factory=list)
    val_macc: list[float] = field(default_factory=list)
    wall_clock: list[float] = field(default_factory=list)  # seconds since start, per epoch

    @property
    def epochs(self) -> int:
        return len(self.loss)

    def to_dict(self) -> dict:
        return {k: list(v) for k, v in self.__dict__.items()}


def init_patch(kind: str = "random", size: Sequence[int] = (16, 32), channels: int = 3,
               seed: int = 0, path=None) -> Patch:
    """``"random"`` (uniform, seeded), ``"gray"`` (all 0.5) or ``"file"`` (8-bit PNG at ``path``)."""
    if kind == "file":
        from .datasets import read_png

        a = read_png(path).astype(np.float64) / 255.0
        return Patch(a[..., None] if a.ndim == 2 else a)
    if len(size) != 2 or min(size) < 1 or channels < 1:
        raise BadSize(f"invalid patch size {tuple(size)} x {channels}")
    h, w = int(size[0]), int(size[1])
    if kind == "random":
        return Patch(np.random.default_rng(seed).uniform(0.0, 1.0, size=(h, w, channels)))
    if kind == "gray":
        return Patch(np.full((h, w, channels), 0.5))
    raise ValidationError(f"unknown init kind {kind!r}; use random, gray or file")


def init_patch_set(kind: str, sizes: Sequence[Sequence[int]], channels: int = 3, seed: int = 0) -> PatchSet:
    return PatchSet([Patch(init_patch(kind, s, channels, seed + k).data, id=k + 1)
                     for k, s in enumerate(sizes)])


def _patch_arrays(patches) -> list[np.ndarray]:
    if isinstance(patches, PatchSet):
        return patches.arrays()
    return [np.asarray(getattr(p, "data", p), dtype=np.float64) for p in patches]


class _Placer:
    """Draws per-image placements and appearance in a fixed order."""

    def __init__(self, mode: str, eot: EOTConfig, appearance, patch_hws):
        self.mode = mode
        self.eot = eot
        self.appearance = preset(appearance) if isinstance(appearance, str) else appearance
        self.patch_hws = patch_hws

    def __call__(self, rng: np.random.Generator, sample):
        hw = sample.image.shape[:2]
        n = len(self.patch_hws)
        if self.mode == "projective":
            if not sample.placements or len(sample.placements) < n:
                raise ValidationError(f"sample {sample.name!r} has no pose for each of the {n} patches")
            plcs = list(sample.placements[:n])
        else:
            plcs = [sample_eot_placement(rng, hw, phw, self.eot, center=c)
                    for phw, c in zip(self.patch_hws, eot_centers(hw, n))]
        apps = [sample_appearance(rng, self.appearance) for _ in range(n)]
        return plcs, apps


def _check_fit(dataset, patch_hws):
    for s in dataset:
        H, W = s.image.shape[:2]
        for ph, pw in patch_hws:
            if ph >= H or pw >= W:
                raise PatchTooLarge(f"patch {ph}x{pw} does not fit image {s.name!r} ({H}x{W})")


def optimize_patch(dataset, model: SegModel, patches, cfg: OptimizeConfig = OptimizeConfig(),
                   val_dataset=None, model_id: str = "") -> tuple[PatchSet, OptimizeReport]:
    """Optimize ``patches`` (a :class:`PatchSet` or list of arrays) against ``model``.

    Untargeted runs raise the cross-entropy w.r.t. the ground truth; targeted
    runs (``cfg.loss.targeted``) lower it w.r.t. the label map built from
    ``attacked``/``target``.  Validation uses ``val_dataset`` (default: the
    training set) with placements drawn from a fixed seed, so the curve is
    comparable across epochs.
    """
    samples = list(dataset)
    if not samples:
        raise ValidationError("dataset is empty")
    arrays = _patch_arrays(patches)
    hws = [a.shape[:2] for a in arrays]
    _check_fit(samples, hws)
    lc = cfg.loss
    rng = np.random.default_rng(cfg.seed)
    placer = _Placer(cfg.placement, cfg.eot, cfg.appearance, hws)

    if lc.targeted:
        labels = [build_target_label(s.labels, lc.attacked, lc.target, lc.ignore_value) for s in samples]
    else:
        labels = [np.asarray(s.labels) for s in samples]

    # float64 master copies; each image gets leaves in the model dtype
    params = [torch.tensor(a, dtype=torch.float64, requires_grad=True) for a in arrays]
    adam = torch.optim.Adam(params, lr=cfg.lr) if cfg.step_rule == "adam" else None
    layer = cfg.detector.layer if lc.beta is not None else None
    if layer is not None:
        model.check_layers([layer])
    weights = {"adv": lc.w_adv, "nps": lc.w_nps, "smooth": lc.w_smooth}
    report = OptimizeReport()
    t0 = time.perf_counter()
    step_size = cfg.batch_size or len(samples)

    def current():
        return PatchSet.from_arrays([p.detach().double().clamp(0, 1).numpy() for p in params])

    for epoch in range(cfg.epochs):
        ep_loss, ep_gamma, ep_act = [], [], []
        for start in range(0, len(samples), step_size):
            idx = range(start, min(start + step_size, len(samples)))
            try:
                g_adv, g_act, losses, gammas, act = _accumulate(
                    model, samples, labels, idx, params, placer, rng, lc, cfg, layer)
                ep_loss += losses
                ep_gamma += gammas
                ep_act += act
                _step(params, adam, cfg, lc, weights, g_adv, g_act)
            except NonFiniteGradient as exc:
                last = current()
                if cfg.checkpoint_dir:
                    _checkpoint(cfg, last, model_id, epoch)
                raise NonFiniteGradient(f"epoch {epoch}: {exc}", last_patches=last) from exc
        with torch.no_grad():
            report.nps.append(float(sum(nps(p, lc.palette) for p in params)))
            report.smoothness.append(float(sum(smoothness(p) for p in params if min(p.shape[:2]) >= 2)))
        report.loss.append(float(np.nanmean(ep_loss)) if ep_loss else float("nan"))
        finite_g = [g for g in ep_gamma if np.isfinite(g)]
        report.gamma.append(float(np.mean(finite_g)) if finite_g else float("nan"))
        report.activation.append(float(np.mean(ep_act)) if ep_act else float("nan"))
        if cfg.validate_every and (epoch + 1) % cfg.validate_every == 0 or epoch == cfg.epochs - 1:
            ev = evaluate_patches(model, val_dataset if val_dataset is not None else samples,
                                  current(), placement=cfg.placement, seed=cfg.seed + 1,
                                  eot=cfg.eot, adversarial_effect=False, chunk_size=cfg.chunk_size)
            report.val_miou.append(ev["mIoU"])
            report.val_macc.append(ev["mAcc"])
        else:
            report.val_miou.append(float("nan"))
            report.val_macc.append(float("nan"))
        report.wall_clock.append(time.perf_counter() - t0)
        if cfg.checkpoint_every and cfg.checkpoint_dir and (epoch + 1) % cfg.checkpoint_every == 0:
            _checkpoint(cfg, current(), model_id, epoch + 1)
        log.debug("epoch %d loss %.4f gamma %.3f val mIoU %.4f", epoch, report.loss[-1],
                  report.gamma[-1], report.val_miou[-1])
    return current(), report


def _accumulate(model, samples, labels, idx, params, placer, rng, lc, cfg, layer):
    """Summed adversarial (ascent) and activation gradients over the images in ``idx``."""
    n = len(params)
    g_adv = [None] * n
    g_act = [None] * n
    losses, gammas, acts_out = [], [], []

    def add(acc, k, g):
        if g is not None:
            g = g.double()
            acc[k] = g.clone() if acc[k] is None else acc[k] + g

    idx = list(idx)
    for c0 in range(0, len(idx), cfg.chunk_size):
        chunk = idx[c0:c0 + cfg.chunk_size]
        leaves, xs, masks = [], [], []
        for i in chunk:
            s = samples[i]
            plcs, apps = placer(rng, s)
            local = [p.detach().to(model.dtype).requires_grad_(True) for p in params]
            x, m, _ = apply_patches(torch.as_tensor(s.image, dtype=model.dtype), local, plcs, apps, rng)
            leaves.append(local)
            xs.append(x.permute(2, 0, 1))
            masks.append(m.numpy())
        logits, acts = model.run(torch.stack(xs), record=(layer,) if layer else ())
        ys = np.stack([labels[i] for i in chunk])
        adv = adv_gradient(logits, leaves, ys, np.stack(masks), lc, retain_graph=layer is not None)
        sign = -1.0 if lc.targeted else 1.0
        for gs in adv.grads:
            for k, g in enumerate(gs):
                add(g_adv, k, None if g is None else sign * g)
        losses += adv.loss
        gammas += adv.gamma
        if layer is not None:
            z = normalize_features(compress_features(acts[layer]), cfg.detector)
            per_image = (z * z).flatten(1).sum(dim=1)
            acts_out += per_image.detach().tolist()
            flat = [t for ls in leaves for t in ls]
            grads = torch.autograd.grad(activation_loss(z), flat, allow_unused=True)
            for j, g in enumerate(grads):
                add(g_act, j % n, g)
    return g_adv, g_act, losses, gammas, acts_out


def _step(params, adam, cfg, lc, weights, g_adv, g_act):
    directions = []
    for k, p in enumerate(params):
        ascent = g_adv[k]
        if lc.beta is not None:
            try:
                ascent = defense_aware_gradient(ascent, g_act[k], lc.beta)
            except AllZeroGradients:
                ascent = None
        comps = {"adv": None if ascent is None else -ascent}
        if lc.w_nps > 0:
            q = p.detach().clone().requires_grad_(True)
            (comps["nps"],) = torch.autograd.grad(nps(q, lc.palette), q)
        if lc.w_smooth > 0 and min(p.shape[:2]) >= 2:
            q = p.detach().clone().requires_grad_(True)
            (comps["smooth"],) = torch.autograd.grad(smoothness(q), q)
        try:
            directions.append(total_gradient(comps, weights))
        except AllZeroGradients:
            directions.append(None)
    if all(d is None for d in directions):
        log.warning("all gradient components vanished; skipping step")
        return
    with torch.no_grad():
        if adam is not None:
            for p, d in zip(params, directions):
                p.grad = torch.zeros_like(p) if d is None else d.to(p.dtype)
            adam.step()
        else:
            for p, d in zip(params, directions):
                if d is not None:
                    p -= cfg.lr * d
        for p in params:
            p.clamp_(0.0, 1.0)


def _checkpoint(cfg: OptimizeConfig, patches: PatchSet, model_id: str, epoch: int) -> None:
    from .datasets import PatchMeta, save_patch

    meta = PatchMeta(sizes=[p.data.shape[:2] for p in patches], num_patches=len(patches),
                     model_id=model_id, placement_mode=cfg.placement,
                     loss_config=cfg.loss.to_dict(), epochs=epoch, seed=cfg.seed)
    save_patch(Path(cfg.checkpoint_dir), patches, meta)


def patched_images(dataset, patches, placement: str = "eot", seed: int = 0,
                   eot: EOTConfig = EOTConfig(), appearance: Union[str, AppearanceConfig] = "identity") -> list[np.ndarray]:
    """Copies of the dataset images with ``patches`` applied (H x W x C float64)."""
    samples = list(dataset)
    arrays = _patch_arrays(patches)
    _check_fit(samples, [a.shape[:2] for a in arrays])
    placer = _Placer(placement, eot, appearance, [a.shape[:2] for a in arrays])
    rng = np.random.default_rng(seed)
    out = []
    for s in samples:
        plcs, apps = placer(rng, s)
        x, _, _ = apply_patches(torch.as_tensor(np.asarray(s.image, dtype=np.float64)), arrays, plcs, apps, rng)
        out.append(x.numpy())
    return out


def evaluate_patches(model: SegModel, dataset, patches=None, placement: str = "eot", seed: int = 0,
                     eot: EOTConfig = EOTConfig(), appearance: Union[str, AppearanceConfig] = "identity",
                     exclude_patch_pixels: bool = True, adversarial_effect: bool = True,
                     chunk_size: int = 16) -> dict:
    """Segmentation quality of ``model`` on patched images.

    Returns a dict with ``mIoU``, ``mAcc``, the pooled ``adversarial_effect``
    (disagreement outside the patches between the patched image and the same
    image with the patch area painted white; ``nan`` without patches) and the
    accumulated ``confusion`` matrix.  ``patches=None`` evaluates clean images.
    """
    samples = list(dataset)
    if not samples:
        raise ValidationError("dataset is empty")
    arrays = _patch_arrays(patches) if patches is not None else []
    hws = [a.shape[:2] for a in arrays]
    if arrays:
        _check_fit(samples, hws)
    rng = np.random.default_rng(seed)
    placer = _Placer(placement, eot, appearance, hws) if arrays else None
    cm = ConfusionMatrix.zeros(model.num_classes)
    differ = domain = 0
    dtype = model.dtype
    tensors = [torch.tensor(a, dtype=dtype) for a in arrays]
    for c0 in range(0, len(samples), chunk_size):
        chunk = samples[c0:c0 + chunk_size]
        xs, masks, whites = [], [], []
        for s in chunk:
            x = torch.as_tensor(s.image, dtype=dtype)
            if arrays:
                plcs, apps = placer(rng, s)
                x, m, _ = apply_patches(x, tensors, plcs, apps, rng)
            else:
                m = torch.zeros(x.shape[:2], dtype=torch.bool)
            xs.append(x.permute(2, 0, 1))
            masks.append(m.numpy())
            if arrays and adversarial_effect:
                whites.append(mask_patch_white(x, m).permute(2, 0, 1))
        with torch.no_grad():
            pred = model.run(torch.stack(xs))[0].argmax(dim=1).numpy()
            ref = model.run(torch.stack(whites))[0].argmax(dim=1).numpy() if whites else None
        for j, s in enumerate(chunk):
            excl = masks[j] if exclude_patch_pixels else None
            cm = cm + accumulate_confusion(pred[j], s.labels, excl, model.num_classes)
            if ref is not None:
                dom = ~masks[j]
                domain += int(dom.sum())
                differ += int(np.count_nonzero(pred[j][dom] != ref[j][dom]))
    miou, macc = miou_macc(cm)
    effect = differ / domain if domain else float("nan")
    return {"mIoU": miou, "mAcc": macc, "adversarial_effect": effect, "confusion": cm}
