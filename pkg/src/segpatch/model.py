"""Segmentation-model contract, the desk-scale ToyNet, and prediction helpers.

Every model maps a batch ``B x C x H x W`` to logits ``B x N_c x H x W`` and can
record named internal activations on request.  The single-image helpers
(:func:`forward`, :func:`predict_ss`, :func:`input_gradient`) speak the
channels-last interchange format used everywhere else.
"""
from __future__ import annotations

import abc
import functools
import importlib
from typing import Callable, Collection, Mapping

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .core import IGNORE_INDEX, Image, LabelMap
from .errors import ChannelMismatch, LayerNotFound, NonFiniteGradient, ValidationError


class SegModel(abc.ABC):
    """What the attack and detector need from a segmentation network."""

    num_classes: int
    in_channels: int
    fusion_layer_id: str

    @property
    @abc.abstractmethod
    def layer_names(self) -> tuple[str, ...]:
        ...

    @abc.abstractmethod
    def run(self, x: torch.Tensor, record: Collection[str] = ()) -> tuple[torch.Tensor, dict[str, torch.Tensor]]:
        """``x``: B x C x H x W in [0, 1]. Returns logits B x N_c x H x W and activations."""

    @property
    def dtype(self) -> torch.dtype:
        return torch.float32

    def check_layers(self, names: Collection[str]) -> None:
        missing = [n for n in names if n not in self.layer_names]
        if missing:
            raise LayerNotFound(f"unknown layer(s) {missing}; model has {list(self.layer_names)}")


def _init_conv(conv: nn.Conv2d, gen: torch.Generator) -> None:
    fan_in = conv.in_channels * conv.kernel_size[0] * conv.kernel_size[1]
    bound = np.sqrt(6.0 / fan_in)
    with torch.no_grad():
        conv.weight.copy_((torch.rand(conv.weight.shape, generator=gen, dtype=torch.float64) * 2 - 1) * bound)
        conv.bias.copy_((torch.rand(conv.bias.shape, generator=gen, dtype=torch.float64) * 2 - 1) * 0.1)


class ToyNet(nn.Module, SegModel):
    """Two-branch network with a genuine fusion point.

    A full-resolution branch and a 2x-downsampled branch (two 3x3 convs each,
    SiLU; the second low-res conv is dilated) are summed at ``fuse``.  With
    ``normalize`` the fused map is instance-normalized (per channel, over the
    image) before the 1x1 classifier, which couples every output pixel to
    image-wide statistics.
    """

    fusion_layer_id = "fuse"

    def __init__(self, in_channels: int = 3, width: int = 8, num_classes: int = 4,
                 seed: int = 0, normalize: bool = True, lo_dilation: tuple[int, int] = (1, 2),
                 dtype: torch.dtype = torch.float32):
        super().__init__()
        self.in_channels = in_channels
        self.num_classes = num_classes
        self.seed = seed
        self.normalize = normalize
        d1, d2 = lo_dilation
        self.hi1 = nn.Conv2d(in_channels, width, 3, padding=1, padding_mode="replicate")
        self.hi2 = nn.Conv2d(width, width, 3, padding=1, padding_mode="replicate")
        self.lo1 = nn.Conv2d(in_channels, width, 3, padding=d1, dilation=d1)
        self.lo2 = nn.Conv2d(width, width, 3, padding=d2, dilation=d2)
        self.head = nn.Conv2d(width, num_classes, 1)
        gen = torch.Generator().manual_seed(seed)
        for conv in (self.hi1, self.hi2, self.lo1, self.lo2, self.head):
            _init_conv(conv, gen)
        self.to(dtype)
        self.requires_grad_(False)
        self.eval()

    @property
    def layer_names(self) -> tuple[str, ...]:
        return ("hi1", "hi2", "lo1", "lo2", "fuse", "norm", "logits")

    @property
    def readout_layer(self) -> str:
        return "norm"

    @property
    def dtype(self) -> torch.dtype:
        return self.head.weight.dtype

    def run(self, x, record=()):
        self.check_layers(record)
        acts = {}

        def keep(name, t):
            if name in record:
                acts[name] = t
            return t

        h, w = x.shape[-2:]
        hi = keep("hi1", F.silu(self.hi1(x)))
        hi = keep("hi2", F.silu(self.hi2(hi)))
        lo = F.avg_pool2d(x, 2, ceil_mode=True)
        lo = keep("lo1", F.silu(self.lo1(lo)))
        lo = keep("lo2", F.silu(self.lo2(lo)))
        lo = F.interpolate(lo, size=(h, w), mode="bilinear", align_corners=False)
        fused = keep("fuse", hi + lo)
        z = keep("norm", F.instance_norm(fused) if self.normalize else fused)
        logits = keep("logits", self.head(z))
        return logits, acts

    def forward(self, x):
        return self.run(x)[0]


class LinearSegModel(nn.Module, SegModel):
    """Per-pixel affine classifier ``logits = W @ pixel + b`` (a 1x1 conv)."""

    fusion_layer_id = "logits"

    def __init__(self, weight, bias, dtype: torch.dtype = torch.float64):
        super().__init__()
        weight = torch.as_tensor(np.asarray(weight), dtype=dtype)
        bias = torch.as_tensor(np.asarray(bias), dtype=dtype)
        self.num_classes, self.in_channels = weight.shape
        self.conv = nn.Conv2d(self.in_channels, self.num_classes, 1).to(dtype)
        with torch.no_grad():
            self.conv.weight.copy_(weight[:, :, None, None])
            self.conv.bias.copy_(bias)
        self.requires_grad_(False)

    @property
    def layer_names(self):
        return ("logits",)

    @property
    def dtype(self):
        return self.conv.weight.dtype

    def run(self, x, record=()):
        self.check_layers(record)
        out = self.conv(x)
        return out, ({"logits": out} if "logits" in record else {})

    def forward(self, x):
        return self.conv(x)


class TorchSegAdapter(SegModel):
    """Wrap an external ``nn.Module`` so it satisfies :class:`SegModel`.

    ``layers`` maps public layer names to dotted submodule paths; activations
    are captured with forward hooks.  Outputs smaller than the input are
    bilinearly resized, and ``mean``/``std`` (per channel) normalize the
    [0, 1] input the way the wrapped network expects.
    """

    def __init__(self, module: nn.Module, num_classes: int, fusion_layer_id: str,
                 layers: Mapping[str, str], in_channels: int = 3,
                 mean=None, std=None, output_key: str | None = None):
        self.module = module.eval()
        self.module.requires_grad_(False)
        self.num_classes = num_classes
        self.in_channels = in_channels
        self.fusion_layer_id = fusion_layer_id
        self._paths = dict(layers)
        if fusion_layer_id not in self._paths:
            raise LayerNotFound(f"fusion layer {fusion_layer_id!r} is not among the declared layers")
        submodules = dict(module.named_modules())
        for name, path in self._paths.items():
            if path not in submodules:
                raise LayerNotFound(f"layer {name!r}: no submodule {path!r}")
        self._submodules = {name: submodules[path] for name, path in self._paths.items()}
        self.mean = None if mean is None else torch.as_tensor(mean).view(1, -1, 1, 1)
        self.std = None if std is None else torch.as_tensor(std).view(1, -1, 1, 1)
        self.output_key = output_key

    @property
    def layer_names(self):
        return tuple(self._paths)

    @property
    def dtype(self):
        return next(self.module.parameters()).dtype

    def run(self, x, record=()):
        self.check_layers(record)
        acts = {}
        handles = []
        for name in record:
            def hook(_m, _inp, out, name=name):
                acts[name] = out[0] if isinstance(out, (tuple, list)) else out
            handles.append(self._submodules[name].register_forward_hook(hook))
        try:
            z = x
            if self.mean is not None:
                z = (z - self.mean.to(z)) / self.std.to(z)
            out = self.module(z)
        finally:
            for h in handles:
                h.remove()
        if isinstance(out, Mapping):
            out = out[self.output_key or "out"]
        elif isinstance(out, (tuple, list)):
            out = out[0]
        if out.shape[-2:] != x.shape[-2:]:
            out = F.interpolate(out, size=x.shape[-2:], mode="bilinear", align_corners=False)
        return out, acts


def _softmax_readout(X: np.ndarray, y: np.ndarray, num_classes: int, l2: float) -> np.ndarray:
    """Multinomial logistic regression; returns a (D + 1) x N_c coefficient matrix."""
    from scipy.optimize import minimize

    Xa = np.hstack([X, np.ones((len(X), 1))])
    Y = np.eye(num_classes)[y]
    n, d = Xa.shape
    penal = np.ones((d, 1))
    penal[-1] = 0.0

    def objective(w):
        W = w.reshape(d, num_classes)
        z = Xa @ W
        z -= z.max(axis=1, keepdims=True)
        lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
        logp = z - lse
        loss = -np.mean(np.sum(Y * logp, axis=1)) + l2 * np.sum(penal * W * W)
        grad = Xa.T @ (np.exp(logp) - Y) / n + 2 * l2 * penal * W
        return loss, grad.ravel()

    res = minimize(objective, np.zeros(d * num_classes), jac=True, method="L-BFGS-B",
                   options={"maxiter": 1000})
    return res.x.reshape(d, num_classes)


def fit_readout(model: ToyNet, images, labels, l2: float = 1e-6,
                ignore_value: int = IGNORE_INDEX) -> ToyNet:
    """Fit the 1x1 classifier of ``model`` by convex logistic regression (in place).

    Only the readout changes; the seeded convolutional trunk is untouched, so
    the result stays a deterministic function of the seed and the data.
    """
    feats, targets = [], []
    for img, lab in zip(images, labels):
        x = to_batch(img, model)
        with torch.no_grad():
            _, acts = model.run(x, record=(model.readout_layer,))
        a = acts[model.readout_layer][0]
        f = a.reshape(a.shape[0], -1).T.double().numpy()
        lab = np.asarray(lab).reshape(-1)
        keep = lab != ignore_value
        feats.append(f[keep])
        targets.append(lab[keep])
    coef = _softmax_readout(np.concatenate(feats), np.concatenate(targets), model.num_classes, l2)
    with torch.no_grad():
        model.head.weight.copy_(torch.as_tensor(coef[:-1].T[:, :, None, None], dtype=model.dtype))
        model.head.bias.copy_(torch.as_tensor(coef[-1], dtype=model.dtype))
    return model


@functools.lru_cache(maxsize=8)
def _pretrained_state(seed: int, num_images: int, size: tuple[int, int], dtype: torch.dtype):
    from .scenes import generate_synthetic_scene

    model = ToyNet(seed=seed, dtype=dtype)
    data = generate_synthetic_scene(seed=10_000 + seed, count=num_images, size=size)
    fit_readout(model, [s.image for s in data], [s.labels for s in data])
    return {k: v.clone() for k, v in model.state_dict().items()}


def pretrained_toynet(seed: int = 0, num_images: int = 32, size=(64, 128),
                      dtype: torch.dtype = torch.float32) -> ToyNet:
    """ToyNet with its readout fitted on seeded synthetic scenes.

    Deterministic in ``seed``; the scenes come from a stream disjoint from the
    generator seeds used for attack datasets.  Fits are cached per process and
    every call returns a fresh module.
    """
    model = ToyNet(seed=seed, dtype=dtype)
    model.load_state_dict(_pretrained_state(seed, num_images, tuple(size), dtype))
    return model


def load_model(spec: str) -> SegModel:
    """Resolve a model spec: ``toynet[:seed]``, ``toynet-raw[:seed]``, or ``pkg.module:factory``."""
    name, _, arg = spec.partition(":")
    if name == "toynet":
        return pretrained_toynet(seed=int(arg or 0))
    if name == "toynet-raw":
        return ToyNet(seed=int(arg or 0))
    if not arg:
        raise ValidationError(f"model spec {spec!r}: expected 'toynet[:seed]' or 'module:factory'")
    factory = getattr(importlib.import_module(name), arg)
    model = factory()
    if not isinstance(model, SegModel):
        raise ValidationError(f"{spec} did not return a SegModel")
    return model


def to_batch(image, model: SegModel | None = None) -> torch.Tensor:
    """Channels-last image (Image, ndarray or tensor) -> 1 x C x H x W tensor."""
    if isinstance(image, Image):
        image = image.data
    t = image if isinstance(image, torch.Tensor) else torch.tensor(np.asarray(image))
    if t.ndim == 2:
        t = t[..., None]
    if model is not None:
        if t.shape[-1] != model.in_channels:
            raise ChannelMismatch(f"model expects {model.in_channels} channels, image has {t.shape[-1]}")
        t = t.to(model.dtype)
    return t.permute(2, 0, 1)[None]


def forward(model: SegModel, image, layers: Collection[str] = ()):
    """Run one image. Returns ((H*W) x N_c logits, {layer: C_l x H_l x W_l})."""
    x = to_batch(image, model)
    logits, acts = model.run(x, record=tuple(layers))
    flat = logits[0].reshape(model.num_classes, -1).T
    return flat, {k: v[0] for k, v in acts.items()}


def predict_ss(logits, shape=None, num_classes: int | None = None):
    """Per-pixel argmax; ties go to the lowest class index.

    With ``shape=(H, W)`` a :class:`LabelMap` is returned, otherwise a flat
    integer array.
    """
    z = logits.detach().cpu().numpy() if isinstance(logits, torch.Tensor) else np.asarray(logits)
    z = np.atleast_2d(z)
    pred = np.argmax(z, axis=1)
    if shape is None:
        return pred
    return LabelMap(pred.reshape(shape), num_classes or z.shape[1], ignore_value=None)


def input_gradient(model: SegModel, image, scalar_fn: Callable[[torch.Tensor], torch.Tensor]) -> np.ndarray:
    """Gradient of ``scalar_fn(forward(model, image)[0])`` w.r.t. the pixels, H x W x C."""
    if isinstance(image, Image):
        image = image.data
    x = torch.as_tensor(np.asarray(image) if not isinstance(image, torch.Tensor) else image)
    x = x.detach().to(model.dtype).clone().requires_grad_(True)
    logits, _ = forward(model, x)
    out = scalar_fn(logits)
    if not isinstance(out, torch.Tensor) or not out.requires_grad:
        return np.zeros(tuple(x.shape), dtype=np.float64)
    (g,) = torch.autograd.grad(out, x, allow_unused=True)
    if g is None:
        return np.zeros(tuple(x.shape), dtype=np.float64)
    g = g.detach().double().numpy()
    if not np.all(np.isfinite(g)):
        raise NonFiniteGradient("input gradient contains non-finite values")
    return g
