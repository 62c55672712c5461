"""Validated containers shared by the whole pipeline.

Arrays are channels-last (H x W x C) and stored read-only, so instances can be
shared freely between threads.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .errors import LabelOutOfRange, ShapeMismatch, ValidationError

IGNORE_INDEX = 255


def _frozen(a, dtype) -> np.ndarray:
    out = np.array(a, dtype=dtype, copy=True)
    out.setflags(write=False)
    return out


def _check_unit_range(data: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(data)):
        raise ValidationError(f"{what} contains non-finite values")
    if data.size and (data.min() < 0.0 or data.max() > 1.0):
        raise ValidationError(f"{what} values must lie in [0, 1]")


@dataclass(frozen=True)
class Image:
    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim == 2:
            data = data[..., None]
        if data.ndim != 3 or min(data.shape) < 1:
            raise ShapeMismatch(f"image must be H x W x C, got shape {data.shape}")
        _check_unit_range(data, "image")
        object.__setattr__(self, "data", _frozen(data, np.float64))

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape


@dataclass(frozen=True)
class LabelMap:
    data: np.ndarray
    num_classes: int
    ignore_value: int | None = IGNORE_INDEX

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 2:
            raise ShapeMismatch(f"label map must be H x W, got shape {data.shape}")
        if not np.issubdtype(data.dtype, np.integer):
            if not np.all(np.equal(np.mod(data, 1), 0)):
                raise ValidationError("label map must contain integers")
        data = data.astype(np.int64)
        if self.num_classes < 1:
            raise ValidationError("num_classes must be >= 1")
        valid = data if self.ignore_value is None else data[data != self.ignore_value]
        if valid.size and (valid.min() < 0 or valid.max() >= self.num_classes):
            bad = valid[(valid < 0) | (valid >= self.num_classes)][0]
            raise LabelOutOfRange(
                f"label value {bad} outside [0, {self.num_classes - 1}]"
            )
        object.__setattr__(self, "data", _frozen(data, np.int64))

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    def valid_mask(self) -> np.ndarray:
        if self.ignore_value is None:
            return np.ones(self.shape, dtype=bool)
        return self.data != self.ignore_value


@dataclass(frozen=True)
class Patch:
    data: np.ndarray
    id: int = 1

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim == 2:
            data = data[..., None]
        if data.ndim != 3 or min(data.shape) < 1:
            raise ShapeMismatch(f"patch must be H x W x C, got shape {data.shape}")
        _check_unit_range(data, "patch")
        object.__setattr__(self, "data", _frozen(data, np.float64))

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape

    def fits(self, height: int, width: int) -> bool:
        return self.shape[0] < height and self.shape[1] < width


@dataclass(frozen=True)
class PatchSet:
    patches: tuple[Patch, ...]

    def __post_init__(self):
        patches = tuple(self.patches)
        if not patches:
            raise ValidationError("a patch set needs at least one patch")
        ids = [p.id for p in patches]
        if ids != list(range(1, len(patches) + 1)):
            raise ValidationError(f"patch ids must be 1..N in order, got {ids}")
        object.__setattr__(self, "patches", patches)

    @classmethod
    def from_arrays(cls, arrays: Iterable[np.ndarray]) -> "PatchSet":
        return cls(tuple(Patch(a, id=k) for k, a in enumerate(arrays, start=1)))

    def __len__(self):
        return len(self.patches)

    def __iter__(self):
        return iter(self.patches)

    def __getitem__(self, i):
        return self.patches[i]

    def arrays(self) -> list[np.ndarray]:
        return [p.data for p in self.patches]


@dataclass(frozen=True)
class PixelSet:
    """Boolean membership mask over an H x W grid."""

    mask: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.mask, dtype=bool)
        if m.ndim != 2:
            raise ShapeMismatch(f"pixel set mask must be 2-D, got shape {m.shape}")
        object.__setattr__(self, "mask", _frozen(m, bool))

    @classmethod
    def full(cls, shape: Sequence[int]) -> "PixelSet":
        return cls(np.ones(tuple(shape), dtype=bool))

    @classmethod
    def empty(cls, shape: Sequence[int]) -> "PixelSet":
        return cls(np.zeros(tuple(shape), dtype=bool))

    @classmethod
    def union_of(cls, sets: Iterable["PixelSet"]) -> "PixelSet":
        sets = list(sets)
        out = np.zeros(sets[0].shape, dtype=bool)
        for s in sets:
            out |= s.mask
        return cls(out)

    @property
    def shape(self):
        return self.mask.shape

    def __len__(self):
        return int(self.mask.sum())

    def _other(self, other: "PixelSet") -> np.ndarray:
        if other.shape != self.shape:
            raise ShapeMismatch(f"pixel sets of shape {self.shape} and {other.shape}")
        return other.mask

    def __or__(self, other):
        return PixelSet(self.mask | self._other(other))

    def __and__(self, other):
        return PixelSet(self.mask & self._other(other))

    def __sub__(self, other):
        return PixelSet(self.mask & ~self._other(other))

    def complement(self) -> "PixelSet":
        return PixelSet(~self.mask)

    def issubset(self, other: "PixelSet") -> bool:
        return bool(np.all(~self.mask | self._other(other)))


@dataclass(frozen=True)
class ClassPalette:
    """Printable colors, one row per color."""

    colors: np.ndarray = field(default_factory=lambda: np.array([[0.0, 0.0, 0.0], [1.0, 1.0, 1.0]]))

    def __post_init__(self):
        c = np.atleast_2d(np.asarray(self.colors, dtype=np.float64))
        if c.ndim != 2 or c.shape[0] == 0 or c.shape[1] == 0:
            raise ValidationError("palette must be a non-empty list of color triplets")
        _check_unit_range(c, "palette")
        object.__setattr__(self, "colors", _frozen(c, np.float64))

    def __len__(self):
        return self.colors.shape[0]


def validate_pair(image, labels, num_classes: int | None = None,
                  ignore_value: int | None = IGNORE_INDEX) -> None:
    """Check that ``labels`` is a consistent ground truth for ``image``.

    ``image`` may be an :class:`Image` or any H x W (x C) array. ``labels`` may
    be a :class:`LabelMap` or a raw integer array, in which case
    ``num_classes`` is required.
    """
    shape = image.shape if isinstance(image, Image) else np.shape(image)
    if isinstance(labels, LabelMap):
        lab_shape = labels.shape
    else:
        lab_shape = np.shape(labels)
    if tuple(shape[:2]) != tuple(lab_shape):
        raise ShapeMismatch(f"image is {tuple(shape[:2])} but labels are {tuple(lab_shape)}")
    if not isinstance(labels, LabelMap):
        if num_classes is None:
            raise ValidationError("num_classes is required for raw label arrays")
        LabelMap(labels, num_classes, ignore_value)
