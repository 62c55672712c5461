"""Datasets on disk and patch persistence.

Dataset layout::

    root/images/<stem>.png   RGB (or gray) 8-bit
    root/labels/<stem>.png   8-bit single channel class ids (255 = ignore)
    root/poses/<stem>.json   optional, see :mod:`segpatch.placement`

Patch directories hold ``patch_k{N}.png`` (8-bit, ``round(v * 255)`` with
numpy's round-half-to-even) and ``meta.json``.
"""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image as PILImage

from .core import IGNORE_INDEX, Patch, PatchSet
from .errors import CorruptMeta, MissingLabel, SizeMismatch, ValidationError
from .placement import ProjectivePlacement, load_pose_file, save_pose_file

log = logging.getLogger(__name__)

__version__ = "0.1.0"

CLASS_NAMES = ("road", "sky", "building", "object")


@dataclass
class Sample:
    image: np.ndarray                    # H x W x C float in [0, 1]
    labels: np.ndarray                   # H x W int
    placements: tuple[ProjectivePlacement, ...] | None = None
    name: str = ""


@dataclass
class Dataset:
    samples: list[Sample]
    num_classes: int
    split: str = ""
    class_names: tuple[str, ...] = ()

    def __len__(self):
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)

    def __getitem__(self, i):
        return self.samples[i]

    @property
    def images(self) -> list[np.ndarray]:
        return [s.image for s in self.samples]

    @property
    def has_poses(self) -> bool:
        return bool(self.samples) and all(s.placements for s in self.samples)

    def subset(self, idx: Sequence[int], split: str | None = None) -> "Dataset":
        return Dataset([self.samples[i] for i in idx], self.num_classes,
                       self.split if split is None else split, self.class_names)


def read_png(path) -> np.ndarray:
    with PILImage.open(path) as im:
        return np.asarray(im)


def write_png(path, arr: np.ndarray) -> None:
    PILImage.fromarray(arr).save(path)


def to_uint8(values: np.ndarray) -> np.ndarray:
    return np.round(np.clip(values, 0.0, 1.0) * 255.0).astype(np.uint8)


def load_dataset(root, num_classes: int | None = None, split: str = "",
                 ignore_value: int = IGNORE_INDEX) -> Dataset:
    root = Path(root)
    images = sorted((root / "images").glob("*.png"))
    if not images:
        log.warning("no images found under %s", root / "images")
    samples = []
    max_label = -1
    for img_path in images:
        stem = img_path.stem
        lab_path = root / "labels" / f"{stem}.png"
        if not lab_path.exists():
            raise MissingLabel(f"no label for image {stem!r}")
        img = read_png(img_path).astype(np.float64) / 255.0
        if img.ndim == 2:
            img = img[..., None]
        lab = read_png(lab_path)
        if lab.ndim != 2:
            raise ValidationError(f"label {stem!r} must be single-channel")
        if lab.shape != img.shape[:2]:
            raise SizeMismatch(f"{stem!r}: image {img.shape[:2]} vs label {lab.shape}")
        lab = lab.astype(np.int64)
        valid = lab[lab != ignore_value]
        if valid.size:
            max_label = max(max_label, int(valid.max()))
        pose_path = root / "poses" / f"{stem}.json"
        placements = tuple(load_pose_file(pose_path)) if pose_path.exists() else None
        samples.append(Sample(img, lab, placements, stem))
    n = num_classes if num_classes is not None else max_label + 1
    if num_classes is not None and max_label >= num_classes:
        raise ValidationError(f"labels reach class {max_label} but num_classes={num_classes}")
    names = CLASS_NAMES if n == len(CLASS_NAMES) else ()
    return Dataset(samples, max(n, 0), split, names)


def save_dataset(root, dataset: Dataset) -> None:
    root = Path(root)
    for sub in ("images", "labels"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    if dataset.has_poses:
        (root / "poses").mkdir(exist_ok=True)
    for i, s in enumerate(dataset.samples):
        stem = s.name or f"{i:05d}"
        img = to_uint8(s.image)
        write_png(root / "images" / f"{stem}.png", img[..., 0] if img.shape[-1] == 1 else img)
        write_png(root / "labels" / f"{stem}.png", s.labels.astype(np.uint8))
        if s.placements:
            save_pose_file(root / "poses" / f"{stem}.json", s.placements)


@dataclass
class PatchMeta:
    sizes: list[tuple[int, int]]
    num_patches: int
    model_id: str = ""
    placement_mode: str = "eot"
    loss_config: dict = field(default_factory=dict)
    epochs: int = 0
    seed: int = 0
    version: str = __version__

    def to_json(self) -> dict:
        d = asdict(self)
        d["sizes"] = [list(s) for s in self.sizes]
        return d

    @classmethod
    def from_json(cls, d: dict) -> "PatchMeta":
        try:
            d = dict(d)
            d["sizes"] = [tuple(int(v) for v in s) for s in d["sizes"]]
            return cls(**d)
        except (KeyError, TypeError, ValueError) as exc:
            raise CorruptMeta(f"bad patch metadata: {exc}") from exc


def save_patch(directory, patches, meta: PatchMeta | None = None) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    arrays = [np.asarray(p.data if isinstance(p, Patch) else p) for p in patches]
    for k, a in enumerate(arrays, start=1):
        q = to_uint8(a)
        write_png(directory / f"patch_k{k}.png", q[..., 0] if q.shape[-1] == 1 else q)
    if meta is None:
        meta = PatchMeta(sizes=[a.shape[:2] for a in arrays], num_patches=len(arrays))
    (directory / "meta.json").write_text(json.dumps(meta.to_json(), indent=2))


def load_patch(directory) -> tuple[PatchSet, PatchMeta]:
    directory = Path(directory)
    try:
        meta = PatchMeta.from_json(json.loads((directory / "meta.json").read_text()))
    except (OSError, json.JSONDecodeError) as exc:
        raise CorruptMeta(f"cannot read {directory / 'meta.json'}: {exc}") from exc
    arrays = []
    for k in range(1, meta.num_patches + 1):
        a = read_png(directory / f"patch_k{k}.png").astype(np.float64) / 255.0
        arrays.append(a[..., None] if a.ndim == 2 else a)
    if [a.shape[:2] for a in arrays] != [tuple(s) for s in meta.sizes]:
        raise CorruptMeta("patch image sizes disagree with meta.json")
    return PatchSet.from_arrays(arrays), meta
