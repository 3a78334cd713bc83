"""Dataset ingestion: class-directory trees or manifest files, deterministic
splits, per-class subsampling and the train/eval image transforms.

Two on-disk layouts are supported:

* class-directory: ``root/<class_name>/<image files>``
* manifest-file:   JSON array of ``{"path": ..., "class": ...}`` entries,
  paths relative to the manifest's directory.

Class indices are always assigned lexicographically by class name, and
example enumeration is lexicographic by path, so splits and manifests are
reproducible byte for byte.
"""

from __future__ import annotations

import json
import logging
import math
import random
from dataclasses import dataclass
from pathlib import Path

import torch
from PIL import Image
from torch.utils.data import Dataset
from torchvision import transforms as T

from .errors import ConfigError, InvalidInputError

__all__ = [
    "DatasetSpec",
    "SplitManifest",
    "load_dataset",
    "subsample_per_class",
    "transform_train",
    "transform_eval",
    "ManifestImageDataset",
]

log = logging.getLogger(__name__)

IMAGE_EXTENSIONS = (".png", ".jpg", ".jpeg", ".bmp", ".webp")

# desk-scale defaults; the full-scale protocol uses resize 256 / crop 224
DEFAULT_RESIZE = 40
DEFAULT_CROP = 32


@dataclass(frozen=True)
class DatasetSpec:
    """Where a split lives and how its images become tensors."""

    root: str
    layout: str = "class-directory"
    split: str = "train"
    resize: int = DEFAULT_RESIZE
    crop: int = DEFAULT_CROP
    mean: tuple[float, float, float] = (0.5, 0.5, 0.5)
    std: tuple[float, float, float] = (0.25, 0.25, 0.25)
    hflip: bool = True
    classes: tuple[str, ...] | None = None
    on_unreadable: str = "abort"

    def __post_init__(self) -> None:
        if self.layout not in ("class-directory", "manifest-file"):
            raise ConfigError(f"unknown layout {self.layout!r}")
        if not (self.resize >= self.crop >= 1):
            raise ConfigError("need resize >= crop >= 1")
        if self.on_unreadable not in ("abort", "skip"):
            raise ConfigError("on_unreadable must be 'abort' or 'skip'")

    @property
    def split_root(self) -> Path:
        return Path(self.root) / self.split

    @property
    def image_root(self) -> Path:
        """Base directory manifest paths are relative to."""
        return self.split_root if self.layout == "class-directory" else Path(self.root)


@dataclass
class SplitManifest:
    """Ordered (relative path, class index) list plus its provenance."""

    entries: list[tuple[str, int]]
    classes: list[str]
    seed: int = 0
    rate: float = 1.0

    def __post_init__(self) -> None:
        paths = [p for p, _ in self.entries]
        if len(set(paths)) != len(paths):
            raise InvalidInputError("manifest contains duplicate paths")
        for _, idx in self.entries:
            if not 0 <= idx < len(self.classes):
                raise InvalidInputError(f"class index {idx} outside [0, {len(self.classes)})")

    def per_class_counts(self) -> list[int]:
        counts = [0] * len(self.classes)
        for _, idx in self.entries:
            counts[idx] += 1
        return counts

    def save(self, path: str | Path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        payload = {
            "classes": self.classes,
            "seed": self.seed,
            "rate": self.rate,
            "entries": [{"path": p, "class": c} for p, c in self.entries],
        }
        with open(path, "w") as f:
            json.dump(payload, f, indent=2, sort_keys=True)

    @classmethod
    def load(cls, path: str | Path) -> "SplitManifest":
        with open(path) as f:
            payload = json.load(f)
        return cls(entries=[(e["path"], e["class"]) for e in payload["entries"]],
                   classes=payload["classes"], seed=payload["seed"], rate=payload["rate"])


def _scan_class_directory(root: Path) -> SplitManifest:
    if not root.is_dir():
        raise ConfigError(f"dataset root {root} does not exist")
    class_dirs = sorted(d for d in root.iterdir() if d.is_dir())
    if not class_dirs:
        raise ConfigError(f"no class directories under {root}")
    classes = [d.name for d in class_dirs]
    entries: list[tuple[str, int]] = []
    for idx, d in enumerate(class_dirs):
        files = sorted(p for p in d.iterdir()
                       if p.suffix.lower() in IMAGE_EXTENSIONS)
        if not files:
            raise ConfigError(f"class directory {d} is empty")
        entries.extend((str(p.relative_to(root)), idx) for p in files)
    return SplitManifest(entries=entries, classes=classes)


def load_dataset(spec: DatasetSpec) -> SplitManifest:
    """Enumerate a split into a manifest with dense lexicographic labels."""
    root = spec.split_root
    if spec.layout == "class-directory":
        manifest = _scan_class_directory(root)
    else:
        manifest = SplitManifest.load(root.with_suffix(".json")
                                      if not str(root).endswith(".json") else root)
    if spec.classes is not None and list(spec.classes) != manifest.classes:
        raise ConfigError("dataset classes do not match the configured class list")
    return manifest


def subsample_per_class(manifest: SplitManifest, rate: float, seed: int = 0) -> SplitManifest:
    """Keep ceil(rate * count) examples per class, deterministically.

    Each class is shuffled with its own seed-derived RNG and truncated; the
    surviving entries keep the original lexicographic inter-class order.
    The ceil convention guarantees at least one example per class at any
    positive rate.
    """
    if not 0.0 < rate <= 1.0:
        raise InvalidInputError(f"rate must be in (0, 1], got {rate}")
    by_class: dict[int, list[str]] = {}
    for path, idx in manifest.entries:
        by_class.setdefault(idx, []).append(path)
    keep: set[str] = set()
    for idx, paths in by_class.items():
        rng = random.Random((seed, idx))
        shuffled = paths[:]
        rng.shuffle(shuffled)
        keep.update(shuffled[: math.ceil(rate * len(paths))])
    entries = [(p, c) for p, c in manifest.entries if p in keep]
    return SplitManifest(entries=entries, classes=manifest.classes, seed=seed, rate=rate)


def transform_train(spec: DatasetSpec) -> T.Compose:
    """Resize shorter edge, random crop, optional horizontal flip, standardize."""
    ops = [T.Resize(spec.resize), T.RandomCrop(spec.crop)]
    if spec.hflip:
        ops.append(T.RandomHorizontalFlip())
    ops += [T.ToTensor(), T.Normalize(spec.mean, spec.std)]
    return T.Compose(ops)


def transform_eval(spec: DatasetSpec) -> T.Compose:
    """Deterministic counterpart: resize shorter edge, center crop, standardize."""
    return T.Compose([
        T.Resize(spec.resize), T.CenterCrop(spec.crop),
        T.ToTensor(), T.Normalize(spec.mean, spec.std),
    ])


class ManifestImageDataset(Dataset):
    """Images of one manifest as (tensor, label) pairs."""

    def __init__(self, spec: DatasetSpec, manifest: SplitManifest | None = None,
                 train: bool | None = None):
        self.spec = spec
        self.manifest = manifest if manifest is not None else load_dataset(spec)
        if train is None:
            train = spec.split == "train"
        self.transform = transform_train(spec) if train else transform_eval(spec)
        self._skipped = 0

    @property
    def classes(self) -> list[str]:
        return self.manifest.classes

    @property
    def num_classes(self) -> int:
        return len(self.manifest.classes)

    def __len__(self) -> int:
        return len(self.manifest.entries)

    def __getitem__(self, i: int) -> tuple[torch.Tensor, int]:
        rel, label = self.manifest.entries[i]
        path = self.spec.image_root / rel
        try:
            with Image.open(path) as img:
                img = img.convert("RGB")
        except OSError as exc:
            if self.spec.on_unreadable == "abort":
                raise InvalidInputError(f"unreadable image {path}") from exc
            # skip-with-warning: fall back to the next readable example
            self._skipped += 1
            log.warning("skipping unreadable image %s", path)
            return self[(i + 1) % len(self)]
        return self.transform(img), label
