"""Folder-per-class image corpus: discovery, preprocessing and splitting."""

from __future__ import annotations

import json
import logging
import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import ConfigError, DatasetError, ImageLoadError

logger = logging.getLogger(__name__)

IMAGE_EXTENSIONS = frozenset({".png", ".jpg", ".jpeg", ".bmp"})
DEFAULT_RATIOS = (0.7, 0.2, 0.1)
PARTITIONS = ("train", "val", "test")


@dataclass(frozen=True)
class DatasetIndex:
    """Ordered list of (path, label) pairs discovered under ``root``.

    Entries are grouped by class in lexicographic folder order, and sorted
    by file name within a class.
    """

    root: Path
    entries: tuple[tuple[Path, int], ...]
    class_names: tuple[str, ...]
    counts: tuple[int, ...]
    skipped: tuple[Path, ...] = ()

    def __post_init__(self):
        k = len(self.class_names)
        if len(set(self.class_names)) != k:
            raise DatasetError(f"duplicate class names: {self.class_names}")
        if len(self.counts) != k or sum(self.counts) != len(self.entries):
            raise DatasetError("class counts do not match entries")
        if any(not 0 <= label < k for _, label in self.entries):
            raise DatasetError("entry label out of range")

    def __len__(self):
        return len(self.entries)

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    @property
    def labels(self) -> np.ndarray:
        return np.array([label for _, label in self.entries], dtype=np.int64)

    def relative_path(self, i: int) -> str:
        return self.entries[i][0].relative_to(self.root).as_posix()


@dataclass(frozen=True)
class SplitIndex:
    train: tuple[int, ...]
    val: tuple[int, ...]
    test: tuple[int, ...]
    ratios: tuple[float, float, float]  # (train, test, val)
    seed: int

    def partition(self, name: str) -> tuple[int, ...]:
        if name not in PARTITIONS:
            raise ConfigError(f"unknown partition {name!r}; expected one of {PARTITIONS}")
        return getattr(self, name)

    def sizes(self) -> dict[str, int]:
        return {name: len(self.partition(name)) for name in PARTITIONS}


@dataclass(frozen=True)
class DistributionReport:
    class_names: tuple[str, ...]
    counts: tuple[int, ...]
    percentages: tuple[float, ...] = field(default=())

    @property
    def total(self) -> int:
        return sum(self.counts)

    def to_csv(self) -> str:
        lines = ["class,count,percent"]
        for name, count, pct in zip(self.class_names, self.counts, self.percentages):
            lines.append(f"{name},{count},{pct:.4f}")
        return "\n".join(lines) + "\n"


def _is_readable(path: Path) -> bool:
    try:
        with Image.open(path) as img:
            img.verify()
    except (OSError, UnidentifiedImageError, SyntaxError, ValueError):
        return False
    return True


def scan_dataset(root: str | Path) -> DatasetIndex:
    """Index every image under ``root/<class_name>/``.

    Unreadable files are left out of the index and listed in ``skipped``.
    Raises :class:`DatasetError` if ``root`` is missing or a class folder
    holds no usable image.
    """
    root = Path(root)
    if not root.is_dir():
        raise DatasetError(f"dataset root does not exist or is not a directory: {root}")

    class_dirs = sorted((p for p in root.iterdir() if p.is_dir()), key=lambda p: p.name)
    if not class_dirs:
        raise DatasetError(f"no class folders found under {root}")

    entries = []
    counts = []
    skipped = []
    for label, class_dir in enumerate(class_dirs):
        files = sorted(
            (p for p in class_dir.iterdir()
             if p.is_file() and p.suffix.lower() in IMAGE_EXTENSIONS),
            key=lambda p: p.name,
        )
        n = 0
        for path in files:
            if not _is_readable(path):
                logger.warning("skipping unreadable image %s", path)
                skipped.append(path)
                continue
            entries.append((path, label))
            n += 1
        if n == 0:
            raise DatasetError(f"class folder contains no readable images: {class_dir}")
        counts.append(n)

    return DatasetIndex(
        root=root,
        entries=tuple(entries),
        class_names=tuple(p.name for p in class_dirs),
        counts=tuple(counts),
        skipped=tuple(skipped),
    )


def load_image(path: str | Path, target: int = 224) -> np.ndarray:
    """Decode ``path`` into a ``target x target x 3`` float32 array in [0, 1].

    Grayscale and palette images are expanded to RGB, alpha is dropped.
    Resizing is bilinear and skipped when the image already has the target size.
    """
    path = Path(path)
    try:
        with Image.open(path) as img:
            img.load()
            if img.width == 0 or img.height == 0:
                raise ImageLoadError(path, "zero-dimension image")
            rgb = img.convert("RGB")
    except ImageLoadError:
        raise
    except (OSError, UnidentifiedImageError, SyntaxError, ValueError) as exc:
        raise ImageLoadError(path, exc) from exc

    if rgb.size != (target, target):
        rgb = rgb.resize((target, target), Image.Resampling.BILINEAR)
    return np.asarray(rgb, dtype=np.float32) / np.float32(255.0)


def load_images(paths: Sequence[str | Path], target: int = 224, workers: int = 0) -> np.ndarray:
    """Load several images into an ``N x target x target x 3`` array."""
    if workers and workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            arrays = list(pool.map(lambda p: load_image(p, target), paths))
    else:
        arrays = [load_image(p, target) for p in paths]
    if not arrays:
        return np.zeros((0, target, target, 3), dtype=np.float32)
    return np.stack(arrays)


def save_image(pixels: np.ndarray, path: str | Path) -> None:
    """Write a [0, 1] float image back to disk as 8-bit RGB."""
    arr = np.clip(np.rint(np.asarray(pixels) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path)


def _check_ratios(ratios) -> tuple[float, float, float]:
    if len(ratios) != 3:
        raise ConfigError(f"expected three split ratios (train, test, val), got {ratios!r}")
    ratios = tuple(float(r) for r in ratios)
    if any(not r > 0 for r in ratios):
        raise ConfigError(f"split ratios must be positive: {ratios}")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ConfigError(f"split ratios must sum to 1, got {sum(ratios)!r}")
    return ratios


def allocate(n: int, ratios: Sequence[float]) -> list[int]:
    """Split ``n`` items by ``ratios`` with largest-remainder rounding.

    Leftover items go to the largest fractional quotas; ties go to the
    earlier position in ``ratios``.
    """
    quotas = [r * n for r in ratios]
    # guard against 734.9999999 style float error
    sizes = [math.floor(q + 1e-9) for q in quotas]
    # rounded so 5.6 - 5 and 1.6 - 1 compare as the tie they are
    remainders = [round(max(q - s, 0.0), 9) for q, s in zip(quotas, sizes)]
    spare = n - sum(sizes)
    order = sorted(range(len(ratios)), key=lambda i: (-remainders[i], i))
    for i in order[:spare]:
        sizes[i] += 1
    return sizes


def stratified_split(index: DatasetIndex, ratios=DEFAULT_RATIOS, seed: int = 0) -> SplitIndex:
    """Per-class seeded shuffle, then largest-remainder allocation.

    ``ratios`` is ordered (train, test, val).
    """
    ratios = _check_ratios(ratios)
    labels = index.labels
    train, test, val = [], [], []
    for c, name in enumerate(index.class_names):
        members = np.flatnonzero(labels == c)
        if len(members) < 3:
            warnings.warn(
                f"class {name!r} has only {len(members)} item(s); some partitions will be empty",
                stacklevel=2,
            )
        rng = np.random.default_rng([seed, c])
        members = rng.permutation(members)
        n_train, n_test, n_val = allocate(len(members), ratios)
        train.extend(members[:n_train].tolist())
        test.extend(members[n_train:n_train + n_test].tolist())
        val.extend(members[n_train + n_test:n_train + n_test + n_val].tolist())
    return SplitIndex(
        train=tuple(sorted(train)),
        val=tuple(sorted(val)),
        test=tuple(sorted(test)),
        ratios=ratios,
        seed=seed,
    )


def class_distribution(index: DatasetIndex) -> DistributionReport:
    total = sum(index.counts)
    if total == 0:
        raise DatasetError("cannot compute the class distribution of an empty index")
    return DistributionReport(
        class_names=index.class_names,
        counts=index.counts,
        percentages=tuple(100.0 * c / total for c in index.counts),
    )


def manifest_dict(index: DatasetIndex, split: SplitIndex) -> dict:
    train_r, test_r, val_r = split.ratios
    return {
        "root": str(index.root),
        "class_names": list(index.class_names),
        "seed": split.seed,
        "ratios": {"train": train_r, "test": test_r, "val": val_r},
        **{name: [index.relative_path(i) for i in split.partition(name)] for name in PARTITIONS},
    }


def write_manifest(path: str | Path, index: DatasetIndex, split: SplitIndex) -> Path:
    path = Path(path)
    path.write_text(json.dumps(manifest_dict(index, split), indent=2) + "\n")
    return path


def read_manifest(path: str | Path, root: str | Path | None = None) -> tuple[DatasetIndex, SplitIndex]:
    """Rebuild the index and split recorded in a manifest without re-splitting.

    ``root`` overrides the stored dataset root, for corpora that moved.
    """
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DatasetError(f"cannot read split manifest {path}: {exc}") from exc

    root = Path(root if root is not None else data["root"])
    class_names = tuple(data["class_names"])
    label_of = {name: i for i, name in enumerate(class_names)}

    rel_paths = [(rel, part) for part in PARTITIONS for rel in data[part]]
    try:
        keyed = sorted(
            ((label_of[rel.split("/", 1)[0]], rel.split("/", 1)[1], rel, part) for rel, part in rel_paths),
        )
    except KeyError as exc:
        raise DatasetError(f"manifest path outside the declared classes: {exc}") from exc

    entries = tuple((root / rel, label) for label, _, rel, _ in keyed)
    counts = [0] * len(class_names)
    members = {part: [] for part in PARTITIONS}
    for i, (label, _, _, part) in enumerate(keyed):
        counts[label] += 1
        members[part].append(i)

    index = DatasetIndex(root=root, entries=entries, class_names=class_names, counts=tuple(counts))
    r = data["ratios"]
    split = SplitIndex(
        train=tuple(members["train"]),
        val=tuple(members["val"]),
        test=tuple(members["test"]),
        ratios=(r["train"], r["test"], r["val"]),
        seed=int(data["seed"]),
    )
    return index, split


def write_skip_list(path: str | Path, index: DatasetIndex) -> Path:
    path = Path(path)
    path.write_text("".join(f"{p}\n" for p in index.skipped))
    return path
