"""Datasets: image-folder loading, preprocessing recipes, a synthetic SAR-like
generator, stratified K-shot sampling and seeded batching.

Images live in memory as float32 arrays [N, H, W] with values in [0, 1].
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np
from PIL import Image

from .autograd import Tensor
from .errors import ConfigurationError, DataError
from .speckle import GammaNoiseSpec, sample_field

log = logging.getLogger(__name__)

IMAGE_SUFFIXES = (".png", ".pgm")
LUMA = np.array([0.299, 0.587, 0.114])


@dataclass
class Dataset:
    images: np.ndarray  # [N, H, W] float32 in [0, 1]
    labels: np.ndarray  # [N] int64
    class_names: list
    split: str = "train"
    ids: np.ndarray | None = None
    paths: list | None = None

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.ids is None:
            self.ids = np.arange(len(self.labels))
        if self.images.shape[0] != self.labels.shape[0]:
            raise DataError(f"{self.images.shape[0]} images but {self.labels.shape[0]} labels")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= len(self.class_names)):
            raise DataError(f"labels must lie in [0, {len(self.class_names)})")

    def __len__(self):
        return len(self.labels)

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    @property
    def image_shape(self) -> tuple:
        return tuple(self.images.shape[1:])

    def subset(self, index) -> "Dataset":
        index = np.asarray(index, dtype=np.int64)
        paths = None if self.paths is None else [self.paths[i] for i in index]
        return Dataset(self.images[index], self.labels[index], list(self.class_names), self.split,
                       self.ids[index], paths)

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes)

    def content_hashes(self) -> list[str]:
        return [hashlib.sha256(np.ascontiguousarray(img).tobytes()).hexdigest() for img in self.images]


def check_split_hygiene(train: Dataset, test: Dataset) -> set:
    """Return content hashes present in both splits, logging a warning if any."""
    shared = set(train.content_hashes()) & set(test.content_hashes())
    if shared:
        log.warning("%d images appear in both train and test splits", len(shared))
    return shared


# -- preprocessing -------------------------------------------------------------


STEP_NAMES = ("resize", "center_crop", "to_grayscale", "scale_to_unit")


@dataclass(frozen=True)
class PreprocessRecipe:
    steps: tuple = ()

    def __post_init__(self):
        for name, _ in self.steps:
            if name not in STEP_NAMES:
                raise ConfigurationError(f"unknown preprocessing step {name!r}; valid: {STEP_NAMES}")

    def __call__(self, img: np.ndarray) -> np.ndarray:
        out = np.asarray(img, dtype=np.float64)
        for name, arg in self.steps:
            if name == "resize":
                out = resize_bilinear(out, arg, arg)
            elif name == "center_crop":
                out = center_crop(out, arg)
            elif name == "to_grayscale":
                out = to_grayscale(out)
            else:
                out = out / 255.0
        return out

    def describe(self) -> list[str]:
        return [name if arg is None else f"{name}({arg})" for name, arg in self.steps]


RECIPES = {
    "mstar": PreprocessRecipe((("center_crop", 112), ("scale_to_unit", None))),
    "fusar": PreprocessRecipe((("resize", 512), ("scale_to_unit", None))),
    "sar_acd": PreprocessRecipe((("resize", 128), ("center_crop", 112), ("scale_to_unit", None))),
    "synthetic": PreprocessRecipe((("scale_to_unit", None),)),
}


def recipe_for(kind: str) -> PreprocessRecipe:
    try:
        return RECIPES[kind]
    except KeyError:
        raise ConfigurationError(f"unknown dataset kind {kind!r}; valid: {sorted(RECIPES)}") from None


def to_grayscale(img: np.ndarray) -> np.ndarray:
    if img.ndim == 2:
        return img
    return img[..., :3] @ LUMA


def _axis_weights(n_in: int, n_out: int):
    # half-pixel centers: source coordinate of output pixel j is (j + 0.5) * n_in / n_out - 0.5
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0, n_in - 1)
    lo = np.floor(src).astype(np.int64)
    hi = np.minimum(lo + 1, n_in - 1)
    return lo, hi, src - lo


def resize_bilinear(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Separable bilinear resize of a 2-D array with half-pixel centers."""
    lo, hi, f = _axis_weights(img.shape[0], out_h)
    rows = img[lo] * (1 - f)[:, None] + img[hi] * f[:, None]
    lo, hi, f = _axis_weights(img.shape[1], out_w)
    return rows[:, lo] * (1 - f) + rows[:, hi] * f


def center_crop(img: np.ndarray, size: int) -> np.ndarray:
    h, w = img.shape[:2]
    if size > h or size > w:
        raise DataError(f"center crop {size}x{size} larger than image {h}x{w}")
    top, left = (h - size) // 2, (w - size) // 2
    return img[top : top + size, left : left + size]


# -- image folders -------------------------------------------------------------


def read_image(path: Path) -> np.ndarray:
    """Decode an 8-bit grayscale or RGB PNG/PGM into a float64 luminance array (0..255)."""
    try:
        with Image.open(path) as im:
            im.load()
            mode = im.mode
            if mode in ("I", "I;16", "I;16B", "I;16L", "F") or mode.startswith("I;"):
                raise DataError(f"{path}: unsupported {mode} image; only 8-bit grayscale or RGB is accepted")
            if mode == "P":
                im = im.convert("RGB")
                mode = "RGB"
            if mode in ("1", "LA"):
                im = im.convert("L")
                mode = "L"
            if mode not in ("L", "RGB", "RGBA"):
                raise DataError(f"{path}: unsupported image mode {mode}")
            arr = np.asarray(im, dtype=np.float64)
    except DataError:
        raise
    except Exception as exc:  # PIL raises a zoo of types for corrupt files
        raise DataError(f"{path}: unreadable image ({exc})") from exc
    return to_grayscale(arr)


def load_image_folder(root, recipe: PreprocessRecipe, split: str = "train") -> Dataset:
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"dataset root {root} is not a directory")
    class_dirs = sorted(p for p in root.iterdir() if p.is_dir())
    if not class_dirs:
        raise DataError(f"{root} contains no class subdirectories")
    images, labels, paths = [], [], []
    for label, cdir in enumerate(class_dirs):
        files = sorted(p for p in cdir.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
        if not files:
            raise DataError(f"class folder {cdir} contains no PNG/PGM images")
        for f in files:
            images.append(recipe(read_image(f)))
            labels.append(label)
            paths.append(str(f))
    shapes = {im.shape for im in images}
    if len(shapes) > 1:
        raise DataError(f"{root}: images have different sizes after preprocessing {sorted(shapes)}; add a resize step")
    return Dataset(np.stack(images).astype(np.float32), np.array(labels), [d.name for d in class_dirs],
                   split, paths=paths)


def write_image_folder(dataset: Dataset, root) -> None:
    """Write 8-bit PNGs as root/<class>/<id>.png (values are rounded to 8 bits)."""
    root = Path(root)
    for name in dataset.class_names:
        (root / name).mkdir(parents=True, exist_ok=True)
    q = to_uint8(dataset.images)
    for img, label, sid in zip(q, dataset.labels, dataset.ids):
        Image.fromarray(img).save(root / dataset.class_names[label] / f"{int(sid):06d}.png")


def to_uint8(images: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(images) * 255.0), 0, 255).astype(np.uint8)


# -- synthetic generator -------------------------------------------------------


@dataclass
class SyntheticSpec:
    num_classes: int = 4
    train_per_class: int = 200
    test_per_class: int = 100
    size: int = 64
    speckle: GammaNoiseSpec = field(default_factory=lambda: GammaNoiseSpec(8.0, 0.125))
    seed: int = 0
    blobs: int = 4
    gain_range: tuple = (0.1, 1.0)  # log-uniform per-sample brightness

    def __post_init__(self):
        if self.num_classes < 2 or self.train_per_class < 1 or self.test_per_class < 1:
            raise ConfigurationError("synthetic spec needs >= 2 classes and >= 1 image per class per split")
        if self.size < 8:
            raise ConfigurationError(f"synthetic image size must be >= 8, got {self.size}")

    def to_json(self) -> dict:
        d = asdict(self)
        d["gain_range"] = list(self.gain_range)
        return d

    @classmethod
    def from_json(cls, d: dict) -> "SyntheticSpec":
        d = dict(d)
        d["speckle"] = GammaNoiseSpec(**d["speckle"])
        d["gain_range"] = tuple(d["gain_range"])
        return cls(**d)


def class_names_for(num_classes: int) -> list[str]:
    return [f"orient{round(c * 180 / num_classes):03d}" for c in range(num_classes)]


def _synthetic_image(spec: SyntheticSpec, label: int, rng: np.random.Generator, speckle_stream: int,
                     speckle_seed: int) -> np.ndarray:
    n = spec.size
    yy, xx = np.mgrid[0:n, 0:n] / n
    # reflectivity: a floor plus a few Gaussian blobs
    refl = np.full((n, n), 0.25)
    for _ in range(spec.blobs):
        cy, cx = rng.uniform(0.15, 0.85, 2)
        sd = rng.uniform(0.08, 0.2)
        refl += rng.uniform(0.3, 0.7) * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sd * sd))
    theta = label * math.pi / spec.num_classes + rng.normal(0, 0.05)
    freq = rng.uniform(5.0, 7.0)
    phase = rng.uniform(-math.pi / 3, math.pi / 3)
    u = xx * math.cos(theta) + yy * math.sin(theta)
    grating = 0.5 + 0.5 * np.cos(2 * math.pi * freq * u + phase)
    clean = refl * (0.3 + 0.7 * grating)
    lo, hi = spec.gain_range
    clean = clean / clean.max() * math.exp(rng.uniform(math.log(lo), math.log(hi)))
    speckled = clean * sample_field((n, n), spec.speckle.with_seed(speckle_seed), stream=speckle_stream)
    return to_uint8(speckled)


def generate_synthetic(spec: SyntheticSpec) -> tuple[Dataset, Dataset]:
    """Deterministic (train, test) pair; the two splits use disjoint seed streams."""
    names = class_names_for(spec.num_classes)
    out = []
    for split_idx, (split, per_class) in enumerate((("train", spec.train_per_class), ("test", spec.test_per_class))):
        ss = np.random.SeedSequence([spec.seed, split_idx])
        speckle_seed = int(ss.generate_state(1)[0])
        images, labels = [], []
        sid = 0
        for label in range(spec.num_classes):
            for _ in range(per_class):
                rng = np.random.default_rng(np.random.SeedSequence([spec.seed, split_idx, sid]))
                images.append(_synthetic_image(spec, label, rng, sid, speckle_seed))
                labels.append(label)
                sid += 1
        ids = np.arange(sid) + split_idx * 10**6
        # decode exactly as the folder loader would, so disk round-trips are bit-exact
        unit = np.stack([recipe_for("synthetic")(im) for im in images]).astype(np.float32)
        out.append(Dataset(unit, np.array(labels), list(names), split, ids))
    return out[0], out[1]


MANIFEST = "spec.json"


def save_synthetic(spec: SyntheticSpec, root) -> tuple[Dataset, Dataset]:
    root = Path(root)
    train, test = generate_synthetic(spec)
    write_image_folder(train, root / "train")
    write_image_folder(test, root / "test")
    manifest = {
        "generator": "synthetic-gratings",
        "spec": spec.to_json(),
        "counts": {"train": len(train), "test": len(test)},
        "recipe": recipe_for("synthetic").describe(),
    }
    (root / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return train, test


def load_split(root, split: str, kind: str = "synthetic") -> Dataset:
    """Load root/<split> with the named recipe; ids are assigned from sorted paths."""
    ds = load_image_folder(Path(root) / split, recipe_for(kind), split)
    ds.ids = np.arange(len(ds)) + (10**6 if split == "test" else 0)
    return ds


# -- sampling ------------------------------------------------------------------


def kshot_subsample(train: Dataset, k: int, seed: int) -> Dataset:
    """Exactly ``k`` samples per class, drawn without replacement."""
    if k < 1:
        raise DataError(f"K must be >= 1, got {k}")
    rng = np.random.default_rng(seed)
    chosen = []
    for c, name in enumerate(train.class_names):
        idx = np.flatnonzero(train.labels == c)
        if idx.size < k:
            raise DataError(f"class {name!r} has {idx.size} samples, fewer than K={k}")
        chosen.append(np.sort(rng.choice(idx, size=k, replace=False)))
    return train.subset(np.concatenate(chosen))


def batch_iter(dataset: Dataset, batch_size: int, shuffle_seed: int | None = None, drop_last: bool = False,
               with_ids: bool = False) -> Iterator[tuple]:
    """Yield (images [N,1,H,W] Tensor, labels) batches in a seeded order."""
    if batch_size < 1:
        raise ConfigurationError(f"batch size must be >= 1, got {batch_size}")
    n = len(dataset)
    order = np.arange(n) if shuffle_seed is None else np.random.default_rng(shuffle_seed).permutation(n)
    stop = n - n % batch_size if drop_last else n
    for start in range(0, stop, batch_size):
        idx = order[start : start + batch_size]
        images = Tensor(dataset.images[idx][:, None].astype(np.float32))
        labels = dataset.labels[idx]
        yield (images, labels, dataset.ids[idx]) if with_ids else (images, labels)
