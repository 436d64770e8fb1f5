"""Synthetic confounded image classification task.

Each class is a procedurally drawn glyph (disk, frame, plus, triangle,
diamond) with a class-specific base color, jittered per image, on a noisy
gray background. A subset of classes is "confounded": every TRAIN image of
such a class also carries a small square in a fixed saturated color, at a
random position that never overlaps the glyph. Test images never contain
squares, so a model that keys on them collapses at test time.

All pixel values live on the uint8/255 grid, which makes PNG round-trips
exact and lets tests scan for confounder colors by equality.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

__all__ = [
    "GenerationError",
    "FormatError",
    "ImageExample",
    "DatasetSpec",
    "Dataset",
    "generate",
    "context_swap",
    "save_dataset",
    "load_dataset",
]

FORMAT_VERSION = 1

GLYPH_BASE_COLORS = (
    (60, 90, 205),    # disk: blue
    (235, 150, 40),   # frame: orange
    (45, 180, 170),   # plus: teal
    (140, 70, 195),   # triangle: purple
    (160, 170, 50),   # diamond: olive
)

DEFAULT_CONFOUNDER_COLORS = (
    (220, 35, 35),    # red
    (40, 205, 60),    # green
    (210, 50, 210),   # magenta
)


class GenerationError(RuntimeError):
    """Raised when a dataset spec is invalid or placement keeps failing."""


class FormatError(RuntimeError):
    """Raised when an on-disk dataset is malformed."""


@dataclass
class ImageExample:
    """One image: pixels in [0,1] on the uint8 grid, a label, and a binary
    relevance mask that is 1 exactly on glyph pixels (never on the square)."""

    id: str
    pixels: np.ndarray  # (h, w, d) float64
    label: int
    mask: np.ndarray | None = None  # (h, w) uint8 in {0, 1}

    def copy(self) -> "ImageExample":
        return ImageExample(self.id, self.pixels.copy(), self.label,
                            None if self.mask is None else self.mask.copy())


@dataclass(frozen=True)
class DatasetSpec:
    v: int = 5
    train_per_class: int = 40
    test_per_class: int = 20
    confounded_classes: tuple[int, ...] = (0, 1, 4)
    confounder_colors: tuple[tuple[int, int, int], ...] = DEFAULT_CONFOUNDER_COLORS
    square_size: int = 6
    width: int = 32
    height: int = 32
    depth: int = 3
    seed: int = 0
    # glyph nuisance parameters; higher jitter makes the square relatively easier
    glyph_sizes: tuple[int, int] = (11, 15)
    glyph_color_jitter: int = 40
    glyph_pixel_noise: int = 10
    bg_range: tuple[int, int] = (105, 150)
    bg_noise: int = 8

    def validate(self) -> None:
        if self.v < 1 or self.depth != 3:
            raise GenerationError("need at least one class and RGB depth 3")
        if len(self.confounder_colors) != len(self.confounded_classes):
            raise GenerationError("one confounder color per confounded class")
        if len(set(self.confounder_colors)) != len(self.confounder_colors):
            raise GenerationError("confounder colors must be pairwise distinct")
        if any(c < 0 or c >= self.v for c in self.confounded_classes):
            raise GenerationError("confounded class id out of range")
        if self.square_size > min(self.width, self.height):
            raise GenerationError("square does not fit inside the image")
        if self.glyph_sizes[1] + 2 > min(self.width, self.height):
            raise GenerationError("glyph does not fit inside the image")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["confounded_classes"] = list(self.confounded_classes)
        d["confounder_colors"] = [list(c) for c in self.confounder_colors]
        d["glyph_sizes"] = list(self.glyph_sizes)
        d["bg_range"] = list(self.bg_range)
        return d

    @staticmethod
    def from_dict(d: dict) -> "DatasetSpec":
        kw = dict(d)
        kw["confounded_classes"] = tuple(kw["confounded_classes"])
        kw["confounder_colors"] = tuple(tuple(c) for c in kw["confounder_colors"])
        kw["glyph_sizes"] = tuple(kw["glyph_sizes"])
        kw["bg_range"] = tuple(kw["bg_range"])
        return DatasetSpec(**kw)


@dataclass
class Dataset:
    spec: DatasetSpec
    train: list[ImageExample] = field(default_factory=list)
    test: list[ImageExample] = field(default_factory=list)
    visualization: list[ImageExample] = field(default_factory=list)

    def split(self, name: str) -> list[ImageExample]:
        if name not in ("train", "test", "visualization"):
            raise KeyError(name)
        return getattr(self, name)


def _glyph_mask(shape_id: int, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    c = (size - 1) / 2.0
    if shape_id == 0:  # disk
        return (xx - c) ** 2 + (yy - c) ** 2 <= (c + 0.3) ** 2
    if shape_id == 1:  # hollow square frame
        t = max(2, size // 5)
        edge = np.minimum(np.minimum(xx, yy), np.minimum(size - 1 - xx, size - 1 - yy))
        return edge < t
    if shape_id == 2:  # plus
        t = size / 6.0
        return (np.abs(xx - c) <= t) | (np.abs(yy - c) <= t)
    if shape_id == 3:  # triangle pointing up
        return np.abs(xx - c) <= yy * (c + 0.3) / (size - 1)
    if shape_id == 4:  # diamond
        return np.abs(xx - c) + np.abs(yy - c) <= c + 0.3
    raise GenerationError(f"no glyph shape for id {shape_id}")


def _quantize(img_int: np.ndarray) -> np.ndarray:
    return np.clip(img_int, 0, 255).astype(np.uint8).astype(np.float64) / 255.0


def _render(spec: DatasetSpec, label: int, rng: np.random.Generator,
            with_confounder: bool) -> tuple[np.ndarray, np.ndarray]:
    h, w = spec.height, spec.width
    lo, hi = spec.bg_range
    base = rng.integers(lo, hi + 1, size=3)
    img = base[None, None, :] + rng.integers(-spec.bg_noise, spec.bg_noise + 1, size=(h, w, 3))

    size = int(rng.integers(spec.glyph_sizes[0], spec.glyph_sizes[1] + 1))
    gmask = _glyph_mask(label % 5, size)
    top = int(rng.integers(1, h - size))
    left = int(rng.integers(1, w - size))
    color = np.array(GLYPH_BASE_COLORS[label % 5], dtype=np.int64)
    color = color + rng.integers(-spec.glyph_color_jitter, spec.glyph_color_jitter + 1, size=3)
    noise = rng.integers(-spec.glyph_pixel_noise, spec.glyph_pixel_noise + 1,
                         size=(size, size, 3))
    region = img[top:top + size, left:left + size]
    region[gmask] = color[None, :] + noise[gmask]

    mask = np.zeros((h, w), dtype=np.uint8)
    mask[top:top + size, left:left + size][gmask] = 1

    if with_confounder and label in spec.confounded_classes:
        color_idx = spec.confounded_classes.index(label)
        sq = spec.square_size
        for _ in range(100):
            sy = int(rng.integers(0, h - sq + 1))
            sx = int(rng.integers(0, w - sq + 1))
            if not mask[sy:sy + sq, sx:sx + sq].any():
                img[sy:sy + sq, sx:sx + sq] = np.array(spec.confounder_colors[color_idx])
                break
        else:
            raise GenerationError("could not place confounder square off the object after 100 tries")

    return _quantize(img), mask


def generate(spec: DatasetSpec) -> Dataset:
    """Deterministic in spec.seed. Train images of confounded classes carry
    exactly one square; test images never do. The visualization split is a
    copy of train (it exists so prototype projection and display have an
    explicit, augmentation-free source)."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    ds = Dataset(spec=spec)
    for split, count, confound in (("train", spec.train_per_class, True),
                                   ("test", spec.test_per_class, False)):
        for label in range(spec.v):
            for i in range(count):
                pixels, mask = _render(spec, label, rng, with_confounder=confound)
                ds.split(split).append(
                    ImageExample(f"{split}-c{label}-{i:03d}", pixels, label, mask))
    ds.visualization = [
        ImageExample(ex.id.replace("train-", "vis-", 1), ex.pixels.copy(), ex.label,
                     None if ex.mask is None else ex.mask.copy())
        for ex in ds.train
    ]
    return ds


def context_swap(test: list[ImageExample], seed: int) -> list[ImageExample]:
    """Counterfactual split: each object (per its mask) is pasted onto the
    background of an image from a DIFFERENT class; donor-object pixels left
    uncovered are set to random values. Labels follow the object."""
    labels = {ex.label for ex in test}
    if len(labels) < 2:
        raise GenerationError("context_swap needs at least two classes")
    rng = np.random.default_rng(seed)
    out: list[ImageExample] = []
    for ex in test:
        if ex.mask is None:
            raise GenerationError(f"example {ex.id} has no mask to swap with")
        donors = [d for d in test if d.label != ex.label]
        donor = donors[int(rng.integers(0, len(donors)))]
        pixels = donor.pixels.copy()
        uncovered = (donor.mask == 1) & (ex.mask == 0)
        pixels[uncovered] = rng.integers(0, 256, size=(int(uncovered.sum()), 3)) / 255.0
        obj = ex.mask == 1
        pixels[obj] = ex.pixels[obj]
        out.append(ImageExample(f"swap-{ex.id}", pixels, ex.label, ex.mask.copy()))
    return out


# -- on-disk format ---------------------------------------------------------
#
# <root>/manifest.json        spec + split listings + per-file SHA-256
# <root>/images/<id>.png      RGB, 8 bit
# <root>/masks/<id>.png       grayscale, 0 or 255


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _to_png_bytes_rgb(pixels: np.ndarray) -> Image.Image:
    return Image.fromarray(np.round(pixels * 255.0).astype(np.uint8), mode="RGB")


def save_dataset(ds: Dataset, root: str | Path) -> Path:
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    manifest: dict = {"format_version": FORMAT_VERSION, "spec": ds.spec.to_dict(), "splits": {}}
    for split in ("train", "test", "visualization"):
        entries = []
        for ex in ds.split(split):
            img_rel = f"images/{ex.id}.png"
            _to_png_bytes_rgb(ex.pixels).save(root / img_rel)
            entry = {"id": ex.id, "label": ex.label, "image": img_rel,
                     "image_sha256": _sha256(root / img_rel)}
            if ex.mask is not None:
                mask_rel = f"masks/{ex.id}.png"
                Image.fromarray((ex.mask * 255).astype(np.uint8), mode="L").save(root / mask_rel)
                entry["mask"] = mask_rel
                entry["mask_sha256"] = _sha256(root / mask_rel)
            entries.append(entry)
        manifest["splits"][split] = entries
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return root


def _load_png(root: Path, rel: str, want_sha: str, mode: str) -> np.ndarray:
    path = root / rel
    if not path.is_file():
        raise FormatError(f"missing file: {rel}")
    if _sha256(path) != want_sha:
        raise FormatError(f"checksum mismatch for {rel}")
    with Image.open(path) as im:
        if im.mode != mode:
            raise FormatError(f"{rel}: expected mode {mode}, found {im.mode}")
        return np.asarray(im)


def load_dataset(root: str | Path) -> Dataset:
    root = Path(root)
    mf_path = root / "manifest.json"
    if not mf_path.is_file():
        raise FormatError("missing file: manifest.json")
    try:
        manifest = json.loads(mf_path.read_text())
    except json.JSONDecodeError as e:
        raise FormatError(f"manifest.json is not valid JSON: {e}") from e
    try:
        if manifest["format_version"] != FORMAT_VERSION:
            raise FormatError(f"unsupported format_version {manifest['format_version']}")
        spec = DatasetSpec.from_dict(manifest["spec"])
        ds = Dataset(spec=spec)
        for split in ("train", "test", "visualization"):
            for entry in manifest["splits"][split]:
                pixels = _load_png(root, entry["image"], entry["image_sha256"], "RGB")
                mask = None
                if "mask" in entry:
                    raw = _load_png(root, entry["mask"], entry["mask_sha256"], "L")
                    mask = (raw > 0).astype(np.uint8)
                ds.split(split).append(ImageExample(
                    entry["id"], pixels.astype(np.float64) / 255.0, int(entry["label"]), mask))
    except (KeyError, TypeError) as e:
        raise FormatError(f"manifest.json is missing required fields: {e}") from e
    return ds
