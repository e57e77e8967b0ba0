"""Two-channel cell image datasets.

Covers preprocessing to the 48x80 working resolution, deterministic
train/test splitting, nearest-neighbor mining of multi-channel composites,
a synthetic rod-shaped-cell generator for desk-scale experiments, and the
on-disk manifest format shared by synthetic and externally ingested data.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError, MiningError, ShapeError, SpecError, SplitError

TARGET_H = 48
TARGET_W = 80

TRAIN = "train"
TEST = "test"


@dataclass(frozen=True)
class Image2C:
    """One cell image: red and green 48x80 channels plus its class label."""

    red: np.ndarray
    green: np.ndarray
    class_label: str = ""

    def channels(self) -> np.ndarray:
        return np.stack([self.red, self.green])


@dataclass(frozen=True)
class ImageMC:
    """A mined multi-channel composite: one red plus one green per class.

    ``source_ids[k]`` records where green slot k came from: ``"self"`` for
    the original image's own green, or ``"<class>:<index>"`` for a mined
    nearest neighbor (index into the source dataset's item list).
    """

    red: np.ndarray
    greens: tuple
    green_classes: tuple
    source_ids: tuple
    class_label: str = ""

    def channels(self) -> np.ndarray:
        return np.stack([self.red, *self.greens])


@dataclass
class Dataset:
    """An ordered collection of images with a train/test partition."""

    items: list
    classes: list
    split_tags: list
    seed: int | None = None

    def __post_init__(self):
        if len(self.items) != len(self.split_tags):
            raise SplitError("split_tags must align with items")

    def __len__(self):
        return len(self.items)

    def indices(self, split=None, class_label=None):
        out = []
        for i, item in enumerate(self.items):
            if split is not None and self.split_tags[i] != split:
                continue
            if class_label is not None and item.class_label != class_label:
                continue
            out.append(i)
        return out

    def subset(self, split=None, class_label=None) -> "Dataset":
        idx = self.indices(split=split, class_label=class_label)
        return Dataset(
            items=[self.items[i] for i in idx],
            classes=list(self.classes),
            split_tags=[self.split_tags[i] for i in idx],
            seed=self.seed,
        )

    def stack(self, split=None, class_label=None) -> np.ndarray:
        """Channel-major float32 array of the selected items."""
        idx = self.indices(split=split, class_label=class_label)
        if not idx:
            return np.zeros((0, 2, TARGET_H, TARGET_W), dtype=np.float32)
        return np.stack([self.items[i].channels() for i in idx]).astype(np.float32)


def _bilinear_resize(arr: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Resize (C, H, W) with half-pixel-center bilinear sampling, edges clamped."""
    in_h, in_w = arr.shape[-2:]
    ys = (np.arange(out_h, dtype=np.float64) + 0.5) * (in_h / out_h) - 0.5
    xs = (np.arange(out_w, dtype=np.float64) + 0.5) * (in_w / out_w) - 0.5
    y0f = np.floor(ys)
    x0f = np.floor(xs)
    wy = (ys - y0f)[:, None]
    wx = (xs - x0f)[None, :]
    y0 = np.clip(y0f.astype(int), 0, in_h - 1)
    y1 = np.clip(y0f.astype(int) + 1, 0, in_h - 1)
    x0 = np.clip(x0f.astype(int), 0, in_w - 1)
    x1 = np.clip(x0f.astype(int) + 1, 0, in_w - 1)
    tl = arr[:, y0[:, None], x0[None, :]]
    tr = arr[:, y0[:, None], x1[None, :]]
    bl = arr[:, y1[:, None], x0[None, :]]
    br = arr[:, y1[:, None], x1[None, :]]
    top = tl * (1.0 - wx) + tr * wx
    bot = bl * (1.0 - wx) + br * wx
    return top * (1.0 - wy) + bot * wy


def _rescale_unit(arr: np.ndarray) -> np.ndarray:
    """Map intensities into [-1, 1]; inputs already in range pass through."""
    lo = float(arr.min())
    hi = float(arr.max())
    if lo >= -1.0 and hi <= 1.0:
        return arr
    if hi == lo:
        return np.clip(arr, -1.0, 1.0)
    return (arr - lo) * (2.0 / (hi - lo)) - 1.0


def center_crop_resize(image, class_label: str = "") -> Image2C:
    """Center-crop a raw 2-channel grid to 3:5 and resize to 48x80.

    The crop keeps the largest centered region with the target aspect ratio,
    then a bilinear resize (half-pixel centers) brings it to 48x80 and the
    intensities are rescaled into [-1, 1].
    """
    arr = np.asarray(image, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[0] != 2:
        raise ShapeError(f"expected a (2, H, W) grid, got shape {arr.shape}")
    if not np.isfinite(arr).all():
        raise DataError("input image contains non-finite pixels")
    h, w = arr.shape[1:]
    if h < 8 or w < 8:
        raise ShapeError(f"input too small: {h}x{w}, need at least 8x8")
    if w * TARGET_H > h * TARGET_W:
        crop_h, crop_w = h, min(w, int(round(h * TARGET_W / TARGET_H)))
    else:
        crop_h, crop_w = min(h, int(round(w * TARGET_H / TARGET_W))), w
    top = (h - crop_h) // 2
    left = (w - crop_w) // 2
    arr = arr[:, top : top + crop_h, left : left + crop_w]
    out = _bilinear_resize(arr, TARGET_H, TARGET_W)
    out = _rescale_unit(out).astype(np.float32)
    return Image2C(red=out[0], green=out[1], class_label=class_label)


def split_train_test(ds: Dataset, test_fraction: float, seed: int) -> Dataset:
    """Stratified split: per class, floor(n * test_fraction) items become test."""
    if not 0.0 < test_fraction < 1.0:
        raise SplitError(f"test_fraction must be in (0, 1), got {test_fraction}")
    rng = np.random.default_rng(seed)
    tags = [TRAIN] * len(ds.items)
    for label in ds.classes:
        idx = [i for i, item in enumerate(ds.items) if item.class_label == label]
        if len(idx) < 2:
            raise SplitError(f"class {label!r} has {len(idx)} item(s); need at least 2")
        n_test = math.floor(len(idx) * test_fraction + 1e-9)
        for j in rng.permutation(len(idx))[:n_test]:
            tags[idx[j]] = TEST
    return Dataset(items=list(ds.items), classes=list(ds.classes), split_tags=tags, seed=seed)


def half_partition_indices(n: int, seed: int):
    """Deterministic 50/50 index partition; the first half takes any odd item."""
    if n < 2:
        raise SplitError(f"need at least 2 items to halve, got {n}")
    perm = np.random.default_rng(seed).permutation(n)
    cut = (n + 1) // 2
    return perm[:cut], perm[cut:]


def split_test_for_c2st(test_set: Dataset, seed: int):
    """Partition a dataset's test items into test-train and test-test halves."""
    idx = test_set.indices(split=TEST)
    first, second = half_partition_indices(len(idx), seed)

    def pick(rows, tag):
        chosen = [idx[r] for r in rows]
        return Dataset(
            items=[test_set.items[i] for i in chosen],
            classes=list(test_set.classes),
            split_tags=[tag] * len(chosen),
            seed=seed,
        )

    return pick(first, TRAIN), pick(second, TEST)


def mine_multichannel(ds: Dataset, classes=None) -> Dataset:
    """Build multi-channel composites by red-channel nearest-neighbor search.

    For each training image of class k the composite keeps its own green in
    slot k; every other slot j takes the green of the class-j training image
    whose red channel is closest in L2. Ties break toward the lowest item
    index. Only training items participate.
    """
    classes = list(classes) if classes is not None else list(ds.classes)
    pools = {}
    for label in classes:
        rows = [(i, ds.items[i]) for i in ds.indices(split=TRAIN, class_label=label)]
        if not rows:
            raise MiningError(f"class {label!r} has no training images")
        pools[label] = rows
    reds = {
        label: np.stack([item.red.ravel() for _, item in rows]).astype(np.float64)
        for label, rows in pools.items()
    }
    out_items = []
    for label in classes:
        for row, (_, item) in enumerate(pools[label]):
            query = reds[label][row]
            greens, sources = [], []
            for other in classes:
                if other == label:
                    greens.append(item.green)
                    sources.append("self")
                    continue
                d2 = ((reds[other] - query) ** 2).sum(axis=1)
                j = int(np.argmin(d2))  # argmin returns the lowest tied index
                src_index, src_item = pools[other][j]
                greens.append(src_item.green)
                sources.append(f"{other}:{src_index}")
            out_items.append(
                ImageMC(
                    red=item.red,
                    greens=tuple(greens),
                    green_classes=tuple(classes),
                    source_ids=tuple(sources),
                    class_label=label,
                )
            )
    return Dataset(
        items=out_items,
        classes=classes,
        split_tags=[TRAIN] * len(out_items),
        seed=ds.seed,
    )


# --- synthetic rod-shaped cells -------------------------------------------

PATTERNS = ("tips", "ring", "dots", "cap")

# Growth stages as a function of cell length: short cells grow at one tip,
# longer ones at both, and the longest form a mid-cell division ring.
MONOPOLAR_MAX_LEN = 48.0
BIPOLAR_MAX_LEN = 66.0

# Gaussian pattern stamps are truncated at this many sigmas so that a
# pattern's support is exactly the stamped region, not the whole cell.
BLOB_CUTOFF_SIGMAS = 2.5


@dataclass(frozen=True)
class ClassRecipe:
    """How one synthetic class paints its green channel."""

    name: str
    pattern: str
    intensity: float = 1.0
    noise: float = 0.05

    def __post_init__(self):
        if self.pattern not in PATTERNS:
            raise SpecError(f"unknown green pattern {self.pattern!r}; choose from {PATTERNS}")
        if not 0.0 < self.intensity <= 1.0:
            raise SpecError("intensity must be in (0, 1]")
        if self.noise < 0.0:
            raise SpecError("noise level must be non-negative")


@dataclass(frozen=True)
class SynthSpec:
    """Deterministic recipe for a synthetic dataset."""

    recipes: tuple
    count: int
    seed: int
    length_range: tuple = (35.0, 75.0)
    width_range: tuple = (16.0, 24.0)

    def __post_init__(self):
        if self.count < 1:
            raise SpecError("count must be >= 1")
        if not self.recipes:
            raise SpecError("need at least one class recipe")
        lo_l, hi_l = self.length_range
        lo_w, hi_w = self.width_range
        if not (8.0 <= lo_l <= hi_l and hi_l <= TARGET_W - 4):
            raise SpecError(f"cell length range {self.length_range} exceeds the {TARGET_W}-wide frame")
        if not (6.0 <= lo_w <= hi_w and hi_w <= TARGET_H - 8):
            raise SpecError(f"cell width range {self.width_range} exceeds the {TARGET_H}-tall frame")
        names = [r.name for r in self.recipes]
        if len(set(names)) != len(names):
            raise SpecError("class recipe names must be unique")


def _truncated_blob(yy, xx, cy, cx, sigma):
    r2 = (yy - cy) ** 2 + (xx - cx) ** 2
    blob = np.exp(-r2 / (2.0 * sigma**2))
    blob[r2 > (BLOB_CUTOFF_SIGMAS * sigma) ** 2] = 0.0
    return blob


def _truncated_band(xx, cx, sigma):
    d2 = (xx - cx) ** 2
    band = np.exp(-d2 / (2.0 * sigma**2))
    band[d2 > (BLOB_CUTOFF_SIGMAS * sigma) ** 2] = 0.0
    return band


def _render_cell(rng, recipe: ClassRecipe, length_range, width_range):
    yy, xx = np.mgrid[0:TARGET_H, 0:TARGET_W].astype(np.float64)
    length = rng.uniform(*length_range)
    width = rng.uniform(*width_range)
    cy = TARGET_H / 2.0 + rng.uniform(-3.0, 3.0)
    cx = TARGET_W / 2.0 + rng.uniform(-1.5, 1.5)
    half_seg = max(length / 2.0 - width / 2.0, 0.0)
    seg_dist = np.hypot(np.maximum(np.abs(xx - cx) - half_seg, 0.0), yy - cy)
    mask = seg_dist <= width / 2.0
    tip_left = (cy, cx - half_seg)
    tip_right = (cy, cx + half_seg)

    # Red marks growth zones; which zones depends on how long the cell is.
    tip_sigma = width / 5.0
    if length < MONOPOLAR_MAX_LEN:
        tip = tip_left if rng.integers(2) == 0 else tip_right
        red = _truncated_blob(yy, xx, *tip, tip_sigma)
    elif length < BIPOLAR_MAX_LEN:
        red = _truncated_blob(yy, xx, *tip_left, tip_sigma) + _truncated_blob(
            yy, xx, *tip_right, tip_sigma
        )
    else:
        red = _truncated_band(xx, cx, 2.5)

    if recipe.pattern == "tips":
        green = _truncated_blob(yy, xx, *tip_left, tip_sigma) + _truncated_blob(
            yy, xx, *tip_right, tip_sigma
        )
    elif recipe.pattern == "ring":
        green = _truncated_band(xx, cx, 3.0)
    elif recipe.pattern == "cap":
        tip = tip_left if rng.integers(2) == 0 else tip_right
        green = _truncated_blob(yy, xx, *tip, width / 4.0)
    else:  # dots
        inside = np.argwhere(mask)
        n_dots = int(rng.integers(4, 9))
        picks = inside[rng.integers(0, len(inside), size=n_dots)]
        green = np.zeros_like(yy)
        for py, px in picks:
            green += _truncated_blob(yy, xx, float(py), float(px), 1.5)

    def finish(pattern, intensity):
        pattern = pattern * mask
        peak = pattern.max()
        if peak > 0:
            pattern = pattern / peak
        channel = -1.0 + 2.0 * np.clip(intensity * pattern, 0.0, 1.0)
        if recipe.noise > 0:
            channel = channel + rng.normal(0.0, recipe.noise, size=channel.shape)
        return np.clip(channel, -1.0, 1.0).astype(np.float32)

    geometry = {"length": length, "width": width, "cy": cy, "cx": cx}
    return finish(red, 1.0), finish(green, recipe.intensity), geometry


def synth_generate(spec: SynthSpec, return_geometry: bool = False):
    """Render ``spec.count`` cells per class; a pure function of the spec."""
    rng = np.random.default_rng(spec.seed)
    items, geometries = [], []
    for recipe in spec.recipes:
        for _ in range(spec.count):
            red, green, geom = _render_cell(rng, recipe, spec.length_range, spec.width_range)
            items.append(Image2C(red=red, green=green, class_label=recipe.name))
            geometries.append(geom)
    classes = [r.name for r in spec.recipes]
    ds = Dataset(items=items, classes=classes, split_tags=[TRAIN] * len(items), seed=spec.seed)
    return (ds, geometries) if return_geometry else ds


def tip_support_region(item_shape, length, width, cy, cx, dilation=2.0):
    """Boolean mask of the two dilated tip disks for a given cell geometry."""
    yy, xx = np.mgrid[0 : item_shape[0], 0 : item_shape[1]].astype(np.float64)
    half_seg = max(length / 2.0 - width / 2.0, 0.0)
    radius = BLOB_CUTOFF_SIGMAS * (width / 5.0) + dilation
    left = (yy - cy) ** 2 + (xx - (cx - half_seg)) ** 2 <= radius**2
    right = (yy - cy) ** 2 + (xx - (cx + half_seg)) ** 2 <= radius**2
    return left | right


# --- on-disk format ---------------------------------------------------------

MANIFEST_NAME = "manifest.json"
DATASET_FORMAT = "starshape-dataset"


def _sha256(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def save_dataset(ds: Dataset, root) -> Path:
    """Write ``ds`` as one raw float32 file per image plus a JSON manifest."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    if not ds.items:
        raise DataError("refusing to save an empty dataset")
    shapes = {item.channels().shape for item in ds.items}
    if len(shapes) != 1:
        raise ShapeError(f"dataset mixes image shapes: {sorted(shapes)}")
    shape = shapes.pop()
    multichannel = isinstance(ds.items[0], ImageMC)
    items_meta = []
    for i, item in enumerate(ds.items):
        arr = np.ascontiguousarray(item.channels(), dtype="<f4")
        rel = f"{item.class_label}/{i:06d}.raw"
        path = root / rel
        path.parent.mkdir(parents=True, exist_ok=True)
        raw = arr.tobytes()
        path.write_bytes(raw)
        meta = {
            "file": rel,
            "class": item.class_label,
            "split": ds.split_tags[i],
            "sha256": _sha256(raw),
        }
        if multichannel:
            meta["source_ids"] = list(item.source_ids)
        items_meta.append(meta)
    manifest = {
        "format": DATASET_FORMAT,
        "version": 1,
        "classes": list(ds.classes),
        "counts": {label: sum(1 for it in ds.items if it.class_label == label) for label in ds.classes},
        "image_shape": list(shape),
        "dtype": "<f4",
        "layout": "channel-major",
        "normalization": "[-1,1]",
        "seed": ds.seed,
        "items": items_meta,
    }
    if multichannel:
        manifest["green_classes"] = list(ds.items[0].green_classes)
    (root / MANIFEST_NAME).write_text(json.dumps(manifest, indent=2))
    return root / MANIFEST_NAME


def load_dataset(root, verify_checksums: bool = True) -> Dataset:
    """Load a dataset directory written by :func:`save_dataset`."""
    root = Path(root)
    manifest_path = root / MANIFEST_NAME
    if not manifest_path.is_file():
        raise DataError(f"no {MANIFEST_NAME} under {root}")
    manifest = json.loads(manifest_path.read_text())
    if manifest.get("format") != DATASET_FORMAT:
        raise DataError(f"{manifest_path} is not a {DATASET_FORMAT} manifest")
    shape = tuple(manifest["image_shape"])
    green_classes = manifest.get("green_classes")
    items, tags = [], []
    for meta in manifest["items"]:
        raw = (root / meta["file"]).read_bytes()
        if verify_checksums and _sha256(raw) != meta["sha256"]:
            raise DataError(f"checksum mismatch for {meta['file']}")
        arr = np.frombuffer(raw, dtype="<f4").reshape(shape).copy()
        if green_classes is None:
            items.append(Image2C(red=arr[0], green=arr[1], class_label=meta["class"]))
        else:
            items.append(
                ImageMC(
                    red=arr[0],
                    greens=tuple(arr[1:]),
                    green_classes=tuple(green_classes),
                    source_ids=tuple(meta.get("source_ids", ())),
                    class_label=meta["class"],
                )
            )
        tags.append(meta["split"])
    return Dataset(items=items, classes=list(manifest["classes"]), split_tags=tags, seed=manifest.get("seed"))
