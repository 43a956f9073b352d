"""Seeded synthetic attribute corpus, PPM+CSV dataset I/O and augmentation.

Each attribute owns a canonical region of a 64x48 "pedestrian" frame and a
hue family; a present attribute draws one glyph (random shape, size and hue
within its family) at its region's centre plus positional jitter.  Regions
marked ``mirrored`` exist on both sides of the vertical axis and the glyph
lands on one side at random, so every region layout is left/right symmetric
and horizontal flipping never moves an attribute out of its region.

Distractor clutter reuses attribute appearances but is never placed where it
could overlap the region of the attribute it imitates, so the ground truth
is always recoverable from pixels: the right hue inside the right region.
A vertical luminance ramp in the background gives every location a local
height cue.
"""

from __future__ import annotations

import colorsys
import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .loss import AttributeStats

SPLITS = {"train": 0, "val": 1, "test": 2}
SPLIT_STRIDE = 10_000_000
SHAPES = ("rect", "disc", "triangle", "diamond", "ring", "cross")


@dataclass(frozen=True)
class AttributeRegion:
    name: str
    center: tuple  # (row, col) as fractions of the frame
    hue: float
    positive_rate: float
    mirrored: bool = False

    def centers(self, height, width):
        cy, cx = self.center[0] * height, self.center[1] * width
        if self.mirrored:
            return [(cy, cx), (cy, width - cx)]
        return [(cy, cx)]


DEFAULT_ROSTER = (
    AttributeRegion("hat", (0.11, 0.5), 0 / 8, 0.30),
    AttributeRegion("collar", (0.37, 0.5), 1 / 8, 0.40),
    AttributeRegion("belt", (0.62, 0.5), 2 / 8, 0.25),
    AttributeRegion("skirt", (0.87, 0.5), 3 / 8, 0.35),
    AttributeRegion("earrings", (0.11, 0.15), 4 / 8, 0.20, mirrored=True),
    AttributeRegion("sleeve", (0.37, 0.15), 5 / 8, 0.45, mirrored=True),
    AttributeRegion("bag", (0.62, 0.15), 6 / 8, 0.30, mirrored=True),
    AttributeRegion("boots", (0.87, 0.15), 7 / 8, 0.40, mirrored=True),
)


@dataclass(frozen=True)
class SyntheticSpec:
    height: int = 64
    width: int = 48
    attributes: tuple = DEFAULT_ROSTER
    glyph_size: tuple = (6, 10)
    hue_jitter: float = 0.025
    shapes: tuple = SHAPES
    jitter: int = 2
    clutter_density: float = 1.5
    background_noise: float = 0.04
    label_noise: float = 0.1
    seed: int = 0
    overlap_tolerance: float = 0.0

    @property
    def num_attributes(self):
        return len(self.attributes)

    @property
    def attribute_names(self):
        return [a.name for a in self.attributes]

    def region_boxes(self, index):
        """Pixel boxes (top, left, bottom, right) that can hold attribute ``index``'s glyph."""
        reach = self.jitter + self.glyph_size[1] / 2
        a = self.attributes[index]
        return [(cy - reach, cx - reach, cy + reach, cx + reach)
                for cy, cx in a.centers(self.height, self.width)]

    def validate(self):
        if not 0.0 <= self.label_noise < 0.5:
            raise ValueError(f"label_noise must lie in [0, 0.5), got {self.label_noise}")
        lo, hi = self.glyph_size
        if not 1 <= lo <= hi:
            raise ValueError(f"bad glyph size range {self.glyph_size}")
        for a in self.attributes:
            if not 0.0 <= a.positive_rate <= 1.0:
                raise ValueError(f"{a.name}: positive_rate outside [0, 1]")
            for cy, cx in a.centers(self.height, self.width):
                if not (0 <= cy < self.height and 0 <= cx < self.width):
                    raise ValueError(f"{a.name}: canonical region outside the image")
        boxes = [(i, b) for i in range(self.num_attributes) for b in self.region_boxes(i)]
        for n, (i, b1) in enumerate(boxes):
            for j, b2 in boxes[n + 1:]:
                if i == j:
                    continue
                inter = (max(0.0, min(b1[2], b2[2]) - max(b1[0], b2[0]))
                         * max(0.0, min(b1[3], b2[3]) - max(b1[1], b2[1])))
                area = (b1[2] - b1[0]) * (b1[3] - b1[1])
                if inter / area > self.overlap_tolerance:
                    raise ValueError(
                        f"infeasible spec: regions of {self.attributes[i].name!r} and "
                        f"{self.attributes[j].name!r} overlap ({inter / area:.2%} of area)")
        return self

    def to_dict(self):
        d = asdict(self)
        d["attributes"] = [asdict(a) for a in self.attributes]
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "attributes" in d:
            d["attributes"] = tuple(
                AttributeRegion(**{**a, "center": tuple(a["center"])}) for a in d["attributes"])
        for key in ("glyph_size", "shapes"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


@dataclass
class Dataset:
    images: np.ndarray  # (n, 3, h, w) uint8
    labels: np.ndarray  # (n, M) int8, possibly noisy
    clean_labels: np.ndarray
    attribute_names: list
    filenames: list = field(default_factory=list)
    split: str = "train"

    def __len__(self):
        return len(self.images)

    @property
    def num_attributes(self):
        return self.labels.shape[1]

    def float_images(self, idx=slice(None)):
        return self.images[idx].astype(np.float32) / np.float32(255.0)

    def subset(self, idx):
        idx = np.asarray(idx)
        return Dataset(self.images[idx], self.labels[idx], self.clean_labels[idx],
                       list(self.attribute_names), [self.filenames[i] for i in idx], self.split)


# -- rendering -----------------------------------------------------------------

def _glyph_mask(shape, size, cy, cx, height, width):
    half = size / 2.0
    top, bottom = max(0, int(np.floor(cy - half))), min(height, int(np.ceil(cy + half)) + 1)
    left, right = max(0, int(np.floor(cx - half))), min(width, int(np.ceil(cx + half)) + 1)
    ys = (np.arange(top, bottom) + 0.5 - cy) / half
    xs = (np.arange(left, right) + 0.5 - cx) / half
    v, u = np.meshgrid(ys, xs, indexing="ij")
    if shape == "rect":
        m = (np.abs(u) <= 1) & (np.abs(v) <= 0.75)
    elif shape == "disc":
        m = u * u + v * v <= 1
    elif shape == "triangle":
        m = (v <= 1) & (v >= -1) & (np.abs(u) <= (v + 1) / 2)
    elif shape == "diamond":
        m = np.abs(u) + np.abs(v) <= 1
    elif shape == "ring":
        r = u * u + v * v
        m = (r <= 1) & (r >= 0.3)
    elif shape == "cross":
        m = ((np.abs(u) <= 0.35) & (np.abs(v) <= 1)) | ((np.abs(v) <= 0.35) & (np.abs(u) <= 1))
    else:
        raise ValueError(f"unknown glyph shape {shape!r}")
    return (top, left), m


def _draw(canvas, rng, spec: SyntheticSpec, attr: AttributeRegion, cy, cx):
    shape = spec.shapes[rng.integers(len(spec.shapes))]
    size = rng.uniform(spec.glyph_size[0], spec.glyph_size[1])
    hue = (attr.hue + rng.uniform(-spec.hue_jitter, spec.hue_jitter)) % 1.0
    rgb = colorsys.hsv_to_rgb(hue, rng.uniform(0.75, 1.0), rng.uniform(0.8, 1.0))
    (top, left), m = _glyph_mask(shape, size, cy, cx, spec.height, spec.width)
    h, w = m.shape
    patch = canvas[:, top:top + h, left:left + w]
    for ch in range(3):
        patch[ch][m] = rgb[ch]


def _boxes_intersect(a, b):
    return a[0] < b[2] and b[0] < a[2] and a[1] < b[3] and b[1] < a[3]


def render_sample(spec: SyntheticSpec, labels, rng) -> np.ndarray:
    """Render one (3, h, w) uint8 image for a clean label vector."""
    h, w = spec.height, spec.width
    ramp = np.linspace(0.72, 0.28, h)[:, None]
    tint = rng.uniform(-0.04, 0.04, size=3)
    canvas = np.empty((3, h, w))
    for ch in range(3):
        canvas[ch] = ramp + tint[ch] + rng.normal(0.0, spec.background_noise, (h, w))
    occupied = []
    reach = spec.glyph_size[1] / 2 + 1
    for k, attr in enumerate(spec.attributes):
        if not labels[k]:
            continue
        centers = attr.centers(h, w)
        cy, cx = centers[rng.integers(len(centers))]
        cy += rng.uniform(-spec.jitter, spec.jitter)
        cx += rng.uniform(-spec.jitter, spec.jitter)
        _draw(canvas, rng, spec, attr, cy, cx)
        occupied.append((cy - reach, cx - reach, cy + reach, cx + reach))
    for _ in range(rng.poisson(spec.clutter_density)):
        k = rng.integers(spec.num_attributes)
        forbidden = spec.region_boxes(k)
        for _attempt in range(20):
            cy, cx = rng.uniform(0, h), rng.uniform(0, w)
            box = (cy - reach, cx - reach, cy + reach, cx + reach)
            if not any(_boxes_intersect(box, f) for f in forbidden + occupied):
                _draw(canvas, rng, spec, spec.attributes[k], cy, cx)
                occupied.append(box)
                break
    return np.round(np.clip(canvas, 0.0, 1.0) * 255).astype(np.uint8)


def sample_rng(spec: SyntheticSpec, split: str, index: int, stream: int = 0):
    return np.random.default_rng([spec.seed, SPLITS[split] * SPLIT_STRIDE + index, stream])


def generate(spec: SyntheticSpec, n: int, split: str = "train") -> Dataset:
    """Deterministic dataset; sample ``i`` depends only on ``(spec, split, i)``.

    Label noise (symmetric flips at ``spec.label_noise``) hits the train split only.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if split not in SPLITS:
        raise ValueError(f"unknown split {split!r}")
    spec.validate()
    m = spec.num_attributes
    rates = np.array([a.positive_rate for a in spec.attributes])
    images = np.empty((n, 3, spec.height, spec.width), dtype=np.uint8)
    clean = np.empty((n, m), dtype=np.int8)
    noisy = np.empty((n, m), dtype=np.int8)
    for i in range(n):
        rng = sample_rng(spec, split, i)
        y = (rng.random(m) < rates).astype(np.int8)
        images[i] = render_sample(spec, y, rng)
        clean[i] = y
        if split == "train" and spec.label_noise > 0:
            flips = sample_rng(spec, split, i, stream=1).random(m) < spec.label_noise
            noisy[i] = np.where(flips, 1 - y, y)
        else:
            noisy[i] = y
    names = [f"img_{SPLITS[split] * SPLIT_STRIDE + i:08d}.ppm" for i in range(n)]
    return Dataset(images, noisy, clean, spec.attribute_names, names, split)


# -- PPM + CSV I/O ---------------------------------------------------------------

class DatasetFormatError(ValueError):
    pass


def write_ppm(path, image):
    """Write a (3, h, w) uint8 image as binary P6."""
    _, h, w = image.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(image.transpose(1, 2, 0)).tobytes())


def read_ppm(path) -> np.ndarray:
    blob = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(blob) and blob[pos:pos + 1].isspace():
            pos += 1
        if blob[pos:pos + 1] == b"#":
            while pos < len(blob) and blob[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(blob) and not blob[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise DatasetFormatError(f"{path}: truncated PPM header")
        tokens.append(blob[start:pos])
    if tokens[0] != b"P6":
        raise DatasetFormatError(f"{path}: not a binary PPM (P6)")
    w, h, maxval = (int(t) for t in tokens[1:])
    if maxval != 255:
        raise DatasetFormatError(f"{path}: only 8-bit PPM supported (maxval {maxval})")
    pos += 1
    data = np.frombuffer(blob, dtype=np.uint8, count=h * w * 3, offset=pos) \
        if len(blob) - pos >= h * w * 3 else None
    if data is None:
        raise DatasetFormatError(f"{path}: truncated pixel data")
    return data.reshape(h, w, 3).transpose(2, 0, 1).copy()


def export_dataset(dataset: Dataset, root, spec: SyntheticSpec | None = None):
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    for name, img in zip(dataset.filenames, dataset.images):
        write_ppm(root / "images" / name, img)
    with open(root / "labels.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["filename", *dataset.attribute_names])
        for name, row in zip(dataset.filenames, dataset.labels):
            writer.writerow([name, *(int(v) for v in row)])
    if spec is not None:
        (root / "spec.json").write_text(json.dumps(spec.to_dict(), indent=2, sort_keys=True) + "\n")
    return root


def load_dataset(root, split: str = "train") -> Dataset:
    """Load ``root/labels.csv`` and ``root/images/*.ppm``; errors name file and line."""
    root = Path(root)
    csv_path = root / "labels.csv"
    if not csv_path.is_file():
        raise DatasetFormatError(f"{csv_path}: missing labels file")
    with open(csv_path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or len(rows[0]) < 2 or rows[0][0] != "filename":
        raise DatasetFormatError(f"{csv_path}:1: header must be 'filename,<attr>,...'")
    names = rows[0][1:]
    files, labels, images = [], [], []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != len(names) + 1:
            raise DatasetFormatError(
                f"{csv_path}:{lineno}: expected {len(names) + 1} fields, got {len(row)}")
        vals = []
        for col, cell in zip(names, row[1:]):
            if cell.strip() not in ("0", "1"):
                raise DatasetFormatError(
                    f"{csv_path}:{lineno}: non-binary label {cell!r} in column {col!r}")
            vals.append(int(cell))
        img_path = root / "images" / row[0]
        if not img_path.is_file():
            raise DatasetFormatError(f"{csv_path}:{lineno}: missing image {img_path}")
        images.append(read_ppm(img_path))
        files.append(row[0])
        labels.append(vals)
    if not files:
        raise DatasetFormatError(f"{csv_path}: no samples")
    lab = np.asarray(labels, dtype=np.int8)
    return Dataset(np.stack(images), lab, lab.copy(), names, files, split)


def load_spec(root) -> SyntheticSpec | None:
    path = Path(root) / "spec.json"
    if not path.is_file():
        return None
    return SyntheticSpec.from_dict(json.loads(path.read_text()))


# -- augmentation and batching ---------------------------------------------------

@dataclass(frozen=True)
class AugmentationConfig:
    flip_prob: float = 0.5
    pad: int = 4
    enabled: bool = True


def augment(image, cfg: AugmentationConfig, rng, flip=None, offset=None):
    """Random horizontal flip, zero padding and random crop back to size."""
    c, h, w = image.shape
    if flip is None:
        flip = rng.random() < cfg.flip_prob
    if offset is None:
        offset = tuple(rng.integers(0, 2 * cfg.pad + 1, size=2))
    out = image[:, :, ::-1] if flip else image
    p = cfg.pad
    padded = np.zeros((c, h + 2 * p, w + 2 * p), dtype=image.dtype)
    padded[:, p:p + h, p:p + w] = out
    oy, ox = offset
    return np.ascontiguousarray(padded[:, oy:oy + h, ox:ox + w])


def augment_batch(images, cfg: AugmentationConfig, rng):
    flips = rng.random(len(images)) < cfg.flip_prob
    offsets = rng.integers(0, 2 * cfg.pad + 1, size=(len(images), 2))
    return np.stack([augment(img, cfg, rng, bool(f), tuple(o))
                     for img, f, o in zip(images, flips, offsets)])


def iterate_batches(dataset: Dataset, batch_size: int, seed: int = 0, epoch: int = 0,
                    shuffle: bool = True, augmentation: AugmentationConfig | None = None):
    """Yield ``(float images, labels, indices)``; order and augmentation depend only
    on ``(seed, epoch, batch index)``."""
    n = len(dataset)
    order = np.random.default_rng([seed, epoch]).permutation(n) if shuffle else np.arange(n)
    for b, start in enumerate(range(0, n, batch_size)):
        idx = order[start:start + batch_size]
        imgs = dataset.float_images(idx)
        if augmentation is not None and augmentation.enabled:
            imgs = augment_batch(imgs, augmentation, np.random.default_rng([seed, epoch, b, 1]))
        yield imgs, dataset.labels[idx], idx


def positive_ratios(labels) -> AttributeStats:
    labels = np.asarray(labels)
    if labels.ndim != 2 or len(labels) == 0:
        raise ValueError("positive_ratios needs a non-empty (n, M) label matrix")
    return AttributeStats(labels.mean(axis=0))
