"""Dataset ingestion: PPM files, CSV manifests, a seeded synthetic generator.

Binary P6 PPM with maxval 255 is the only raster format; it round-trips
bit-exactly in a few lines.  The synthetic generator produces a desk-scale
stand-in for fine-grained data: every class shares the same cluttered
backgrounds and the same large body shape, and only a small glyph somewhere
on the body identifies the class, so getting the label right requires
locating a local part.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass

import numpy as np

from .augment import resize_image
from .errors import DataError, PpmError

MIN_SYNTH_SIZE = 32

# Distinct seed-stream tags so per-class constants, per-sample draws and
# shuffles never collide.
_GLYPH_STREAM = 7919
_SAMPLE_STREAM = 104729
_BATCH_STREAM = 15485863


@dataclass
class Sample:
    image: np.ndarray  # [H, W, 3] float64 in [0, 1]
    label: int
    id: str


@dataclass
class Manifest:
    entries: list          # (relative path, label) pairs
    class_names: list
    image_size: int | None


# ---------------------------------------------------------------------------
# PPM I/O
# ---------------------------------------------------------------------------

def _read_token(stream):
    # PPM header tokens are whitespace separated; '#' starts a comment.
    token = b""
    while True:
        ch = stream.read(1)
        if not ch:
            raise PpmError("truncated PPM header")
        if ch == b"#":
            while ch not in (b"\n", b""):
                ch = stream.read(1)
            continue
        if ch.isspace():
            if token:
                return token
            continue
        token += ch


def load_ppm(path):
    """Read a binary P6 PPM into an [H, W, 3] float64 array scaled to [0, 1]."""
    with open(path, "rb") as f:
        magic = f.read(2)
        if magic != b"P6":
            raise PpmError(
                f"{path}: unsupported magic {magic!r}, only binary P6 is read")
        try:
            width = int(_read_token(f))
            height = int(_read_token(f))
            maxval = int(_read_token(f))
        except ValueError as e:
            raise PpmError(f"{path}: malformed header ({e})") from None
        if maxval != 255:
            raise PpmError(f"{path}: maxval {maxval} unsupported, need 255")
        expected = width * height * 3
        raw = f.read(expected)
        if len(raw) != expected:
            raise PpmError(
                f"{path}: truncated pixel data, {len(raw)} of {expected} bytes")
    pixels = np.frombuffer(raw, dtype=np.uint8).reshape(height, width, 3)
    return pixels.astype(np.float64) / 255.0


def save_ppm(image, path):
    """Write an [H, W, 3] float image in [0, 1]; values round half up."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or image.shape[2] != 3:
        raise PpmError(f"save_ppm needs [H, W, 3], got {image.shape}")
    quantized = np.floor(image * 255.0 + 0.5)
    quantized = np.clip(quantized, 0, 255).astype(np.uint8)
    h, w = image.shape[:2]
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(quantized.tobytes())


# ---------------------------------------------------------------------------
# Synthetic fine-grained dataset
# ---------------------------------------------------------------------------

# RGB-cube corners ordered bright-and-saturated first; the black corner is
# nearly invisible on the body, so it comes last.
_GLYPH_CORNERS = (0b100, 0b010, 0b001, 0b111, 0b110, 0b101, 0b011, 0b000)


def glyph_pattern(seed, label, glyph_size):
    """The class-defining pattern, fixed per (seed, label).

    Each class owns a saturated RGB-cube corner plus a seeded texture; the
    strong color makes the part findable at desk scale while the clutter
    rectangles (random colors, off-body) act as impostors.
    """
    rng = np.random.default_rng([seed, _GLYPH_STREAM, label])
    corner_bits = _GLYPH_CORNERS[label % 8]
    corner = np.array([(corner_bits >> bit) & 1 for bit in range(3)],
                      dtype=np.float64) * 0.9 + 0.05
    if label >= 8:  # recolor beyond the eight corners
        corner = rng.uniform(0.1, 0.9, size=3)
    texture = rng.uniform(-0.1, 0.1, size=(glyph_size, glyph_size, 3))
    return np.clip(corner + texture, 0.0, 1.0)


def _draw_background(rng, size):
    coarse = rng.uniform(0.0, 1.0, size=(4, 4, 3))
    field = resize_image(coarse, size, size)
    field += rng.normal(0.0, 0.05, size=field.shape)
    # Clutter rectangles roughly glyph-sized: plausible impostor parts.
    for _ in range(rng.integers(6, 12)):
        rh = int(rng.integers(size // 12, size // 5))
        rw = int(rng.integers(size // 12, size // 5))
        r = int(rng.integers(0, size - rh))
        c = int(rng.integers(0, size - rw))
        field[r:r + rh, c:c + rw] = rng.uniform(0.0, 1.0, size=3)
    return field


def _draw_body(rng, image, size):
    cy = size / 2 + rng.uniform(-size / 8, size / 8)
    cx = size / 2 + rng.uniform(-size / 8, size / 8)
    ry = size / 4 + rng.uniform(-size / 16, size / 16)
    rx = size / 4 + rng.uniform(-size / 16, size / 16)
    angle = rng.uniform(0.0, np.pi)
    yy, xx = np.mgrid[0:size, 0:size]
    dy = yy - cy
    dx = xx - cx
    cos_a, sin_a = np.cos(angle), np.sin(angle)
    u = cos_a * dx + sin_a * dy
    v = -sin_a * dx + cos_a * dy
    inside = (u / rx) ** 2 + (v / ry) ** 2 <= 1.0
    color = np.array([0.45, 0.30, 0.20]) + rng.uniform(-0.05, 0.05, size=3)
    texture = rng.normal(0.0, 0.03, size=(size, size, 3))
    image[inside] = color + texture[inside]
    return cy, cx, ry, rx


def _place_glyph(rng, image, pattern, cy, cx, ry, rx, size):
    g = pattern.shape[0]
    r = int(round(cy + rng.uniform(-ry / 2, ry / 2) - g / 2))
    c = int(round(cx + rng.uniform(-rx / 2, rx / 2) - g / 2))
    r = min(max(r, 0), size - g)
    c = min(max(c, 0), size - g)
    image[r:r + g, c:c + g] = pattern
    return r, c


def synth_finegrained(seed, num_classes, per_class, size, start_index=0,
                      with_meta=False):
    """Deterministic synthetic dataset; same seed gives bit-identical output.

    ``start_index`` offsets the per-sample streams so that disjoint splits
    (train vs test) can share one seed, and with it the class glyphs.
    Returns a list of samples, plus per-sample metadata (glyph box) when
    ``with_meta`` is set.
    """
    if num_classes < 2:
        raise DataError("synthetic dataset needs at least 2 classes")
    if size < MIN_SYNTH_SIZE:
        raise DataError(
            f"synthetic image size {size} below minimum {MIN_SYNTH_SIZE}")
    if per_class < 1:
        raise DataError("per_class must be at least 1")
    glyph_size = size // 8
    patterns = [glyph_pattern(seed, label, glyph_size)
                for label in range(num_classes)]
    samples = []
    meta = []
    for label in range(num_classes):
        for i in range(per_class):
            index = start_index + i
            rng = np.random.default_rng([seed, _SAMPLE_STREAM, label, index])
            image = _draw_background(rng, size)
            cy, cx, ry, rx = _draw_body(rng, image, size)
            r, c = _place_glyph(rng, image, patterns[label], cy, cx, ry, rx,
                                size)
            # Global color jitter: swamps whole-image pixel statistics
            # without moving the classes' relative color geometry.
            jitter = rng.uniform(-0.08, 0.08, size=3)
            image += jitter
            np.clip(image, 0.0, 1.0, out=image)
            samples.append(Sample(image=image, label=label,
                                  id=f"c{label:02d}-i{index:04d}"))
            meta.append({"glyph_box": (r, r + glyph_size - 1,
                                       c, c + glyph_size - 1),
                         "body_center": (cy, cx),
                         "color_jitter": jitter})
    if with_meta:
        return samples, meta
    return samples


# ---------------------------------------------------------------------------
# Manifest-driven folders
# ---------------------------------------------------------------------------

def write_dataset(samples, class_names, out_dir):
    """Materialize samples as images/<id>.ppm plus manifest.csv and classes.txt."""
    images_dir = os.path.join(out_dir, "images")
    os.makedirs(images_dir, exist_ok=True)
    rows = []
    for s in samples:
        rel = f"images/{s.id}.ppm"
        save_ppm(s.image, os.path.join(out_dir, rel))
        rows.append((rel, s.label))
    with open(os.path.join(out_dir, "manifest.csv"), "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["path", "label"])
        writer.writerows(rows)
    with open(os.path.join(out_dir, "classes.txt"), "w") as f:
        for name in class_names:
            f.write(name + "\n")


def load_manifest(root):
    """Parse and validate manifest.csv and classes.txt under ``root``."""
    manifest_path = os.path.join(root, "manifest.csv")
    classes_path = os.path.join(root, "classes.txt")
    if not os.path.exists(manifest_path):
        raise DataError(f"missing manifest: {manifest_path}")
    if not os.path.exists(classes_path):
        raise DataError(f"missing class table: {classes_path}")
    with open(classes_path) as f:
        class_names = [line.rstrip("\n") for line in f if line.strip()]
    entries = []
    with open(manifest_path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header != ["path", "label"]:
            raise DataError(f"manifest header {header} != ['path', 'label']")
        for row in reader:
            if len(row) != 2:
                raise DataError(f"malformed manifest row {row}")
            entries.append((row[0], int(row[1])))
    paths = [p for p, _ in entries]
    if len(set(paths)) != len(paths):
        dupes = sorted({p for p in paths if paths.count(p) > 1})
        raise DataError(f"duplicate manifest paths: {dupes[:3]}")
    labels = {l for _, l in entries}
    expected = set(range(len(class_names)))
    if labels != expected:
        raise DataError(
            f"labels not dense over [0, {len(class_names)}): "
            f"missing {sorted(expected - labels)}, stray {sorted(labels - expected)}")
    size = None
    if entries:
        first = load_ppm(os.path.join(root, entries[0][0]))
        size = first.shape[0]
    return Manifest(entries=entries, class_names=class_names, image_size=size)


def load_dataset(root, image_size=None):
    """Load every manifest entry, resizing to ``image_size`` when given."""
    manifest = load_manifest(root)
    samples = []
    for rel, label in manifest.entries:
        image = load_ppm(os.path.join(root, rel))
        if image_size is not None and image.shape[:2] != (image_size, image_size):
            image = np.clip(resize_image(image, image_size, image_size),
                            0.0, 1.0)
        stem = os.path.splitext(os.path.basename(rel))[0]
        samples.append(Sample(image=image, label=label, id=stem))
    return samples, manifest.class_names


def batches(count, batch_size, seed, epoch):
    """Index batches for one epoch; order depends only on (seed, epoch)."""
    if batch_size < 1:
        raise DataError("batch_size must be at least 1")
    order = np.random.default_rng([seed, _BATCH_STREAM, epoch]).permutation(count)
    return [order[i:i + batch_size] for i in range(0, count, batch_size)]
