"""Attention-guided crop augmentation and baseline flips.

A spatial saliency map is read off one encoder layer's class-token attention,
min-max normalized, binarized at a threshold, covered by the tightest
bounding box, and the boxed region of the original image is zoomed back to
full size.  All of this is plain array work on detached attention values; the
augmented image re-enters the network as fresh input data.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ._kernels import bilinear_resize
from .errors import ConfigError, ShapeError

THETA_RANGE = (0.4, 0.6)
HEAD_AGG_MODES = ("mean", "max")


@dataclass
class AttentionMap:
    """Patch-grid saliency from one layer, plus its pixel-space upsampling."""

    grid: np.ndarray       # [G, G], nonnegative
    source_layer: int
    upsampled: np.ndarray  # [H, W]


@dataclass
class CropMask:
    mask: np.ndarray       # [H, W] uint8 in {0, 1}
    threshold: float


@dataclass(frozen=True)
class BBox:
    """Inclusive pixel bounds of a rectangular region."""

    row_min: int
    row_max: int
    col_min: int
    col_max: int

    def __post_init__(self):
        if self.row_min > self.row_max or self.col_min > self.col_max:
            raise ShapeError(f"degenerate bounding box {self}")
        if min(self.row_min, self.col_min) < 0:
            raise ShapeError(f"bounding box out of bounds {self}")

    @property
    def height(self):
        return self.row_max - self.row_min + 1

    @property
    def width(self):
        return self.col_max - self.col_min + 1


@dataclass
class CropPlan:
    """Everything derived on the way from attention to the augmented image."""

    attention_map: AttentionMap
    normalized: np.ndarray
    degenerate: bool
    mask: CropMask
    box: BBox
    image: np.ndarray      # [H, W, 3] augmented output


def resize_image(image, out_h, out_w):
    """Corner-aligned bilinear resize; same-size resize is the exact identity."""
    arr = np.asarray(image, dtype=np.float64)
    if arr.ndim == 2:
        return bilinear_resize(arr[:, :, None], out_h, out_w)[:, :, 0]
    if arr.ndim == 3:
        return bilinear_resize(arr, out_h, out_w)
    raise ShapeError(f"resize_image expects 2-D or 3-D input, got {arr.shape}")


def extract_attention_map(stack, source_layer, config, head_agg="mean"):
    """Class-token attention over patches at one layer, aggregated over heads.

    The patch columns of the class row are averaged (or maxed) across heads,
    reshaped to the patch grid in raster order, and bilinearly upsampled to
    image resolution.
    """
    if head_agg not in HEAD_AGG_MODES:
        raise ConfigError(f"unknown head aggregation {head_agg!r}")
    count = stack.num_layers
    if not 1 <= source_layer <= count:
        raise ConfigError(
            f"attention source layer {source_layer} outside 1..{count}")
    layer = stack.layer(source_layer)
    class_rows = layer[:, 0, 1:]
    agg = class_rows.mean(axis=0) if head_agg == "mean" else class_rows.max(axis=0)
    g = config.grid_size
    if agg.size != g * g:
        raise ShapeError(
            f"attention row covers {agg.size} patches, grid wants {g * g}")
    grid = agg.reshape(g, g)
    upsampled = resize_image(grid, config.image_size, config.image_size)
    return AttentionMap(grid=grid, source_layer=source_layer, upsampled=upsampled)


def normalize(raw):
    """Min-max rescale to [0, 1]. A constant map yields zeros plus a flag.

    Returns ``(normalized, degenerate)``; training treats a degenerate map as
    a no-crop sample instead of halting.
    """
    raw = np.asarray(raw, dtype=np.float64)
    if raw.size == 0:
        raise ShapeError("cannot normalize an empty map")
    lo = raw.min()
    hi = raw.max()
    if hi == lo:
        return np.zeros_like(raw), True
    return (raw - lo) / (hi - lo), False


def binarize(normalized, threshold):
    """Strictly-greater thresholding into a {0, 1} mask."""
    lo, hi = THETA_RANGE
    if not lo <= threshold <= hi:
        raise ConfigError(
            f"crop threshold {threshold} outside [{lo}, {hi}]")
    mask = (np.asarray(normalized) > threshold).astype(np.uint8)
    return CropMask(mask=mask, threshold=float(threshold))


def min_bbox(crop_mask):
    """Tightest box covering every set pixel; an empty mask covers everything."""
    mask = crop_mask.mask
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    if rows.size == 0:
        return BBox(0, mask.shape[0] - 1, 0, mask.shape[1] - 1)
    return BBox(int(rows[0]), int(rows[-1]), int(cols[0]), int(cols[-1]))


def crop_resize(image, box):
    """Cut the boxed region and zoom it back to the full image size."""
    image = np.asarray(image, dtype=np.float64)
    h, w = image.shape[:2]
    if box.row_max >= h or box.col_max >= w:
        raise ShapeError(f"box {box} exceeds image {h}x{w}")
    region = image[box.row_min:box.row_max + 1, box.col_min:box.col_max + 1]
    return resize_image(region, h, w)


def horizontal_flip(image, coin):
    """Mirror columns when the coin is below one half, otherwise pass through."""
    image = np.asarray(image, dtype=np.float64)
    if coin < 0.5:
        return np.ascontiguousarray(image[:, ::-1])
    return image.copy()


def build_crop_plan(image, stack, source_layer, threshold, config,
                    head_agg="mean"):
    """Run the whole attention-to-augmented-image chain for one sample."""
    amap = extract_attention_map(stack, source_layer, config, head_agg)
    normalized, degenerate = normalize(amap.upsampled)
    mask = binarize(normalized, threshold)
    box = min_bbox(mask)
    return CropPlan(attention_map=amap, normalized=normalized,
                    degenerate=degenerate, mask=mask, box=box,
                    image=crop_resize(image, box))
