"""Bit-exact binary mask utilities.

Masks are 2-D uint8 numpy arrays with values in {0, 1}, shape (H, W).
Images are 3-D uint8 arrays, shape (H, W, 3).

The RLE codec follows the COCO convention: counts alternate zero-runs and
one-runs, starting with a zero-run, over the column-major (Fortran-order)
flattening of the mask. Counts are kept as a plain integer list so the JSON
form stays human-readable.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class MaskError(ValueError):
    """Raised for malformed masks, RLEs, or dimension mismatches."""


@dataclass(frozen=True)
class MaskRLE:
    """Uncompressed run-length encoding of a binary mask.

    size: [height, width]; counts sum to height * width.
    """

    size: tuple[int, int]
    counts: tuple[int, ...]

    def to_json(self) -> dict:
        return {"size": [int(self.size[0]), int(self.size[1])], "counts": list(self.counts)}

    @classmethod
    def from_json(cls, obj: dict) -> "MaskRLE":
        try:
            h, w = obj["size"]
            counts = tuple(int(c) for c in obj["counts"])
        except (KeyError, TypeError, ValueError) as exc:
            raise MaskError(f"malformed RLE object: {obj!r}") from exc
        rle = cls(size=(int(h), int(w)), counts=counts)
        rle.validate()
        return rle

    @classmethod
    def empty(cls, height: int, width: int) -> "MaskRLE":
        return cls(size=(height, width), counts=(height * width,))

    def validate(self) -> None:
        h, w = self.size
        if h < 1 or w < 1:
            raise MaskError(f"invalid RLE size {self.size}")
        if any(c < 0 for c in self.counts):
            raise MaskError("negative run length")
        if sum(self.counts) != h * w:
            raise MaskError(f"RLE counts sum {sum(self.counts)} != {h}*{w}")

    @property
    def foreground(self) -> int:
        """Number of foreground pixels (sum of the one-runs)."""
        return sum(self.counts[1::2])


@dataclass(frozen=True)
class BoundingBox:
    """Pixel-coordinate box, half-open on the max edges."""

    x_min: int
    y_min: int
    x_max: int
    y_max: int

    def __post_init__(self):
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise MaskError(f"degenerate box {self}")
        if self.x_min < 0 or self.y_min < 0:
            raise MaskError(f"negative box corner {self}")

    def clamped(self, height: int, width: int) -> "BoundingBox":
        return BoundingBox(
            x_min=max(0, min(self.x_min, width - 1)),
            y_min=max(0, min(self.y_min, height - 1)),
            x_max=max(1, min(self.x_max, width)),
            y_max=max(1, min(self.y_max, height)),
        )

    def to_json(self) -> list[int]:
        return [self.x_min, self.y_min, self.x_max, self.y_max]


def as_mask(arr: np.ndarray) -> np.ndarray:
    """Coerce to a contiguous uint8 {0,1} mask, validating shape."""
    a = np.asarray(arr)
    if a.ndim != 2:
        raise MaskError(f"mask must be 2-D, got shape {a.shape}")
    return np.ascontiguousarray((a != 0).astype(np.uint8))


def rle_encode(mask: np.ndarray) -> MaskRLE:
    """Encode a mask as column-major, zeros-first RLE.

    Canonical: no zero-length interior runs; a leading 0 appears only when
    the first pixel is foreground.
    """
    m = as_mask(mask)
    h, w = m.shape
    flat = m.ravel(order="F")
    boundaries = np.flatnonzero(flat[1:] != flat[:-1]) + 1
    edges = np.concatenate(([0], boundaries, [flat.size]))
    counts = np.diff(edges).tolist()
    if flat[0] == 1:
        counts = [0] + counts
    return MaskRLE(size=(h, w), counts=tuple(int(c) for c in counts))


def rle_decode(rle: MaskRLE) -> np.ndarray:
    """Decode RLE back to a (H, W) uint8 mask. Inverse of rle_encode."""
    rle.validate()
    h, w = rle.size
    flat = np.zeros(h * w, dtype=np.uint8)
    pos = 0
    value = 0
    for count in rle.counts:
        if value:
            flat[pos : pos + count] = 1
        pos += count
        value ^= 1
    return flat.reshape((h, w), order="F")


def binary_iou(a: np.ndarray, b: np.ndarray) -> float:
    """Intersection over union of two masks; 1.0 when both are empty."""
    ma, mb = as_mask(a), as_mask(b)
    if ma.shape != mb.shape:
        raise MaskError(f"IoU dimension mismatch: {ma.shape} vs {mb.shape}")
    inter = int(np.logical_and(ma, mb).sum())
    union = int(np.logical_or(ma, mb).sum())
    if union == 0:
        return 1.0
    return inter / union


def intersection_union(gt: np.ndarray, pred: np.ndarray) -> tuple[int, int]:
    """Pixel counts (|gt ∩ pred|, |gt ∪ pred|), with dimension check."""
    a, b = as_mask(gt), as_mask(pred)
    if a.shape != b.shape:
        raise MaskError(f"dimension mismatch: {a.shape} vs {b.shape}")
    return int(np.logical_and(a, b).sum()), int(np.logical_or(a, b).sum())


def erode(mask: np.ndarray, kernel_side: int = 5, iterations: int = 1) -> np.ndarray:
    """Morphological erosion with a square all-ones kernel.

    Out-of-bounds neighbors count as background, so foreground near the
    border always erodes.
    """
    if kernel_side < 1 or kernel_side % 2 == 0:
        raise MaskError(f"kernel_side must be odd and >= 1, got {kernel_side}")
    m = as_mask(mask).astype(bool)
    if kernel_side == 1:
        return m.astype(np.uint8)
    pad = kernel_side // 2
    for _ in range(iterations):
        padded = np.pad(m, pad, mode="constant", constant_values=False)
        windows = sliding_window_view(padded, (kernel_side, kernel_side))
        m = windows.all(axis=(2, 3))
    return m.astype(np.uint8)


def _round_half_up(x: float) -> int:
    return int(np.floor(x + 0.5))


def resized_dims(height: int, width: int, target: int) -> tuple[int, int]:
    """New (height, width) with the longer side at `target`, short side
    rounded half up."""
    if height >= width:
        return target, max(1, _round_half_up(width * target / height))
    return max(1, _round_half_up(height * target / width)), target


def resize_longest_side(grid: np.ndarray, target: int, interpolation: str | None = None) -> np.ndarray:
    """Resize so the longer side equals `target`, preserving aspect ratio.

    2-D grids (masks) default to nearest-neighbor; 3-D grids (images) to
    bilinear. Inputs already at target are returned unchanged.
    """
    if target < 1:
        raise MaskError(f"target must be >= 1, got {target}")
    arr = np.asarray(grid)
    if arr.ndim not in (2, 3):
        raise MaskError(f"expected 2-D or 3-D grid, got shape {arr.shape}")
    h, w = arr.shape[:2]
    new_h, new_w = resized_dims(h, w, target)
    if (new_h, new_w) == (h, w):
        return arr
    if interpolation is None:
        interpolation = "nearest" if arr.ndim == 2 else "bilinear"
    if interpolation == "nearest":
        return _resize_nearest(arr, new_h, new_w)
    if interpolation == "bilinear":
        return _resize_bilinear(arr, new_h, new_w)
    raise MaskError(f"unknown interpolation {interpolation!r}")


def _resize_nearest(arr: np.ndarray, new_h: int, new_w: int) -> np.ndarray:
    h, w = arr.shape[:2]
    rows = np.minimum((np.arange(new_h) + 0.5) * h / new_h, h - 1).astype(np.int64)
    cols = np.minimum((np.arange(new_w) + 0.5) * w / new_w, w - 1).astype(np.int64)
    return arr[rows][:, cols]


def _resize_bilinear(arr: np.ndarray, new_h: int, new_w: int) -> np.ndarray:
    h, w = arr.shape[:2]
    out_dtype = arr.dtype
    a = arr.astype(np.float64)
    ys = np.clip((np.arange(new_h) + 0.5) * h / new_h - 0.5, 0, h - 1)
    xs = np.clip((np.arange(new_w) + 0.5) * w / new_w - 0.5, 0, w - 1)
    y0 = np.floor(ys).astype(np.int64)
    x0 = np.floor(xs).astype(np.int64)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (ys - y0)[:, None]
    wx = (xs - x0)[None, :]
    if a.ndim == 3:
        wy = wy[..., None]
        wx = wx[..., None]
    top = a[y0][:, x0] * (1 - wx) + a[y0][:, x1] * wx
    bot = a[y1][:, x0] * (1 - wx) + a[y1][:, x1] * wx
    out = top * (1 - wy) + bot * wy
    if np.issubdtype(out_dtype, np.integer):
        return np.clip(np.rint(out), 0, np.iinfo(out_dtype).max).astype(out_dtype)
    return out.astype(out_dtype)


# 10 fixed high-contrast colors, cycled by region index.
OVERLAY_PALETTE: tuple[tuple[int, int, int], ...] = (
    (230, 25, 75),
    (60, 180, 75),
    (255, 225, 25),
    (0, 130, 200),
    (245, 130, 48),
    (145, 30, 180),
    (70, 240, 240),
    (240, 50, 230),
    (210, 245, 60),
    (250, 190, 190),
)

# 5x7 bitmap glyphs for digits, row-major strings ("1" = lit pixel).
_DIGIT_GLYPHS = {
    "0": ("01110", "10001", "10011", "10101", "11001", "10001", "01110"),
    "1": ("00100", "01100", "00100", "00100", "00100", "00100", "01110"),
    "2": ("01110", "10001", "00001", "00010", "00100", "01000", "11111"),
    "3": ("11111", "00010", "00100", "00010", "00001", "10001", "01110"),
    "4": ("00010", "00110", "01010", "10010", "11111", "00010", "00010"),
    "5": ("11111", "10000", "11110", "00001", "00001", "10001", "01110"),
    "6": ("00110", "01000", "10000", "11110", "10001", "10001", "01110"),
    "7": ("11111", "00001", "00010", "00100", "01000", "01000", "01000"),
    "8": ("01110", "10001", "10001", "01110", "10001", "10001", "01110"),
    "9": ("01110", "10001", "10001", "01111", "00001", "00010", "01100"),
}


def palette_color(index: int) -> tuple[int, int, int]:
    return OVERLAY_PALETTE[index % len(OVERLAY_PALETTE)]


def mask_centroid(mask: np.ndarray) -> tuple[int, int] | None:
    """(row, col) centroid of foreground pixels, or None if empty."""
    ys, xs = np.nonzero(as_mask(mask))
    if ys.size == 0:
        return None
    return int(np.floor(ys.mean())), int(np.floor(xs.mean()))


def _draw_label(canvas: np.ndarray, text: str, center: tuple[int, int], scale: int, color: tuple[int, int, int]) -> None:
    glyph_h, glyph_w = 7 * scale, 5 * scale
    total_w = len(text) * glyph_w + (len(text) - 1) * scale
    top = center[0] - glyph_h // 2
    left = center[1] - total_w // 2
    h, w = canvas.shape[:2]
    for k, ch in enumerate(text):
        glyph = _DIGIT_GLYPHS.get(ch)
        if glyph is None:
            continue
        gx = left + k * (glyph_w + scale)
        for r, row in enumerate(glyph):
            for c, bit in enumerate(row):
                if bit != "1":
                    continue
                y0, x0 = top + r * scale, gx + c * scale
                y1, x1 = min(h, y0 + scale), min(w, x0 + scale)
                if y1 > max(y0, 0) and x1 > max(x0, 0):
                    canvas[max(y0, 0) : y1, max(x0, 0) : x1] = color


def load_image_rgb(path) -> np.ndarray:
    """Load an image file as (H, W, 3) uint8 RGB."""
    from PIL import Image

    with Image.open(path) as img:
        return np.asarray(img.convert("RGB"))


def save_image_rgb(path, image: np.ndarray) -> None:
    from PIL import Image

    Image.fromarray(np.ascontiguousarray(image)).save(path)


def render_marks_overlay(image: np.ndarray, regions: list[tuple[int, np.ndarray]]) -> np.ndarray:
    """Copy of `image` with each region's boundary traced in a palette color
    and its numeric label drawn at the mask centroid.

    Colors are deterministic in the region index; the input is never mutated.
    """
    img = np.asarray(image)
    if img.ndim != 3 or img.shape[2] != 3:
        raise MaskError(f"expected (H, W, 3) image, got shape {img.shape}")
    indices = [idx for idx, _ in regions]
    if len(indices) != len(set(indices)):
        raise MaskError("duplicate region indices in overlay")
    out = img.copy()
    h = img.shape[0]
    scale = max(1, _round_half_up(0.02 * h / 7))
    for index, mask in regions:
        m = as_mask(mask)
        if m.shape != img.shape[:2]:
            raise MaskError(f"region {index} mask shape {m.shape} != image {img.shape[:2]}")
        color = palette_color(index)
        boundary = m.astype(bool) & ~erode(m, 3, 1).astype(bool)
        out[boundary] = color
        centroid = mask_centroid(m)
        if centroid is not None:
            _draw_label(out, str(index), centroid, scale, color)
    return out
