"""Image and soiling-mask primitives.

Conventions used throughout the package:

* an image is a float ndarray of shape (H, W) or (H, W, 3) with values in
  [0, 1] ("storage range"),
* a soiling mask is a float ndarray of shape (H, W) with values in [0, 1]
  where 0 = clean, 1 = opaque soiling and interior values mean
  semi-transparent soiling,
* networks exchange tensors in [-1, 1] ("network range").

The composition operation blends a soiling layer into a clean image through
an upscaled alpha mask; the upscaled mask doubles as the automatic
annotation of the composite.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import cv2
import numpy as np
from PIL import Image as PILImage
from scipy.ndimage import correlate1d

from .errors import AnnotationError, ParameterError, ShapeError

OPAQUE = "opaque"
TRANSPARENT = "transparent"

#: alpha value assigned to semi-transparent soiling when rasterizing
DEFAULT_TRANSPARENT_ALPHA = 0.5

_CV2_MODES = {"bilinear": cv2.INTER_LINEAR, "bicubic": cv2.INTER_CUBIC}


@dataclass(frozen=True)
class Polygon:
    """Polygonal soiling annotation in normalized [0,1]^2 image coordinates."""

    vertices: tuple[tuple[float, float], ...]
    soiling_class: str = OPAQUE

    def __post_init__(self):
        verts = tuple((float(x), float(y)) for x, y in self.vertices)
        if len(verts) < 3:
            raise AnnotationError(f"polygon needs at least 3 vertices, got {len(verts)}")
        for x, y in verts:
            if not (0.0 <= x <= 1.0 and 0.0 <= y <= 1.0):
                raise AnnotationError(f"vertex ({x}, {y}) outside [0,1]^2")
        if self.soiling_class not in (OPAQUE, TRANSPARENT):
            raise AnnotationError(f"unknown soiling class {self.soiling_class!r}")
        object.__setattr__(self, "vertices", verts)


def validate_image(img: np.ndarray) -> np.ndarray:
    """Check image invariants (shape, channel count, value range)."""
    img = np.asarray(img)
    if img.ndim == 2:
        pass
    elif img.ndim == 3 and img.shape[2] in (1, 3):
        pass
    else:
        raise ShapeError(f"image must be (H,W), (H,W,1) or (H,W,3), got {img.shape}")
    if img.shape[0] < 1 or img.shape[1] < 1:
        raise ShapeError(f"image dimensions must be positive, got {img.shape}")
    if img.size and (img.min() < 0.0 or img.max() > 1.0):
        raise ParameterError(
            f"image values outside [0,1]: min={img.min():.4g} max={img.max():.4g}"
        )
    return img


def validate_mask(mask: np.ndarray) -> np.ndarray:
    """Check soiling-mask invariants (2-D, values in [0,1])."""
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise ShapeError(f"mask must be 2-D, got shape {mask.shape}")
    if mask.shape[0] < 1 or mask.shape[1] < 1:
        raise ShapeError(f"mask dimensions must be positive, got {mask.shape}")
    if mask.size and (mask.min() < 0.0 or mask.max() > 1.0):
        raise ParameterError(
            f"mask values outside [0,1]: min={mask.min():.4g} max={mask.max():.4g}"
        )
    return mask


def to_network_range(img: np.ndarray) -> np.ndarray:
    """Map storage-range values [0,1] to the [-1,1] range networks consume."""
    return 2.0 * np.asarray(img) - 1.0


def from_network_range(t: np.ndarray) -> np.ndarray:
    """Inverse of :func:`to_network_range`."""
    return (np.asarray(t) + 1.0) / 2.0


def rasterize(
    polygons: Sequence[Polygon],
    height: int,
    width: int,
    transparent_alpha: float = DEFAULT_TRANSPARENT_ALPHA,
) -> np.ndarray:
    """Rasterize polygon annotations into an alpha mask.

    A pixel gets alpha 1 when its center falls inside any opaque polygon,
    ``transparent_alpha`` when it falls only inside transparent polygons and
    0 otherwise.  Pixel (r, c) samples at ((c+0.5)/W, (r+0.5)/H); each
    polygon is filled with the even-odd rule.
    """
    if height < 1 or width < 1:
        raise ParameterError(f"mask size must be positive, got {height}x{width}")
    if not (0.0 <= transparent_alpha <= 1.0):
        raise ParameterError(f"transparent_alpha must be in [0,1], got {transparent_alpha}")

    cx = (np.arange(width) + 0.5) / width
    cy = (np.arange(height) + 0.5) / height
    px, py = np.meshgrid(cx, cy)

    opaque = np.zeros((height, width), dtype=bool)
    transparent = np.zeros((height, width), dtype=bool)
    for poly in polygons:
        if not isinstance(poly, Polygon):
            poly = Polygon(tuple(poly.vertices), poly.soiling_class)
        inside = _even_odd_inside(poly.vertices, px, py)
        if poly.soiling_class == OPAQUE:
            opaque |= inside
        else:
            transparent |= inside

    mask = np.zeros((height, width), dtype=np.float64)
    mask[transparent] = transparent_alpha
    mask[opaque] = 1.0
    return mask


def _even_odd_inside(vertices, px, py):
    """Vectorized even-odd (crossing parity) test against a single polygon."""
    inside = np.zeros(px.shape, dtype=bool)
    n = len(vertices)
    for i in range(n):
        x1, y1 = vertices[i]
        x2, y2 = vertices[(i + 1) % n]
        if y1 == y2:
            continue
        straddles = (y1 > py) != (y2 > py)
        with np.errstate(invalid="ignore"):
            x_cross = x1 + (py - y1) * (x2 - x1) / (y2 - y1)
        inside ^= straddles & (px < x_cross)
    return inside


def gaussian_kernel(sigma: float) -> np.ndarray:
    """Normalized 1-D Gaussian kernel truncated at radius ceil(3*sigma)."""
    if sigma < 0:
        raise ParameterError(f"sigma must be >= 0, got {sigma}")
    if sigma == 0:
        return np.array([1.0])
    radius = int(np.ceil(3.0 * sigma))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-(x * x) / (2.0 * sigma * sigma))
    return k / k.sum()


def gaussian_smooth(mask: np.ndarray, sigma: float) -> np.ndarray:
    """Soften a mask with a truncated Gaussian filter.

    Uses a normalized kernel of radius ceil(3*sigma) and replicate-border
    padding, so constant masks pass through unchanged and the value range
    never grows.  ``sigma == 0`` returns the mask as-is.
    """
    mask = validate_mask(mask)
    kernel = gaussian_kernel(sigma)
    if kernel.size == 1:
        return mask.copy()
    out = mask.astype(np.float64, copy=True)
    out = correlate1d(out, kernel, axis=0, mode="nearest")
    out = correlate1d(out, kernel, axis=1, mode="nearest")
    return np.clip(out, 0.0, 1.0)


def upscale(arr: np.ndarray, factor: int, mode: str = "bilinear") -> np.ndarray:
    """Scale an image or mask up by an integer factor.

    Modes: ``nearest`` (block replication), ``bilinear``, ``bicubic``.
    Output values are clamped to [0,1]; factor 1 returns the input
    bit-identically.
    """
    if int(factor) != factor or factor < 1:
        raise ParameterError(f"factor must be an integer >= 1, got {factor}")
    factor = int(factor)
    arr = np.asarray(arr)
    if arr.ndim not in (2, 3):
        raise ShapeError(f"expected 2-D or 3-D array, got shape {arr.shape}")
    if factor == 1:
        return arr
    if mode == "nearest":
        return arr.repeat(factor, axis=0).repeat(factor, axis=1)
    if mode not in _CV2_MODES:
        raise ParameterError(f"unsupported upscale mode {mode!r}")
    h, w = arr.shape[:2]
    out = cv2.resize(
        arr.astype(np.float64, copy=False),
        (w * factor, h * factor),
        interpolation=_CV2_MODES[mode],
    )
    return np.clip(out, 0.0, 1.0)


def downscale(arr: np.ndarray, factor: int) -> np.ndarray:
    """Area-average an image down by an integer factor (inverse of upscale)."""
    if int(factor) != factor or factor < 1:
        raise ParameterError(f"factor must be an integer >= 1, got {factor}")
    factor = int(factor)
    arr = np.asarray(arr)
    if factor == 1:
        return arr
    h, w = arr.shape[:2]
    if h % factor or w % factor:
        raise ShapeError(f"size {h}x{w} not divisible by factor {factor}")
    out = cv2.resize(
        arr.astype(np.float64, copy=False),
        (w // factor, h // factor),
        interpolation=cv2.INTER_AREA,
    )
    return np.clip(out, 0.0, 1.0)


def resize_mask(mask: np.ndarray, out_size: int) -> np.ndarray:
    """Resize a square-ish mask by an integer up/down factor."""
    size = mask.shape[0]
    if out_size == size:
        return mask
    if out_size > size and out_size % size == 0:
        return upscale(mask, out_size // size, "bilinear")
    if out_size < size and size % out_size == 0:
        return downscale(mask, size // out_size)
    raise ShapeError(f"cannot resize mask {size} -> {out_size} by an integer factor")


def compose(
    clean: np.ndarray,
    soiled: np.ndarray,
    mask: np.ndarray,
    factor: int = 1,
    image_mode: str = "bicubic",
    mask_mode: str = "bilinear",
) -> tuple[np.ndarray, np.ndarray]:
    """Blend a soiling layer into a clean image through an alpha mask.

    ``soiled`` and ``mask`` live at 1/factor of the clean resolution; both
    are upscaled and the output is the per-pixel convex combination

        out = (1 - up(mask)) * clean + up(mask) * up(soiled)

    Returns ``(out, up(mask))``; the upscaled mask is the automatic
    annotation of the composite.  Pixels where the upscaled mask is exactly
    0 are bit-identical to ``clean``.
    """
    clean = np.asarray(clean)
    soiled = np.asarray(soiled)
    mask = validate_mask(mask)
    if soiled.shape[:2] != mask.shape:
        raise ShapeError(f"soiled {soiled.shape[:2]} and mask {mask.shape} disagree")
    expected = (mask.shape[0] * factor, mask.shape[1] * factor)
    if clean.shape[:2] != expected:
        raise ShapeError(
            f"clean {clean.shape[:2]} must be mask size x factor = {expected}"
        )
    if clean.ndim != soiled.ndim or (clean.ndim == 3 and clean.shape[2] != soiled.shape[2]):
        raise ShapeError(f"clean {clean.shape} and soiled {soiled.shape} channel mismatch")

    up_soiled = upscale(soiled, factor, mode=image_mode)
    up_mask = upscale(mask, factor, mode=mask_mode)
    m = up_mask[..., np.newaxis] if clean.ndim == 3 else up_mask
    out = (1.0 - m) * clean + m * up_soiled
    return out, up_mask


def load_image(path) -> np.ndarray:
    """Read an 8-bit PNG into a float image in [0,1] ((H,W) or (H,W,3))."""
    with PILImage.open(path) as im:
        if im.mode not in ("L", "RGB"):
            im = im.convert("RGB") if im.mode in ("RGBA", "P", "CMYK") else im.convert("L")
        arr = np.asarray(im, dtype=np.float64)
    return arr / 255.0


def save_image(path, img: np.ndarray) -> None:
    """Write a float image in [0,1] as an 8-bit PNG (value = round(255*v))."""
    img = validate_image(img)
    data = np.rint(255.0 * img).astype(np.uint8)
    if data.ndim == 3 and data.shape[2] == 1:
        data = data[:, :, 0]
    PILImage.fromarray(data).save(path, format="PNG")


def load_mask(path) -> np.ndarray:
    """Read an 8-bit grayscale PNG into a float mask in [0,1]."""
    with PILImage.open(path) as im:
        arr = np.asarray(im.convert("L"), dtype=np.float64)
    return arr / 255.0


def save_mask(path, mask: np.ndarray) -> None:
    """Write a float mask in [0,1] as an 8-bit grayscale PNG (0=clean, 255=opaque)."""
    mask = validate_mask(mask)
    data = np.rint(255.0 * mask).astype(np.uint8)
    PILImage.fromarray(data, mode="L").save(path, format="PNG")


def mask_iou(a: np.ndarray, b: np.ndarray, threshold: float = 0.5) -> float:
    """Intersection-over-union of two masks binarized at ``threshold``.

    Returns 1.0 when both binarized masks are empty.
    """
    if a.shape != b.shape:
        raise ShapeError(f"mask shapes {a.shape} and {b.shape} disagree")
    ba = np.asarray(a) >= threshold
    bb = np.asarray(b) >= threshold
    union = np.logical_or(ba, bb).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(ba, bb).sum() / union)
