"""Frame processing: smoothing, bilinear sampling, per-pixel HOG and the
dominant-gradient orientation field.

Images are float64 arrays of shape (H, W, 3) (or (H, W) for grayscale) with
values in [0, 255]. Pixel ``(r, c)`` has its center at image coordinate
``(x, y) = (c, r)``.
"""

import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from ._validation import check_image, check_positive

LUMA = np.array([0.299, 0.587, 0.114])
FRAME_SUFFIXES = (".png", ".jpg", ".jpeg")


@dataclass(frozen=True)
class HogParams:
    bins: int = 36
    window: int = 8
    mag_threshold: float = 10.0
    freq_threshold: int = 16
    stride: int = 4
    # Gaussian pre-blur (pixels) before gradients; 0 disables it
    presmooth: float = 1.0

    def __post_init__(self):
        if self.bins < 4:
            raise ValueError(f"bins must be >= 4, got {self.bins}")
        if self.window < 1:
            raise ValueError(f"window must be >= 1, got {self.window}")
        if self.stride < 1:
            raise ValueError(f"stride must be >= 1, got {self.stride}")
        if self.mag_threshold < 0 or self.freq_threshold < 0 or self.presmooth < 0:
            raise ValueError("thresholds and presmooth must be non-negative")

    @property
    def bin_width(self):
        return 360.0 / self.bins


@dataclass(frozen=True)
class HogHistogram:
    counts: np.ndarray

    @property
    def bins(self):
        return self.counts.shape[0]

    @property
    def bin_width(self):
        return 360.0 / self.bins

    def center_angle(self, k):
        return (k + 0.5) * self.bin_width


@dataclass(frozen=True, eq=False)
class OrientationField:
    """Per-pixel dominant gradient direction: unit 2-vectors or exact zeros.

    ``grid`` holds the values actually computed at every ``stride``-th pixel;
    ``directions`` is the full-resolution nearest-grid fill.
    """

    grid: np.ndarray
    stride: int
    shape: tuple
    directions: np.ndarray = field(repr=False)

    @property
    def width(self):
        return self.shape[1]

    @property
    def height(self):
        return self.shape[0]

    def lookup(self, points):
        """Nearest grid sample at each (x, y); zero outside the image."""
        P = np.asarray(points, dtype=np.float64).reshape(-1, 2)
        out = np.zeros((P.shape[0], 2))
        h, w = self.shape
        inside = np.isfinite(P).all(axis=1)
        inside[inside] &= ((P[inside, 0] >= -0.5) & (P[inside, 0] < w - 0.5)
                           & (P[inside, 1] >= -0.5) & (P[inside, 1] < h - 0.5))
        if inside.any():
            gi = _nearest_grid(P[inside, 1], self.stride, self.grid.shape[0])
            gj = _nearest_grid(P[inside, 0], self.stride, self.grid.shape[1])
            out[inside] = self.grid[gi, gj]
        return out

    def nonzero_mask(self):
        return np.any(self.directions != 0, axis=-1)


def _nearest_grid(coord, stride, n):
    return np.clip(np.floor(np.asarray(coord) / stride + 0.5).astype(np.int64), 0, n - 1)


def to_gray(img):
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 2:
        return img
    return img[..., :3] @ LUMA


def gaussian_kernel(sigma):
    sigma = check_positive(sigma, "sigma")
    radius = int(np.ceil(3.0 * sigma))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def gaussian_smooth(img, sigma):
    """Separable Gaussian blur, kernel cut at +-3 sigma, borders clamped."""
    arr = check_image(img)
    k = gaussian_kernel(sigma)
    out = ndimage.correlate1d(arr, k, axis=0, mode="nearest")
    return ndimage.correlate1d(out, k, axis=1, mode="nearest")


def sample_bilinear(img, points, with_gradient=True):
    """Bilinear samples and their spatial derivatives.

    Returns ``(values, gradients, in_view)`` with shapes (M, C), (M, C, 2)
    and (M,). Gradients are d/dx, d/dy of the bilinear surface. Points
    outside ``[0, W-1] x [0, H-1]`` are flagged out of view and get zero
    values and gradients. A single (2,) point yields unbatched outputs.
    """
    arr = np.asarray(img, dtype=np.float64)
    gray = arr.ndim == 2
    if gray:
        arr = arr[..., None]
    h, w, c = arr.shape
    P = np.asarray(points, dtype=np.float64)
    single = P.ndim == 1
    P = P.reshape(-1, 2)
    x, y = P[:, 0], P[:, 1]
    with np.errstate(invalid="ignore"):
        in_view = (x >= 0) & (x <= w - 1) & (y >= 0) & (y <= h - 1)
    values = np.zeros((P.shape[0], c))
    grads = np.zeros((P.shape[0], c, 2))
    if in_view.any():
        xs, ys = x[in_view], y[in_view]
        x0 = np.clip(np.floor(xs).astype(np.int64), 0, max(w - 2, 0))
        y0 = np.clip(np.floor(ys).astype(np.int64), 0, max(h - 2, 0))
        x1 = np.minimum(x0 + 1, w - 1)
        y1 = np.minimum(y0 + 1, h - 1)
        fx = (xs - x0)[:, None]
        fy = (ys - y0)[:, None]
        i00, i01 = arr[y0, x0], arr[y0, x1]
        i10, i11 = arr[y1, x0], arr[y1, x1]
        values[in_view] = ((1 - fy) * ((1 - fx) * i00 + fx * i01)
                           + fy * ((1 - fx) * i10 + fx * i11))
        if with_gradient:
            grads[in_view, :, 0] = (1 - fy) * (i01 - i00) + fy * (i11 - i10)
            grads[in_view, :, 1] = (1 - fx) * (i10 - i00) + fx * (i11 - i01)
    if gray:
        values, grads = values[:, 0], grads[:, 0]
    if single:
        return values[0], grads[0], bool(in_view[0])
    return values, grads, in_view


def central_gradients(gray):
    """Central differences with clamped borders: returns (gx, gy)."""
    g = np.asarray(gray, dtype=np.float64)
    p = np.pad(g, 1, mode="edge")
    gx = 0.5 * (p[1:-1, 2:] - p[1:-1, :-2])
    gy = 0.5 * (p[2:, 1:-1] - p[:-2, 1:-1])
    return gx, gy


def gradient_bin_map(gray, bins, mag_threshold, presmooth=0.0):
    """Angular bin index of every pixel's gradient, -1 where too weak."""
    g = to_gray(gray)
    if presmooth > 0:
        g = gaussian_smooth(g, presmooth)
    gx, gy = central_gradients(g)
    mag = np.hypot(gx, gy)
    angle = np.degrees(np.arctan2(gy, gx)) % 360.0
    idx = np.minimum((angle / (360.0 / bins)).astype(np.int64), bins - 1)
    idx[~(mag > mag_threshold)] = -1
    return idx


def _box_counts(bin_map, bins, x0, y0, x1, y1):
    h, w = bin_map.shape
    x0, y0 = max(int(x0), 0), max(int(y0), 0)
    x1, y1 = min(int(x1), w - 1), min(int(y1), h - 1)
    if x1 < x0 or y1 < y0:
        return np.zeros(bins, dtype=np.int64)
    patch = bin_map[y0:y1 + 1, x0:x1 + 1].ravel()
    return np.bincount(patch[patch >= 0], minlength=bins)


def hog_at(img, center, window=8, bins=36, mag_threshold=10.0, presmooth=0.0):
    """Magnitude-independent gradient-angle histogram around ``center``.

    ``center`` is the pixel as (x, y) = (column, row). The neighbourhood is
    the (2*window+1)^2 square clipped to the image.
    """
    if bins < 4 or window < 1:
        raise ValueError("need bins >= 4 and window >= 1")
    bm = gradient_bin_map(img, bins, mag_threshold, presmooth)
    cx, cy = int(center[0]), int(center[1])
    counts = _box_counts(bm, bins, cx - window, cy - window, cx + window, cy + window)
    return HogHistogram(counts)


def hog_in_box(bin_map, bins, x0, y0, x1, y1):
    """Histogram over the inclusive pixel box, from a precomputed bin map."""
    return HogHistogram(_box_counts(bin_map, bins, x0, y0, x1, y1))


def dominant_direction(hist, freq_threshold):
    """Unit vector of the modal bin's center angle, or (0, 0).

    Ties go to the lowest bin index.
    """
    counts = hist.counts if isinstance(hist, HogHistogram) else np.asarray(hist)
    k = int(np.argmax(counts))
    if counts[k] < freq_threshold or counts[k] == 0:
        return np.zeros(2)
    alpha = np.radians((k + 0.5) * 360.0 / counts.shape[0])
    return np.array([np.cos(alpha), np.sin(alpha)])


def build_orientation_field(img, params=None):
    """Dominant frame gradient on a stride grid, nearest-filled to full size."""
    params = params or HogParams()
    gray = to_gray(check_image(img))
    h, w = gray.shape
    bm = gradient_bin_map(gray, params.bins, params.mag_threshold, params.presmooth)
    rows = np.arange(0, h, params.stride)
    cols = np.arange(0, w, params.stride)
    r0 = np.clip(rows - params.window, 0, h)
    r1 = np.clip(rows + params.window + 1, 0, h)
    c0 = np.clip(cols - params.window, 0, w)
    c1 = np.clip(cols + params.window + 1, 0, w)

    best = np.zeros((rows.size, cols.size), dtype=np.int64)
    best_bin = np.zeros((rows.size, cols.size), dtype=np.int64)
    for k in range(params.bins):
        ii = np.zeros((h + 1, w + 1), dtype=np.int64)
        ii[1:, 1:] = np.cumsum(np.cumsum(bm == k, axis=0), axis=1)
        cnt = (ii[np.ix_(r1, c1)] - ii[np.ix_(r0, c1)]
               - ii[np.ix_(r1, c0)] + ii[np.ix_(r0, c0)])
        better = cnt > best
        best[better] = cnt[better]
        best_bin[better] = k

    alpha = np.radians((best_bin + 0.5) * params.bin_width)
    grid = np.stack([np.cos(alpha), np.sin(alpha)], axis=-1)
    weak = (best < params.freq_threshold) | (best == 0)
    grid[weak] = 0.0
    gi = _nearest_grid(np.arange(h), params.stride, rows.size)
    gj = _nearest_grid(np.arange(w), params.stride, cols.size)
    full = grid[np.ix_(gi, gj)]
    return OrientationField(grid=grid, stride=params.stride, shape=(h, w), directions=full)


def orientation_to_rgb(field):
    """Hue encodes the angle, black marks pixels without a line pattern."""
    d = field.directions
    hue = (np.degrees(np.arctan2(d[..., 1], d[..., 0])) % 360.0) / 60.0
    value = np.any(d != 0, axis=-1).astype(np.float64)
    x = 1.0 - np.abs(hue % 2.0 - 1.0)
    sector = np.floor(hue).astype(np.int64) % 6
    one, zero = np.ones_like(x), np.zeros_like(x)
    table = [(one, x, zero), (x, one, zero), (zero, one, x),
             (zero, x, one), (x, zero, one), (one, zero, x)]
    rgb = np.zeros(d.shape[:2] + (3,))
    for s, (r, g, b) in enumerate(table):
        m = sector == s
        rgb[m] = np.stack([r[m], g[m], b[m]], axis=-1)
    return rgb * value[..., None] * 255.0


def read_image(path):
    from PIL import Image

    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float64)


def write_image(path, img):
    from PIL import Image

    arr = np.clip(np.rint(np.asarray(img, dtype=np.float64)), 0, 255).astype(np.uint8)
    Image.fromarray(arr).save(path)


def _frame_key(path):
    nums = re.findall(r"\d+", path.stem)
    return (int(nums[-1]) if nums else -1, path.name)


def list_frames(directory):
    """Sequentially numbered PNG/JPEG frames in a directory, in order."""
    d = Path(directory)
    if not d.is_dir():
        raise FileNotFoundError(f"frame directory not found: {d}")
    frames = [p for p in d.iterdir() if p.suffix.lower() in FRAME_SUFFIXES]
    if not frames:
        raise FileNotFoundError(f"no PNG/JPEG frames in {d}")
    return sorted(frames, key=_frame_key)
