"""Nozzle-tip image geometry: find the bright streak of freshly laid material
and cut a normalized patch out of it, plus the randomized augmentations used
to harden downstream classifiers.

Conventions: pixel (x, y) addresses column x of row y, the y axis points
down, and angles are degrees from the +x axis increasing counterclockwise in
(x, y) coordinates. All fractional sampling is bilinear.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

GRAY_WEIGHTS = (0.299, 0.587, 0.114)

DEFAULT_SWEEP_RADIUS = 87.0
DEFAULT_HALF_HEIGHT = 10.0
PATCH_WIDTH = 48
PATCH_HEIGHT = 16


class GeometryError(ValueError):
    """A geometric query that the image cannot satisfy."""


class IntensityGrid:
    """A 2-D 8-bit intensity image.

    Wraps a (height, width) uint8 array; the array is treated as immutable
    by every operation in this module (they return new grids).
    """

    __slots__ = ("data",)

    def __init__(self, data):
        arr = np.asarray(data)
        if arr.ndim != 2:
            raise ValueError(f"expected a 2-D array, got shape {arr.shape}")
        if arr.shape[0] < 1 or arr.shape[1] < 1:
            raise ValueError("grid must be at least 1x1")
        if arr.dtype != np.uint8:
            if np.any((arr < 0) | (arr > 255)):
                raise ValueError("intensities must lie in [0, 255]")
            arr = arr.astype(np.uint8)
        self.data = arr

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @classmethod
    def from_flat(cls, width: int, height: int, pixels) -> "IntensityGrid":
        flat = np.asarray(pixels)
        if flat.size != width * height:
            raise ValueError(
                f"pixel count {flat.size} != width*height {width * height}"
            )
        return cls(flat.reshape(height, width))

    @classmethod
    def constant(cls, width: int, height: int, value: int) -> "IntensityGrid":
        return cls(np.full((height, width), value, dtype=np.uint8))

    def __eq__(self, other):
        if not isinstance(other, IntensityGrid):
            return NotImplemented
        return np.array_equal(self.data, other.data)

    def __repr__(self):
        return f"IntensityGrid({self.width}x{self.height})"


@dataclass(frozen=True)
class LineSegment:
    """Directed segment from s to e in pixel coordinates."""

    s: tuple[float, float]
    e: tuple[float, float]

    def __post_init__(self):
        if self.s == self.e:
            raise GeometryError("segment endpoints coincide")

    @property
    def length(self) -> float:
        return math.hypot(self.e[0] - self.s[0], self.e[1] - self.s[1])


@dataclass(frozen=True)
class KeyRectangle:
    """Rectangle around a midline segment; v1/v2 flank s, v3/v4 flank e."""

    v1: tuple[float, float]
    v2: tuple[float, float]
    v3: tuple[float, float]
    v4: tuple[float, float]
    h: float


@dataclass(frozen=True)
class AdrConfig:
    """Randomized-augmentation settings.

    crop_fraction_range is the fraction of total pixels removed from the
    edges; brightness_range and contrast_range are the half-widths of the
    uniform relative adjustments.
    """

    crop_fraction_range: tuple[float, float] = (0.10, 0.30)
    flip_probability: float = 0.5
    brightness_range: float = 0.10
    contrast_range: float = 0.10
    per_op_probability: float = 0.5
    rng_seed: int = 0

    def __post_init__(self):
        lo, hi = self.crop_fraction_range
        if not (0.10 <= lo <= hi <= 0.30):
            raise ValueError("crop_fraction_range must lie within [0.10, 0.30]")
        if not (0.0 <= self.brightness_range <= 0.10):
            raise ValueError("brightness_range must lie within [0, 0.10]")
        if not (0.0 <= self.contrast_range <= 0.10):
            raise ValueError("contrast_range must lie within [0, 0.10]")
        for p in (self.flip_probability, self.per_op_probability):
            if not (0.0 <= p <= 1.0):
                raise ValueError("probabilities must lie in [0, 1]")


def _round_u8(values: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(values), 0, 255).astype(np.uint8)


def _bilinear(data: np.ndarray, xs: np.ndarray, ys: np.ndarray):
    """Sample data at real coordinates; returns (values, inside_mask).

    Coordinates are clamped for indexing, so callers decide whether
    out-of-range samples are excluded (mask) or edge-clamped.
    """
    h, w = data.shape
    inside = (xs >= 0.0) & (xs <= w - 1.0) & (ys >= 0.0) & (ys <= h - 1.0)
    xc = np.clip(xs, 0.0, w - 1.0)
    yc = np.clip(ys, 0.0, h - 1.0)
    x0 = np.floor(xc).astype(np.intp)
    y0 = np.floor(yc).astype(np.intp)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = xc - x0
    fy = yc - y0
    d = data.astype(np.float64)
    v00 = d[y0, x0]
    v01 = d[y0, x1]
    v10 = d[y1, x0]
    v11 = d[y1, x1]
    # Incremental form: exact on constant and axis-linear data, which keeps
    # ties between sweep angles exact instead of drifting by rounding.
    vals = v00 + fx * (v01 - v00) + fy * (v10 - v00) + fx * fy * (v11 - v10 - v01 + v00)
    return vals, inside


def to_grayscale(rgb) -> IntensityGrid:
    """Collapse an (h, w, 3) RGB image to 8-bit luma."""
    try:
        arr = np.asarray(rgb, dtype=np.float64)
    except ValueError as exc:
        raise ValueError(f"channels do not share dimensions: {exc}") from None
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValueError(f"expected an (h, w, 3) image, got shape {arr.shape}")
    wr, wg, wb = GRAY_WEIGHTS
    luma = wr * arr[:, :, 0] + wg * arr[:, :, 1] + wb * arr[:, :, 2]
    return IntensityGrid(_round_u8(luma))


def equalize(g: IntensityGrid) -> IntensityGrid:
    """Global histogram equalization via the intensity CDF.

    Monotone non-decreasing mapping; a single-intensity image is returned
    unchanged (its histogram carries no spread to redistribute).
    """
    hist = np.bincount(g.data.ravel(), minlength=256)
    cdf = np.cumsum(hist)
    occupied = np.nonzero(hist)[0]
    cdf_min = cdf[occupied[0]]
    denom = cdf[-1] - cdf_min
    if denom == 0:
        return IntensityGrid(g.data.copy())
    lut = _round_u8((cdf - cdf_min) / denom * 255.0)
    return IntensityGrid(lut[g.data])


def sweep_max_intensity(
    g: IntensityGrid,
    center: tuple[float, float],
    radius: float,
    step_deg: int = 1,
):
    """Rotate a segment anchored at center through the full circle and return
    the angle whose segment has the highest mean sampled intensity.

    Samples lie at 1-pixel arc spacing from the center outwards; samples
    falling outside the grid are excluded from the mean. Ties go to the
    smallest angle. Returns (angle_deg, LineSegment, mean_intensity).
    """
    cx, cy = float(center[0]), float(center[1])
    w, h = g.width, g.height
    if not (0.0 <= cx <= w - 1.0 and 0.0 <= cy <= h - 1.0):
        raise ValueError(f"center {center} outside grid {w}x{h}")
    if radius < 2:
        raise ValueError("radius must be at least 2 pixels")
    dists = np.arange(0.0, math.floor(radius) + 1.0)
    angles = np.arange(0, 360, step_deg, dtype=np.float64)
    rad = np.deg2rad(angles)
    xs = cx + np.outer(np.cos(rad), dists)
    ys = cy + np.outer(np.sin(rad), dists)
    vals, inside = _bilinear(g.data, xs, ys)
    counts = inside.sum(axis=1)
    sums = np.where(inside, vals, 0.0).sum(axis=1)
    means = np.full(angles.shape, -np.inf)
    ok = counts > 0
    means[ok] = sums[ok] / counts[ok]
    if not ok.any():
        raise GeometryError("every sampled point is outside the grid")
    best = int(np.argmax(means))  # first max = smallest angle on ties
    theta = math.radians(angles[best])
    seg = LineSegment(
        (cx, cy), (cx + radius * math.cos(theta), cy + radius * math.sin(theta))
    )
    return float(angles[best]), seg, float(means[best])


def rect_vertices(seg: LineSegment, h: float) -> KeyRectangle:
    """Vertices of the rectangle whose horizontal midline is seg.

    The cross direction is the unit perpendicular (s_y - e_y, e_x - s_x)
    normalized; v1/v3 sit on its negative side, v2/v4 on the positive side.
    """
    if h <= 0:
        raise ValueError("half-height must be positive")
    sx, sy = seg.s
    ex, ey = seg.e
    gx, gy = sy - ey, ex - sx
    norm = math.hypot(gx, gy)
    if norm == 0.0:
        raise GeometryError("degenerate segment")
    ux, uy = gx / norm, gy / norm
    v1 = (sx - ux * h, sy - uy * h)
    v2 = (sx + ux * h, sy + uy * h)
    v3 = (ex - ux * h, ey - uy * h)
    v4 = (ex + ux * h, ey + uy * h)
    return KeyRectangle(v1, v2, v3, v4, float(h))


def extract_patch(
    g: IntensityGrid,
    rect: KeyRectangle,
    out_w: int = PATCH_WIDTH,
    out_h: int = PATCH_HEIGHT,
) -> IntensityGrid:
    """Resample the rectangle interior onto an out_w x out_h grid.

    The s->e midline maps to the horizontal axis; output row 0 is the v1/v3
    edge. Samples outside the source grid read as 0.
    """
    if out_w < 1 or out_h < 1:
        raise ValueError("output dimensions must be positive")
    sx = (rect.v1[0] + rect.v2[0]) / 2.0
    sy = (rect.v1[1] + rect.v2[1]) / 2.0
    ex = (rect.v3[0] + rect.v4[0]) / 2.0
    ey = (rect.v3[1] + rect.v4[1]) / 2.0
    ux = (rect.v2[0] - rect.v1[0]) / (2.0 * rect.h)
    uy = (rect.v2[1] - rect.v1[1]) / (2.0 * rect.h)
    u = (np.arange(out_w) + 0.5) / out_w
    t = (np.arange(out_h) + 0.5) / out_h
    uu, tt = np.meshgrid(u, t)
    cross = (2.0 * tt - 1.0) * rect.h
    xs = sx + uu * (ex - sx) + cross * ux
    ys = sy + uu * (ey - sy) + cross * uy
    vals, inside = _bilinear(g.data, xs, ys)
    if not inside.any():
        raise GeometryError("rectangle lies entirely outside the grid")
    vals[~inside] = 0.0
    return IntensityGrid(_round_u8(vals))


def resize_bilinear(g: IntensityGrid, out_w: int, out_h: int) -> IntensityGrid:
    """Resize with pixel-center mapping and edge clamping."""
    xs = (np.arange(out_w) + 0.5) * (g.width / out_w) - 0.5
    ys = (np.arange(out_h) + 0.5) * (g.height / out_h) - 0.5
    xx, yy = np.meshgrid(xs, ys)
    vals, _ = _bilinear(g.data, xx, yy)
    return IntensityGrid(_round_u8(vals))


def crop_edges(g: IntensityGrid, fraction: float) -> IntensityGrid:
    """Remove `fraction` of the pixels symmetrically from the edges, then
    resize back to the original dimensions."""
    if not (0.0 <= fraction < 1.0):
        raise ValueError("crop fraction must lie in [0, 1)")
    keep = math.sqrt(1.0 - fraction)
    new_w = max(1, round(g.width * keep))
    new_h = max(1, round(g.height * keep))
    x0 = (g.width - new_w) // 2
    y0 = (g.height - new_h) // 2
    inner = IntensityGrid(g.data[y0 : y0 + new_h, x0 : x0 + new_w])
    return resize_bilinear(inner, g.width, g.height)


def flip_horizontal(g: IntensityGrid) -> IntensityGrid:
    return IntensityGrid(g.data[:, ::-1].copy())


def adjust_brightness(g: IntensityGrid, shift: float) -> IntensityGrid:
    """Scale intensities by (1 + shift); shift=+0.10 brightens 10%."""
    return IntensityGrid(_round_u8(g.data.astype(np.float64) * (1.0 + shift)))


def adjust_contrast(g: IntensityGrid, scale_delta: float) -> IntensityGrid:
    """Stretch intensities about mid-gray by (1 + scale_delta)."""
    mid = 127.5
    out = (g.data.astype(np.float64) - mid) * (1.0 + scale_delta) + mid
    return IntensityGrid(_round_u8(out))


def augment(g: IntensityGrid, cfg: AdrConfig) -> IntensityGrid:
    """Apply edge crop, horizontal flip, brightness and contrast jitter, each
    gated by its own probability. Deterministic given cfg.rng_seed."""
    rng = np.random.default_rng(cfg.rng_seed)
    out = g
    if rng.random() < cfg.per_op_probability:
        lo, hi = cfg.crop_fraction_range
        out = crop_edges(out, float(rng.uniform(lo, hi)))
    if rng.random() < cfg.flip_probability:
        out = flip_horizontal(out)
    if rng.random() < cfg.per_op_probability:
        b = cfg.brightness_range
        out = adjust_brightness(out, float(rng.uniform(-b, b)))
    if rng.random() < cfg.per_op_probability:
        c = cfg.contrast_range
        out = adjust_contrast(out, float(rng.uniform(-c, c)))
    if out is g:
        out = IntensityGrid(g.data.copy())
    return out


def write_pgm(path, g: IntensityGrid) -> None:
    """Write binary PGM (P5, maxval 255)."""
    with open(path, "wb") as fp:
        fp.write(f"P5\n{g.width} {g.height}\n255\n".encode("ascii"))
        fp.write(g.data.tobytes())


def read_pgm(path) -> IntensityGrid:
    """Read binary PGM (P5, maxval 255); round-trips write_pgm bit-exactly."""
    with open(path, "rb") as fp:
        blob = fp.read()

    pos = 0

    def next_token() -> bytes:
        nonlocal pos
        while pos < len(blob):
            ch = blob[pos : pos + 1]
            if ch == b"#":
                while pos < len(blob) and blob[pos : pos + 1] not in (b"\n", b"\r"):
                    pos += 1
            elif ch.isspace():
                pos += 1
            else:
                break
        start = pos
        while pos < len(blob) and not blob[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ValueError("truncated PGM header")
        return blob[start:pos]

    magic = next_token()
    if magic != b"P5":
        raise ValueError(f"not a binary PGM (magic {magic!r})")
    width = int(next_token())
    height = int(next_token())
    maxval = int(next_token())
    if maxval != 255:
        raise ValueError(f"unsupported maxval {maxval}")
    pos += 1  # single whitespace byte after maxval
    raster = blob[pos : pos + width * height]
    if len(raster) != width * height:
        raise ValueError("truncated PGM raster")
    return IntensityGrid(np.frombuffer(raster, dtype=np.uint8).reshape(height, width))
