"""Napping-sheet photos to sticker coordinates.

The sheet is found from its four outer Harris corners, warped to a
fronto-parallel canonical frame, and each sticker color is located as the
largest blob passing an HSV threshold.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence, Union

import numpy as np
from scipy import ndimage

from feast.data_model import StickerAnnotation
from feast.errors import CornerSelectionError, InputError, SingularSystemError

CANONICAL_SIZE = (1050, 1485)  # width, height; A4 aspect at about 2 px/mm
LUMA = np.array([0.299, 0.587, 0.114])


@dataclass(frozen=True, eq=False)
class RasterImage:
    """8-bit RGB image stored as an ``(height, width, 3)`` array."""

    pixels: np.ndarray

    def __post_init__(self):
        px = np.asarray(self.pixels)
        if px.ndim != 3 or px.shape[2] != 3 or px.shape[0] < 1 or px.shape[1] < 1:
            raise InputError(f"expected an H x W x 3 image, got shape {px.shape}")
        object.__setattr__(self, "pixels", np.ascontiguousarray(px, dtype=np.uint8))

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @classmethod
    def from_buffer(cls, width: int, height: int, data: bytes) -> "RasterImage":
        if len(data) != 3 * width * height:
            raise InputError(f"buffer holds {len(data)} bytes, expected {3 * width * height}")
        return cls(np.frombuffer(data, dtype=np.uint8).reshape(height, width, 3))

    def gray(self) -> np.ndarray:
        return self.pixels.astype(float) @ LUMA


def load_image(path) -> RasterImage:
    """Read a PNG or JPEG photo as RGB."""
    from PIL import Image

    try:
        with Image.open(path) as im:
            return RasterImage(np.asarray(im.convert("RGB")))
    except FileNotFoundError as exc:
        raise InputError(f"image not found: {path}") from exc
    except OSError as exc:
        raise InputError(f"cannot decode image {path}: {exc}") from exc


def save_image(image: RasterImage, path) -> None:
    from PIL import Image

    Image.fromarray(image.pixels).save(path)


# --------------------------------------------------------------------------
# Corners and geometry
# --------------------------------------------------------------------------


def harris_response(gray: np.ndarray, window: int = 5, k: float = 0.04) -> np.ndarray:
    """``det(M) - k trace(M)^2`` with M a Gaussian-weighted sum over the window.

    The weights have sigma ``window / 5`` and are cut at the window edge; a
    flat box window would pull the peak about 1.5 px inside a step corner.
    """
    gx = ndimage.sobel(gray, axis=1, mode="nearest")
    gy = ndimage.sobel(gray, axis=0, mode="nearest")
    sigma = window / 5.0
    smooth = dict(sigma=sigma, mode="nearest", truncate=(window // 2) / sigma)
    sxx = ndimage.gaussian_filter(gx * gx, **smooth)
    syy = ndimage.gaussian_filter(gy * gy, **smooth)
    sxy = ndimage.gaussian_filter(gx * gy, **smooth)
    return sxx * syy - sxy * sxy - k * (sxx + syy) ** 2


def _subpixel(R: np.ndarray, y: int, x: int) -> tuple[float, float]:
    """Parabolic peak refinement along each axis, clamped to half a pixel."""
    h, w = R.shape
    dx = dy = 0.0
    if 0 < x < w - 1:
        a, b, c = R[y, x - 1], R[y, x], R[y, x + 1]
        den = a - 2 * b + c
        if den < 0:
            dx = float(np.clip(0.5 * (a - c) / den, -0.5, 0.5))
    if 0 < y < h - 1:
        a, b, c = R[y - 1, x], R[y, x], R[y + 1, x]
        den = a - 2 * b + c
        if den < 0:
            dy = float(np.clip(0.5 * (a - c) / den, -0.5, 0.5))
    return x + dx, y + dy


def harris_corners(
    image: Union[RasterImage, np.ndarray],
    window: int = 5,
    k: float = 0.04,
    threshold: float = 0.01,
) -> list[tuple[float, float, float]]:
    """Harris corners as ``(x, y, response)``, strongest first.

    ``threshold`` is a fraction of the maximum response. Candidates must be
    the maximum of their ``window`` x ``window`` neighborhood; a plateau of
    equal maxima yields one corner.
    """
    if window < 3 or window % 2 == 0:
        raise ValueError("window must be odd and at least 3")
    gray = image.gray() if isinstance(image, RasterImage) else np.asarray(image, dtype=float)
    if gray.shape[0] < window or gray.shape[1] < window:
        raise InputError(f"image {gray.shape[1]}x{gray.shape[0]} is smaller than the {window}px window")
    R = harris_response(gray, window, k)
    top = R.max()
    if top <= 0:
        return []
    peaks = (R == ndimage.maximum_filter(R, size=window, mode="nearest")) & (R > threshold * top)
    labels, n = ndimage.label(peaks, structure=np.ones((3, 3)))
    if n == 0:
        return []
    out = []
    for sl in ndimage.find_objects(labels):
        sub = R[sl]
        # one corner per plateau: its first (row-major) pixel
        yy, xx = np.unravel_index(np.argmax(sub), sub.shape)
        y, x = yy + sl[0].start, xx + sl[1].start
        fx, fy = _subpixel(R, y, x)
        out.append((fx, fy, float(R[y, x])))
    out.sort(key=lambda c: (-c[2], c[1], c[0]))
    return out


def refine_corner(gray: np.ndarray, x: float, y: float, half: int = 7, iters: int = 5) -> tuple[float, float]:
    """Subpixel corner where the local edge lines meet.

    Minimizes ``sum (g_p . (q - p))^2`` over pixels ``p`` in a window around
    the estimate, ``g_p`` being the image gradient; the minimizer is the
    point all edge tangents pass through. The window is re-centered a few
    times. Falls back to the input if the window is flat or one-directional.
    """
    h, w = gray.shape
    q = np.array([x, y], dtype=float)
    for _ in range(iters):
        cx, cy = int(round(q[0])), int(round(q[1]))
        x0, x1 = max(cx - half, 0), min(cx + half + 1, w)
        y0, y1 = max(cy - half, 0), min(cy + half + 1, h)
        if x1 <= x0 or y1 <= y0:
            return float(x), float(y)
        # gradients from a one-pixel padded patch match the full-image ones
        px0, py0 = max(x0 - 1, 0), max(y0 - 1, 0)
        patch = gray[py0:min(y1 + 1, h), px0:min(x1 + 1, w)]
        sl = (slice(y0 - py0, y1 - py0), slice(x0 - px0, x1 - px0))
        gxp = ndimage.sobel(patch, axis=1, mode="nearest")[sl]
        gyp = ndimage.sobel(patch, axis=0, mode="nearest")[sl]
        ys, xs = np.mgrid[y0:y1, x0:x1]
        g = np.stack([gxp.ravel(), gyp.ravel()], axis=1)
        p = np.stack([xs.ravel(), ys.ravel()], axis=1).astype(float)
        A = g.T @ g
        evals = np.linalg.eigvalsh(A)
        if evals[0] <= 1e-6 * max(evals[1], 1e-300):
            return float(x), float(y)
        b = (g * (g * p).sum(axis=1, keepdims=True)).sum(axis=0)
        q_new = np.linalg.solve(A, b)
        if np.hypot(*(q_new - [x, y])) > 2 * half:
            return float(x), float(y)
        moved = np.hypot(*(q_new - q))
        q = q_new
        if moved < 1e-3:
            break
    return float(q[0]), float(q[1])


@dataclass(frozen=True, eq=False)
class SheetGeometry:
    """Sheet corners in source pixels, ordered TL, TR, BR, BL."""

    corners: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.corners, dtype=float)
        if c.shape != (4, 2):
            raise ValueError("need exactly 4 corners")
        edges = np.roll(c, -1, axis=0) - c
        nxt = np.roll(edges, -1, axis=0)
        cross = edges[:, 0] * nxt[:, 1] - edges[:, 1] * nxt[:, 0]
        if not (np.all(cross > 0) or np.all(cross < 0)):
            raise CornerSelectionError("sheet corners do not form a strictly convex quadrilateral")
        object.__setattr__(self, "corners", c)


def select_sheet_corners(candidates: Sequence[tuple], width: int, height: int) -> SheetGeometry:
    """Per image quadrant, the candidate farthest from the image center."""
    if len(candidates) < 4:
        raise CornerSelectionError(f"need at least 4 corner candidates, got {len(candidates)}")
    cx, cy = (width - 1) / 2.0, (height - 1) / 2.0
    best = {}
    for cand in candidates:
        x, y = float(cand[0]), float(cand[1])
        quad = (y >= cy, x >= cx)
        dist = (x - cx) ** 2 + (y - cy) ** 2
        if quad not in best or dist > best[quad][0]:
            best[quad] = (dist, x, y)
    order = [(False, False), (False, True), (True, True), (True, False)]
    missing = [q for q in order if q not in best]
    if missing:
        names = {(False, False): "top-left", (False, True): "top-right",
                 (True, True): "bottom-right", (True, False): "bottom-left"}
        raise CornerSelectionError("no corner candidate in quadrant(s): " + ", ".join(names[q] for q in missing))
    return SheetGeometry(np.array([[best[q][1], best[q][2]] for q in order]))


def homography_from_points(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """DLT homography with ``H[2, 2] = 1`` mapping 4 source points onto 4 targets."""
    src = np.asarray(src, dtype=float)
    dst = np.asarray(dst, dtype=float)
    A = np.zeros((8, 8))
    b = np.zeros(8)
    for r, ((x, y), (u, v)) in enumerate(zip(src, dst)):
        A[2 * r] = [x, y, 1, 0, 0, 0, -u * x, -u * y]
        A[2 * r + 1] = [0, 0, 0, x, y, 1, -v * x, -v * y]
        b[2 * r], b[2 * r + 1] = u, v
    if np.linalg.cond(A) > 1e12:
        raise SingularSystemError("corner correspondences are degenerate (collinear points)")
    h = np.linalg.solve(A, b)
    return np.append(h, 1.0).reshape(3, 3)


def homography_from_corners(g: Union[SheetGeometry, np.ndarray], target_w: int, target_h: int) -> np.ndarray:
    """Map the sheet corners onto the ``target_w`` x ``target_h`` pixel rectangle."""
    corners = g.corners if isinstance(g, SheetGeometry) else np.asarray(g, dtype=float)
    dst = np.array([[0, 0], [target_w - 1, 0], [target_w - 1, target_h - 1], [0, target_h - 1]], dtype=float)
    return homography_from_points(corners, dst)


def apply_homography(H: np.ndarray, pts: np.ndarray) -> np.ndarray:
    pts = np.asarray(pts, dtype=float)
    hom = np.c_[pts, np.ones(len(pts))] @ H.T
    return hom[:, :2] / hom[:, 2:3]


def rectify(image: RasterImage, H: np.ndarray, target_w: int, target_h: int) -> RasterImage:
    """Warp ``image`` by ``H`` into a ``target_w`` x ``target_h`` frame.

    Every target pixel is pulled back through ``H^-1`` and sampled
    bilinearly; samples falling outside the source are black.
    """
    H = np.asarray(H, dtype=float)
    if H.shape != (3, 3) or abs(np.linalg.det(H)) < 1e-12 * max(np.abs(H).max(), 1.0) ** 3:
        raise SingularSystemError("homography is not invertible")
    Hinv = np.linalg.inv(H)
    ys, xs = np.mgrid[0:target_h, 0:target_w]
    tx = xs.ravel().astype(float)
    ty = ys.ravel().astype(float)
    den = Hinv[2, 0] * tx + Hinv[2, 1] * ty + Hinv[2, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        sx = (Hinv[0, 0] * tx + Hinv[0, 1] * ty + Hinv[0, 2]) / den
        sy = (Hinv[1, 0] * tx + Hinv[1, 1] * ty + Hinv[1, 2]) / den
    h, w = image.height, image.width
    eps = 1e-9
    inside = np.isfinite(sx) & np.isfinite(sy) & (sx >= -eps) & (sx <= w - 1 + eps) & (sy >= -eps) & (sy <= h - 1 + eps)
    out = np.zeros((target_h * target_w, 3), dtype=np.uint8)
    if inside.any():
        px = np.clip(sx[inside], 0, w - 1)
        py = np.clip(sy[inside], 0, h - 1)
        x0 = np.minimum(px.astype(np.intp), w - 2) if w > 1 else np.zeros(len(px), np.intp)
        y0 = np.minimum(py.astype(np.intp), h - 2) if h > 1 else np.zeros(len(py), np.intp)
        fx = (px - x0).astype(np.float32)[:, None]
        fy = (py - y0).astype(np.float32)[:, None]
        dx = 1 if w > 1 else 0
        dy = w if h > 1 else 0
        flat = image.pixels.reshape(-1, 3)
        base = y0 * w + x0
        top = flat[base] * (1 - fx) + flat[base + dx] * fx
        bottom = flat[base + dy] * (1 - fx) + flat[base + dy + dx] * fx
        out[inside] = np.clip(np.rint(top * (1 - fy) + bottom * fy), 0, 255)
    return RasterImage(out.reshape(target_h, target_w, 3))


# --------------------------------------------------------------------------
# Color and blobs
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class PaletteEntry:
    """HSV box for one sticker color; hue in degrees and may wrap (lo > hi)."""

    name: str
    hue: tuple[float, float]
    sat: tuple[float, float] = (0.35, 1.0)
    val: tuple[float, float] = (0.25, 1.0)

    def __post_init__(self):
        h0, h1 = self.hue
        if not (0 <= h0 <= 360 and 0 <= h1 <= 360):
            raise ValueError(f"{self.name}: hue bounds must lie in [0, 360]")
        for lo, hi in (self.sat, self.val):
            if not 0 <= lo <= hi <= 1:
                raise ValueError(f"{self.name}: saturation/value range must be nonempty within [0, 1]")


@dataclass(frozen=True)
class ColorPalette:
    entries: tuple[PaletteEntry, ...]

    def __post_init__(self):
        names = [e.name for e in self.entries]
        if len(set(names)) != len(names):
            raise ValueError("palette names must be unique")
        object.__setattr__(self, "entries", tuple(self.entries))

    def __getitem__(self, name: str) -> PaletteEntry:
        for e in self.entries:
            if e.name == name:
                return e
        raise KeyError(name)

    @classmethod
    def from_dict(cls, spec: Mapping[str, Mapping]) -> "ColorPalette":
        return cls(tuple(
            PaletteEntry(name, tuple(v["hue"]), tuple(v.get("sat", (0.35, 1.0))), tuple(v.get("val", (0.25, 1.0))))
            for name, v in spec.items()
        ))


DEFAULT_PALETTE = ColorPalette((
    PaletteEntry("red", (345.0, 15.0)),
    PaletteEntry("yellow", (45.0, 70.0)),
    PaletteEntry("green", (90.0, 160.0)),
    PaletteEntry("blue", (200.0, 250.0)),
    PaletteEntry("purple", (265.0, 300.0)),
))


def rgb_to_hsv(pixels: np.ndarray) -> np.ndarray:
    """Hue in degrees [0, 360), saturation and value in [0, 1]."""
    rgb = np.asarray(pixels, dtype=np.float32) / np.float32(255.0)
    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    mx = np.maximum(np.maximum(r, g), b)
    mn = np.minimum(np.minimum(r, g), b)
    c = mx - mn
    safe = np.where(c > 0, c, 1.0)
    hue = np.where(mx == r, ((g - b) / safe) % 6.0,
                   np.where(mx == g, (b - r) / safe + 2.0, (r - g) / safe + 4.0))
    hue = np.where(c > 0, hue * 60.0, 0.0)
    sat = np.where(mx > 0, c / np.where(mx > 0, mx, 1.0), 0.0)
    return np.stack([hue, sat, mx], axis=-1)


def threshold_hsv(image: Union[RasterImage, np.ndarray], entry: PaletteEntry) -> np.ndarray:
    """Boolean mask of pixels inside the entry's HSV box (bounds inclusive)."""
    px = image.pixels if isinstance(image, RasterImage) else image
    return _hsv_mask(rgb_to_hsv(px), entry)


@dataclass(frozen=True)
class Blob:
    centroid: tuple[float, float]  # (x, y)
    area: int


def detect_blobs(mask: np.ndarray, min_area: int = 1) -> list[Blob]:
    """8-connected components of ``mask`` with at least ``min_area`` pixels, largest first."""
    mask = np.asarray(mask, dtype=bool)
    labels, n = ndimage.label(mask, structure=np.ones((3, 3), dtype=int))
    if n == 0:
        return []
    flat = np.flatnonzero(labels)
    lab = labels.ravel()[flat]
    ys, xs = np.divmod(flat, mask.shape[1])
    areas = np.bincount(lab, minlength=n + 1)[1:]
    cx = np.bincount(lab, weights=xs, minlength=n + 1)[1:] / areas
    cy = np.bincount(lab, weights=ys, minlength=n + 1)[1:] / areas
    blobs = [Blob((float(x), float(y)), int(a)) for x, y, a in zip(cx, cy, areas) if a >= min_area]
    blobs.sort(key=lambda b: -b.area)
    return blobs


# --------------------------------------------------------------------------
# Whole sheet
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class DetectedSticker:
    color: str
    centroid: tuple[float, float]
    area: int


@dataclass(frozen=True, eq=False)
class SheetResult:
    annotations: tuple[StickerAnnotation, ...]
    stickers: tuple[DetectedSticker, ...]
    missing: tuple[str, ...]
    geometry: SheetGeometry
    homography: np.ndarray = field(repr=False)


def digitize_sheet(
    image: RasterImage,
    palette: ColorPalette,
    legend: Mapping[str, int],
    sheet_key: tuple[str, str, int],
    *,
    target_size: tuple[int, int] = CANONICAL_SIZE,
    window: int = 5,
    k: float = 0.04,
    threshold: float = 0.01,
    min_area: int = 20,
) -> SheetResult:
    """Detect the sheet, rectify it and emit one annotation per found color.

    ``sheet_key`` is ``(event_name, session_round_name, experiment_no)``.
    Legend colors with no qualifying blob are listed in ``missing``.
    """
    unknown = [c for c in legend if c not in {e.name for e in palette.entries}]
    if unknown:
        raise InputError(f"legend colors not in palette: {', '.join(sorted(unknown))}")
    tw, th = target_size
    gray = image.gray()
    corners = harris_corners(gray, window, k, threshold)
    rough = select_sheet_corners(corners, image.width, image.height)
    geometry = SheetGeometry(np.array([refine_corner(gray, x, y) for x, y in rough.corners]))
    H = homography_from_corners(geometry, tw, th)
    flat = rectify(image, H, tw, th)
    hsv = rgb_to_hsv(flat.pixels)
    event, session, exp_no = sheet_key
    annotations, stickers, missing = [], [], []
    for color, wine in legend.items():
        mask = _hsv_mask(hsv, palette[color])
        blobs = detect_blobs(mask, min_area)
        if not blobs:
            missing.append(color)
            continue
        top = blobs[0]
        stickers.append(DetectedSticker(color, top.centroid, top.area))
        annotations.append(StickerAnnotation(event, session, int(exp_no), int(wine),
                                             top.centroid[0], top.centroid[1], color))
    return SheetResult(tuple(annotations), tuple(stickers), tuple(missing), geometry, H)


def _hsv_mask(hsv: np.ndarray, entry: PaletteEntry) -> np.ndarray:
    h, s, v = hsv[..., 0], hsv[..., 1], hsv[..., 2]
    h0, h1 = entry.hue
    hue_ok = (h >= h0) & (h <= h1) if h0 <= h1 else (h >= h0) | (h <= h1)
    return hue_ok & (s >= entry.sat[0]) & (s <= entry.sat[1]) & (v >= entry.val[0]) & (v <= entry.val[1])
