"""Single-view orthographic rendering along the PCA frame and mask back-projection.

Image convention: columns follow the first PCA axis, rows follow the second,
and depth increases along the third (camera on the negative side), so
(u, v, view) is the usual right-handed x-right / y-down / z-forward camera.
"""

import json
import re
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from . import _kernels
from .geometry import pca_frame

DEFAULT_RESOLUTION = (512, 512)
DEFAULT_MARGIN = 0.05
DEFAULT_SPLAT_RADIUS = 2
DEFAULT_DEPTH_QUANTILE = 0.6
MIN_RESOLUTION = 16
DEPTH_TOL = 1e-9  # relative to the cloud's extent


@dataclass(frozen=True, eq=False)
class ViewFrame:
    u_axis: np.ndarray
    v_axis: np.ndarray
    view_axis: np.ndarray
    centroid: np.ndarray
    scale: float  # pixels per metre
    resolution: tuple  # (width, height)
    center_uv: np.ndarray = field(default_factory=lambda: np.zeros(2))

    def __post_init__(self):
        w, h = self.resolution
        if w < MIN_RESOLUTION or h < MIN_RESOLUTION:
            raise ValueError(f"resolution must be at least {MIN_RESOLUTION}x{MIN_RESOLUTION}")
        if not self.scale > 0:
            raise ValueError("scale must be positive")

    @property
    def width(self):
        return int(self.resolution[0])

    @property
    def height(self):
        return int(self.resolution[1])

    def project(self, points):
        """Continuous image coordinates (x, y) and depth for (N, 3) points."""
        rel = np.asarray(points, dtype=np.float64) - self.centroid
        a = rel @ self.u_axis
        b = rel @ self.v_axis
        depth = rel @ self.view_axis
        x = (self.width - 1) / 2.0 + (a - self.center_uv[0]) * self.scale
        y = (self.height - 1) / 2.0 + (b - self.center_uv[1]) * self.scale
        return x, y, depth

    def pixels(self, points):
        """Integer (col, row) per point, rounding half up, plus depth."""
        x, y, depth = self.project(points)
        cols = np.clip(np.floor(x + 0.5).astype(np.int64), 0, self.width - 1)
        rows = np.clip(np.floor(y + 0.5).astype(np.int64), 0, self.height - 1)
        return cols, rows, depth


def compute_view(cloud, resolution=DEFAULT_RESOLUTION, margin_fraction=DEFAULT_MARGIN):
    if not 0.0 <= margin_fraction < 0.5:
        raise ValueError("margin_fraction must be in [0, 0.5)")
    frame = pca_frame(cloud)
    u, v, view = frame.axes
    rel = cloud.points - frame.centroid
    a = rel @ u
    b = rel @ v
    w, h = int(resolution[0]), int(resolution[1])
    span_a = a.max() - a.min()
    span_b = b.max() - b.min()
    usable = 1.0 - 2.0 * margin_fraction
    limits = []
    if span_a > 0:
        limits.append((w - 1) * usable / span_a)
    if span_b > 0:
        limits.append((h - 1) * usable / span_b)
    scale = min(limits)
    center = np.array([(a.max() + a.min()) / 2.0, (b.max() + b.min()) / 2.0])
    return ViewFrame(u, v, view, frame.centroid, float(scale), (w, h), center)


@dataclass(frozen=True, eq=False)
class RenderResult:
    """Depth image plus the pixel <-> visible-point correspondence.

    ``point_pixel[i]`` is the flat pixel index (row * width + col) of point i,
    or -1 when the point is hidden.
    """

    image: np.ndarray
    point_pixel: np.ndarray
    width: int
    height: int

    @cached_property
    def pixel_points(self):
        out = {}
        for i in np.flatnonzero(self.point_pixel >= 0).tolist():
            p = int(self.point_pixel[i])
            out.setdefault((p % self.width, p // self.width), []).append(i)
        return out

    @property
    def visible(self):
        return np.flatnonzero(self.point_pixel >= 0)

    def pixel_of(self, index):
        p = int(self.point_pixel[index])
        if p < 0:
            return None
        return (p % self.width, p // self.width)


def render(cloud, view, splat_radius_px=DEFAULT_SPLAT_RADIUS, depth_quantile=DEFAULT_DEPTH_QUANTILE):
    """Rasterize ``cloud`` in ``view``.

    A point is visible when its depth lies in the front ``depth_quantile``
    fraction of the depth range seen within ``splat_radius_px`` of its pixel.
    The image stores the nearest depth per pixel scaled to 0..255 (255 empty).
    """
    if splat_radius_px < 0:
        raise ValueError("splat_radius_px must be >= 0")
    if not 0.0 <= depth_quantile <= 1.0:
        raise ValueError("depth_quantile must be in [0, 1]")
    cols, rows, depth = view.pixels(cloud.points)
    w, h = view.width, view.height
    # depths of a flat patch scatter by a few ulps of the cloud's size
    rel = cloud.points - view.centroid
    tol = DEPTH_TOL * float(np.abs(rel).max(initial=0.0))
    visible, pmin = _kernels.raster(cols, rows, depth, w, h, splat_radius_px, depth_quantile, tol)
    flat = rows * w + cols
    point_pixel = np.where(visible, flat, -1).astype(np.int64)

    image = np.full(w * h, 255, dtype=np.uint8)
    filled = np.isfinite(pmin)
    dlo, dhi = depth.min(), depth.max()
    if dhi > dlo:
        image[filled] = np.floor((pmin[filled] - dlo) / (dhi - dlo) * 255.0 + 0.5).astype(np.uint8)
    else:
        image[filled] = 0
    image = image.reshape(h, w)
    image.setflags(write=False)
    point_pixel.setflags(write=False)
    return RenderResult(image, point_pixel, w, h)


@dataclass(frozen=True, eq=False)
class Mask2D:
    id: int
    bitmap: np.ndarray  # (height, width) bool

    def __post_init__(self):
        bm = np.asarray(self.bitmap, dtype=bool)
        if bm.ndim != 2:
            raise ValueError("mask bitmap must be 2-D")
        if not bm.any():
            raise ValueError(f"mask {self.id} is empty")
        object.__setattr__(self, "bitmap", bm)

    @property
    def area(self):
        return int(self.bitmap.sum())


def backproject(mask, rr):
    """Indices of visible points whose pixel lies inside ``mask``."""
    bm = np.asarray(mask.bitmap if isinstance(mask, Mask2D) else mask, dtype=bool)
    if bm.shape != (rr.height, rr.width):
        raise ValueError(f"mask shape {bm.shape} does not match render {(rr.height, rr.width)}")
    vis = rr.point_pixel >= 0
    hit = np.zeros(rr.point_pixel.shape[0], dtype=bool)
    hit[vis] = bm.ravel()[rr.point_pixel[vis]]
    return np.flatnonzero(hit)


def rle_encode(bitmap):
    """Row-major run lengths, alternating skip/fill, starting with skip."""
    flat = np.asarray(bitmap, dtype=np.int8).ravel()
    edges = np.flatnonzero(np.diff(np.concatenate(([0], flat, [0]))))
    bounds = np.concatenate(([0], edges))
    runs = np.diff(bounds).tolist()
    tail = flat.size - int(bounds[-1])
    if tail:
        runs.append(tail)
    return [int(r) for r in runs]


def rle_decode(runs, resolution):
    w, h = int(resolution[0]), int(resolution[1])
    total = sum(runs)
    if any(r < 0 for r in runs) or total > w * h:
        raise ValueError("run lengths exceed the image size")
    flat = np.zeros(w * h, dtype=bool)
    pos = 0
    for k, r in enumerate(runs):
        if k % 2 == 1:
            flat[pos : pos + r] = True
        pos += r
    return flat.reshape(h, w)


def masks_to_dict(masks):
    return {"masks": [{"id": int(m.id), "rle": rle_encode(m.bitmap)} for m in masks]}


def masks_from_dict(data, resolution):
    masks = []
    for entry in data["masks"]:
        bm = rle_decode(entry["rle"], resolution)
        if bm.any():
            masks.append(Mask2D(int(entry["id"]), bm))
    return masks


def write_masks_json(path, masks):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(json.dumps(masks_to_dict(masks)) + "\n")


def pgm_bytes(image):
    img = np.asarray(image, dtype=np.uint8)
    h, w = img.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + img.tobytes()


def write_pgm(path, image):
    with open(path, "wb") as fh:
        fh.write(pgm_bytes(image))


def read_pgm(path):
    with open(path, "rb") as fh:
        data = fh.read()
    m = re.match(rb"P5\s+(\d+)\s+(\d+)\s+(\d+)\s", data)
    if m is None:
        raise ValueError("not a binary PGM")
    w, h, maxval = (int(g) for g in m.groups())
    if maxval != 255:
        raise ValueError("only 8-bit PGM supported")
    return np.frombuffer(data[m.end() : m.end() + w * h], dtype=np.uint8).reshape(h, w)
