"""Procedural numerical phantoms for simulation studies.

All generators return a square image of ``size_px`` pixels with minimum 0
and maximum exactly ``amplitude``. Pixel ``(i, j)`` is centred at
``(i - size//2, j - size//2)`` in pixel units, matching
:meth:`ImageGrid.center_region`.

Derenzo layout
--------------
Six 60 degree sectors, sector ``k`` spanning angles ``[60k, 60(k+1))``
counter-clockwise from +x. Sector ``k`` holds rods of radius
``DERENZO_RADII[k] * size`` on a triangular lattice with centre spacing
four radii, aligned with the sector edges and clipped to a disc of radius
``DERENZO_OUTER * size``. :func:`derenzo_layout` lists the rods.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DimensionError
from .grid import Image, ImageGrid

DERENZO_RADII = (0.016, 0.020, 0.025, 0.032, 0.040, 0.050)
DERENZO_OUTER = 0.46
_SUPERSAMPLE = 4

KINDS = ("derenzo", "vessel", "disks", "file")


@dataclass(frozen=True)
class PhantomSpec:
    kind: str = "derenzo"
    size_px: int = 128
    amplitude: float = 1.0
    seed: int = 0
    path: str | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown phantom kind {self.kind!r}; choose from {KINDS}")
        if self.size_px < 16:
            raise ValueError("size_px must be >= 16")
        if not self.amplitude > 0:
            raise ValueError("amplitude must be positive")
        if self.kind == "file" and not self.path:
            raise ValueError("file phantoms need a path")


def _subpixel_coords(n: int):
    s = _SUPERSAMPLE
    off = (np.arange(s) + 0.5) / s - 0.5
    c = (np.arange(n) - n // 2)[:, None] + off[None, :]
    return c.ravel()


def _downsample(fine: np.ndarray, n: int) -> np.ndarray:
    s = _SUPERSAMPLE
    return fine.reshape(n, s, n, s).mean(axis=(1, 3))


def derenzo_layout(size: int) -> list[tuple[int, float, float, float]]:
    """Rod list ``(sector, cx, cy, radius)`` in pixel units."""
    rods = []
    outer = DERENZO_OUTER * size
    for k, frac in enumerate(DERENZO_RADII):
        r = frac * size
        d = 4.0 * r
        th = np.deg2rad(60.0 * k)
        a1 = d * np.array([np.cos(th), np.sin(th)])
        a2 = d * np.array([np.cos(th + np.pi / 3), np.sin(th + np.pi / 3)])
        bis = np.array([np.cos(th + np.pi / 6), np.sin(th + np.pi / 6)])
        # half the lattice gap of clearance to each sector edge
        origin = bis * 2.0 * (r + r + 0.5)
        n_max = int(outer / d) + 2
        for i in range(n_max):
            for j in range(n_max - i):
                c = origin + i * a1 + j * a2
                if np.hypot(*c) + r <= outer:
                    rods.append((k, float(c[0]), float(c[1]), float(r)))
    return rods


def _disc_coverage(n: int, shapes) -> np.ndarray:
    """Supersampled union of discs ``(cx, cy, r, value)`` (max-composited)."""
    u = _subpixel_coords(n)
    fine = np.zeros((u.size, u.size))
    for cx, cy, r, val in shapes:
        lo_x, hi_x = np.searchsorted(u, [cx - r - 1, cx + r + 1])
        lo_y, hi_y = np.searchsorted(u, [cy - r - 1, cy + r + 1])
        ux, uy = u[lo_x:hi_x, None], u[None, lo_y:hi_y]
        inside = (ux - cx) ** 2 + (uy - cy) ** 2 <= r * r
        patch = fine[lo_x:hi_x, lo_y:hi_y]
        np.maximum(patch, np.where(inside, val, 0.0), out=patch)
    return _downsample(fine, n)


def derenzo(size: int) -> np.ndarray:
    rods = derenzo_layout(size)
    return _disc_coverage(size, [(cx, cy, r, 1.0) for _, cx, cy, r in rods])


def disks(size: int) -> np.ndarray:
    """Fixed arrangement of filled discs, a ring and a bar at varying levels."""
    s = size / 128.0
    shapes = [
        (-30 * s, -28 * s, 12 * s, 1.0),
        (28 * s, -30 * s, 8 * s, 0.7),
        (30 * s, 26 * s, 5 * s, 0.9),
        (-6 * s, 34 * s, 3 * s, 0.6),
        (6.0 * s, 6.0 * s, 2.5 * s, 0.8),
    ]
    img = _disc_coverage(size, shapes)
    u = _subpixel_coords(size)
    ux, uy = u[:, None], u[None, :]
    rad = np.hypot(ux + 26 * s, uy - 24 * s)
    ring = ((rad <= 14 * s) & (rad >= 10 * s)) * 0.75
    bar = ((np.abs(ux - 2 * s) <= 24 * s) & (np.abs(uy + 4 * s) <= 2.5 * s)) * 0.5
    fine = np.maximum(ring, bar)
    img = np.maximum(img, _downsample(fine, size))
    return img


def vessel(size: int, seed: int = 0) -> np.ndarray:
    """Random smooth branching curves with tapering thickness."""
    rng = np.random.default_rng(seed)
    half = size / 2.0
    limit = 0.45 * size
    points = []

    def grow(p, heading, width, length, depth):
        step = 0.5
        turn = 0.0
        for _ in range(int(length / step)):
            turn = 0.9 * turn + rng.normal(0.0, 0.04)
            heading += turn
            p = p + step * np.array([np.cos(heading), np.sin(heading)])
            if np.max(np.abs(p)) > limit:
                return
            points.append((p[0], p[1], width))
            width = max(0.6, width * 0.9985)
            if depth < 3 and rng.random() < 0.012:
                side = rng.choice([-1.0, 1.0])
                grow(p.copy(), heading + side * rng.uniform(0.4, 0.9), width * 0.7,
                     length * 0.5, depth + 1)

    for _ in range(3):
        ang = rng.uniform(0, 2 * np.pi)
        start = -0.85 * limit * np.array([np.cos(ang), np.sin(ang)])
        grow(start, ang + rng.normal(0, 0.3), rng.uniform(1.6, 2.6) * size / 128.0,
             1.6 * half, 0)

    ix = np.arange(size) - size // 2
    px, py = ix[:, None], ix[None, :]
    img = np.zeros((size, size))
    for cx, cy, w in points:
        lo_x, hi_x = max(0, int(cx + size // 2 - w - 2)), min(size, int(cx + size // 2 + w + 3))
        lo_y, hi_y = max(0, int(cy + size // 2 - w - 2)), min(size, int(cy + size // 2 + w + 3))
        if hi_x <= lo_x or hi_y <= lo_y:
            continue
        d = np.hypot(px[lo_x:hi_x] - cx, py[:, lo_y:hi_y] - cy)
        val = np.clip(w + 0.5 - d, 0.0, 1.0)
        np.maximum(img[lo_x:hi_x, lo_y:hi_y], val, out=img[lo_x:hi_x, lo_y:hi_y])
    return img


def load_phantom_file(path, size: int) -> np.ndarray:
    from . import io as pio

    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(path)
    if path.suffix.lower() == ".png":
        arr = pio.read_png_grayscale(path)
    else:
        arr = pio.read_array(path)[0]
    if arr.shape != (size, size):
        raise pio.FileFormatError(f"{path} holds a {arr.shape} image, expected {(size, size)}")
    return arr


def make_phantom(spec: PhantomSpec) -> Image:
    n = spec.size_px
    if spec.kind == "derenzo":
        img = derenzo(n)
    elif spec.kind == "vessel":
        img = vessel(n, spec.seed)
    elif spec.kind == "disks":
        img = disks(n)
    else:
        img = load_phantom_file(spec.path, n)
    img = np.clip(img, 0.0, None)
    peak = img.max()
    if peak <= 0:
        raise ValueError("phantom is identically zero")
    img = img / peak * spec.amplitude
    return Image(ImageGrid(n, n), img)


def embed_centered(image, grid: ImageGrid) -> np.ndarray:
    """Place a square phantom in the centre of a larger computational grid."""
    data = image.data if isinstance(image, Image) else np.asarray(image)
    if data.shape[0] != data.shape[1]:
        raise DimensionError("phantom must be square")
    out = grid.zeros()
    out[grid.center_region(data.shape[0])] = data
    return out
