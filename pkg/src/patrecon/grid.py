"""Grids, images, sensor arrays and measurement containers.

Images are stored as C-ordered ``(nx, ny)`` float arrays indexed ``[ix, iy]``;
flattening with ``ravel()`` is the vector layout used everywhere (``x`` is
the slow index). Physical coordinates are ``x = (ix - nx // 2) * dx`` so the
grid centre sits on a pixel. Units are mm, microseconds and Pa.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError, GeometryError, NumericError, ResolutionError


@dataclass(frozen=True)
class ImageGrid:
    nx: int
    ny: int
    dx: float = 0.1
    dy: float = 0.1

    def __post_init__(self):
        if int(self.nx) != self.nx or int(self.ny) != self.ny:
            raise DimensionError("grid sizes must be integers")
        if self.nx < 2 or self.ny < 2:
            raise DimensionError(f"grid must be at least 2x2, got {self.nx}x{self.ny}")
        if not (self.dx > 0 and self.dy > 0):
            raise DimensionError("grid spacing must be positive")

    @property
    def shape(self) -> tuple[int, int]:
        return (self.nx, self.ny)

    @property
    def size(self) -> int:
        return self.nx * self.ny

    @property
    def extent(self) -> tuple[float, float]:
        """Physical size ``(nx*dx, ny*dy)`` in mm."""
        return (self.nx * self.dx, self.ny * self.dy)

    @property
    def spacing(self) -> tuple[float, float]:
        return (self.dx, self.dy)

    def coordinates(self) -> tuple[np.ndarray, np.ndarray]:
        x = (np.arange(self.nx) - self.nx // 2) * self.dx
        y = (np.arange(self.ny) - self.ny // 2) * self.dy
        return x, y

    def center_region(self, size: int | tuple[int, int]) -> tuple[slice, slice]:
        """Slices of the ``size`` square (or rectangle) centred on the grid.

        The region is laid out so that its own centre pixel (``size // 2``)
        coincides with the grid centre pixel.
        """
        sx, sy = (size, size) if np.isscalar(size) else size
        if sx > self.nx or sy > self.ny or sx < 1 or sy < 1:
            raise DimensionError(f"region {sx}x{sy} does not fit grid {self.nx}x{self.ny}")
        x0 = self.nx // 2 - sx // 2
        y0 = self.ny // 2 - sy // 2
        return (slice(x0, x0 + sx), slice(y0, y0 + sy))

    def check(self, arr: np.ndarray, name: str = "image") -> np.ndarray:
        arr = np.asarray(arr)
        if arr.shape != self.shape:
            raise DimensionError(f"{name} has shape {arr.shape}, grid is {self.shape}")
        return arr

    def zeros(self) -> np.ndarray:
        return np.zeros(self.shape)


@dataclass(frozen=True)
class Image:
    """A real scalar field on an :class:`ImageGrid`."""

    grid: ImageGrid
    data: np.ndarray

    def __post_init__(self):
        data = np.array(self.data, dtype=np.float64, order="C")
        if data.ndim == 1:
            if data.size != self.grid.size:
                raise DimensionError(f"data length {data.size} != {self.grid.size}")
            data = data.reshape(self.grid.shape)
        self.grid.check(data, "image data")
        if not np.all(np.isfinite(data)):
            raise NumericError("image contains non-finite values")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)

    def vector(self) -> np.ndarray:
        return self.data.ravel()

    @classmethod
    def from_vector(cls, grid: ImageGrid, vec: np.ndarray) -> "Image":
        return cls(grid, np.asarray(vec).reshape(grid.shape))


@dataclass(frozen=True, eq=False)
class SensorArray:
    """Point transducers located on grid nodes.

    ``positions`` is an ``(L, 2)`` integer array of ``(ix, iy)`` indices and
    ``mask`` the binary image that equals one at exactly those nodes.
    """

    grid: ImageGrid
    positions: np.ndarray
    radius_mm: float = float("nan")
    mask: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        pos = np.array(self.positions, dtype=np.int64).reshape(-1, 2)
        if pos.shape[0] < 1:
            raise GeometryError("sensor array is empty")
        g = self.grid
        if np.any(pos < 0) or np.any(pos[:, 0] >= g.nx) or np.any(pos[:, 1] >= g.ny):
            raise GeometryError("sensor position outside the grid")
        flat = pos[:, 0] * g.ny + pos[:, 1]
        if np.unique(flat).size != flat.size:
            raise ResolutionError("sensor positions are not distinct")
        mask = np.zeros(g.shape)
        mask[pos[:, 0], pos[:, 1]] = 1.0
        pos.setflags(write=False)
        mask.setflags(write=False)
        object.__setattr__(self, "positions", pos)
        object.__setattr__(self, "mask", mask)

    def __len__(self) -> int:
        return self.positions.shape[0]

    @property
    def n_sensors(self) -> int:
        return len(self)


@dataclass(frozen=True, eq=False)
class Measurements:
    """Pressure time series, one row per sensor, sampled every ``dt`` us."""

    data: np.ndarray
    dt: float
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        data = np.array(self.data, dtype=np.float64, order="C")
        if data.ndim != 2:
            raise DimensionError(f"measurements must be 2-D (L, M), got {data.shape}")
        if not self.dt > 0:
            raise DimensionError("dt must be positive")
        if not np.all(np.isfinite(data)):
            raise NumericError("measurements contain non-finite values")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)

    @property
    def l_sensors(self) -> int:
        return self.data.shape[0]

    @property
    def m_samples(self) -> int:
        return self.data.shape[1]


def _round_half_down(v):
    # nearest integer, ties toward the smaller index
    return np.ceil(np.asarray(v) - 0.5).astype(np.int64)


def make_circular_array(grid: ImageGrid, center=(0.0, 0.0), radius: float = 12.0,
                        l_sensors: int = 128) -> SensorArray:
    """Place ``l_sensors`` transducers uniformly on a circle.

    Angles start at 0 on the +x axis and advance counter-clockwise. Each
    point is snapped to the nearest grid node.

    Raises:
        GeometryError: if a snapped sensor falls outside the grid.
        ResolutionError: if two sensors snap onto the same node.
    """
    if l_sensors < 1:
        raise GeometryError("l_sensors must be >= 1")
    if radius < 0:
        raise GeometryError("radius must be non-negative")
    theta = 2.0 * np.pi * np.arange(l_sensors) / l_sensors
    fx = (center[0] + radius * np.cos(theta)) / grid.dx + grid.nx // 2
    fy = (center[1] + radius * np.sin(theta)) / grid.dy + grid.ny // 2
    ix, iy = _round_half_down(fx), _round_half_down(fy)
    if np.any(ix < 0) or np.any(ix >= grid.nx) or np.any(iy < 0) or np.any(iy >= grid.ny):
        raise GeometryError(
            f"circle of radius {radius} mm about {center} leaves the "
            f"{grid.extent[0]:g}x{grid.extent[1]:g} mm grid")
    pos = np.stack([ix, iy], axis=1)
    flat = ix * grid.ny + iy
    uniq, counts = np.unique(flat, return_counts=True)
    if np.any(counts > 1):
        raise ResolutionError(
            f"{int(np.sum(counts > 1))} grid nodes receive more than one of the "
            f"{l_sensors} sensors; refine the grid or reduce the sensor count")
    return SensorArray(grid, pos, radius_mm=float(radius))


def extract_samples(field: np.ndarray, sensors: SensorArray) -> np.ndarray:
    """Gather ``field`` at the sensor nodes, in sensor order."""
    field = sensors.grid.check(_as_array(field), "field")
    return field[sensors.positions[:, 0], sensors.positions[:, 1]]


def embed_samples(samples: np.ndarray, sensors: SensorArray) -> np.ndarray:
    """Scatter one value per sensor into an otherwise zero image."""
    samples = np.asarray(samples, dtype=np.float64)
    if samples.shape != (len(sensors),):
        raise DimensionError(f"expected {len(sensors)} samples, got shape {samples.shape}")
    out = sensors.grid.zeros()
    out[sensors.positions[:, 0], sensors.positions[:, 1]] = samples
    return out


def _as_array(x):
    return x.data if isinstance(x, Image) else np.asarray(x)
