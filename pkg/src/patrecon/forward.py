"""Matrix-free PAT forward model built on the exact time propagator.

The pressure field at time ``t`` is the initial pressure filtered in
k-space by ``cos(c0 |k| t)``. Sampling that field at the transducer nodes
for ``t_i = i * dt`` gives ``H``; its adjoint and the normal operator
``H^T H`` follow from the filter being real and even.

Two engines compute the same linear maps:

``"fused"``
    One spectral filter per time step, recomputed on the fly from the
    cached ``omega`` grid. ``H^T H`` is applied per step as filter, mask by
    the sensor image, filter, accumulate, so extra memory is a fixed number
    of grid-sized buffers regardless of ``M`` and ``L``.

``"shell"``
    Groups spectral bins with equal ``|k|``. Because the filter only
    depends on ``|k|``, sampling at a sensor reduces to a per-sensor sum of
    phase-shifted spectra over each shell followed by a small dense
    (shells x M) cosine product. Exact to rounding and much faster, at the
    cost of an ``O(n_shells * M + L * N)`` table.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import scipy.fft as sfft
import scipy.sparse as sp

from .errors import DegenerateSignalError, DimensionError, NumericError
from .grid import ImageGrid, Image, Measurements, SensorArray, _as_array

IMAG_TOLERANCE = 1e-10


@dataclass(frozen=True, eq=False)
class SpectralPlan:
    """Cached wavenumber grid ``omega = c0 * |k|`` (rad/us) for one grid."""

    grid: ImageGrid
    c0: float = 1.5
    workers: int | None = None
    omega: np.ndarray = field(init=False, repr=False)
    omega_half: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if not self.c0 > 0:
            raise ValueError("sound speed must be positive")
        g = self.grid
        kx = 2.0 * np.pi * np.fft.fftfreq(g.nx, d=g.dx)
        ky = 2.0 * np.pi * np.fft.fftfreq(g.ny, d=g.dy)
        kyh = 2.0 * np.pi * np.fft.rfftfreq(g.ny, d=g.dy)
        omega = self.c0 * np.sqrt(kx[:, None] ** 2 + ky[None, :] ** 2)
        omega_half = self.c0 * np.sqrt(kx[:, None] ** 2 + kyh[None, :] ** 2)
        omega.setflags(write=False)
        omega_half.setflags(write=False)
        object.__setattr__(self, "omega", omega)
        object.__setattr__(self, "omega_half", omega_half)

    @property
    def half_shape(self) -> tuple[int, int]:
        return (self.grid.nx, self.grid.ny // 2 + 1)

    def rfft(self, a):
        return sfft.rfft2(a, workers=self.workers)

    def irfft(self, a):
        return sfft.irfft2(a, s=self.grid.shape, workers=self.workers)


@dataclass(frozen=True)
class TimeGrid:
    """Sample times ``t_i = i * dt`` for ``i = first, ..., first + M - 1``."""

    m_samples: int
    dt: float = 0.01
    first: int = 1

    def __post_init__(self):
        if self.m_samples < 1:
            raise ValueError("m_samples must be >= 1")
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if self.first < 0:
            raise ValueError("first sample index must be >= 0")

    @property
    def times(self) -> np.ndarray:
        return (self.first + np.arange(self.m_samples)) * self.dt

    @property
    def duration(self) -> float:
        return (self.first + self.m_samples - 1) * self.dt


def propagate(plan: SpectralPlan, p0, t: float) -> np.ndarray:
    """Pressure field at time ``t`` from the initial pressure ``p0``."""
    p0 = plan.grid.check(_as_array(p0), "p0")
    if t < 0:
        raise ValueError("t must be non-negative")
    if not np.all(np.isfinite(p0)):
        raise NumericError("p0 contains non-finite values")
    field_ = sfft.ifft2(sfft.fft2(p0, workers=plan.workers) * np.cos(plan.omega * t),
                        workers=plan.workers)
    scale = np.linalg.norm(field_)
    if scale > 0 and np.linalg.norm(field_.imag) > IMAG_TOLERANCE * scale:
        raise NumericError("propagated field has a significant imaginary part")
    return np.ascontiguousarray(field_.real)


class _ShellTables:
    """Shell decomposition of the half spectrum for the ``"shell"`` engine."""

    def __init__(self, plan: SpectralPlan, sensors: SensorArray, times: TimeGrid,
                 phase_budget_bytes: float):
        g = plan.grid
        nxh, nyh = plan.half_shape
        self.n_half = nxh * nyh
        omega_half = plan.omega_half.ravel()
        shells, inverse = np.unique(omega_half, return_inverse=True)
        self.shell_of = inverse.ravel()
        col = np.arange(nyh)
        conj_pair = np.full(nyh, 2.0)
        conj_pair[0] = 1.0
        if g.ny % 2 == 0:
            conj_pair[-1] = 1.0
        weight = np.broadcast_to(conj_pair[col][None, :], (nxh, nyh)).ravel()
        # (n_half, n_shells) indicator carrying the Hermitian pair weight
        self.gather = sp.csr_matrix(
            (weight, (np.arange(self.n_half), self.shell_of)),
            shape=(self.n_half, shells.size)).T.tocsr()
        self.cos_table = np.cos(shells[:, None] * times.times[None, :])
        self.n_shells = shells.size

        kx = np.fft.fftfreq(g.nx) * g.nx
        ky = np.arange(nyh)
        pos = sensors.positions
        self._ex = np.exp(2j * np.pi * np.outer(pos[:, 0], kx) / g.nx)
        self._ey = np.exp(2j * np.pi * np.outer(pos[:, 1], ky) / g.ny)
        n_sensors = pos.shape[0]
        per_sensor = 16.0 * self.n_half
        self.chunk = max(1, int(phase_budget_bytes // per_sensor))
        self._cached = None
        if self.chunk >= n_sensors:
            self._cached = self._phases(slice(0, n_sensors))
            self.chunk = n_sensors
        self.n_sensors = n_sensors

    def _phases(self, sl):
        e = self._ex[sl, :, None] * self._ey[sl, None, :]
        return e.reshape(e.shape[0], -1)

    def chunks(self):
        for start in range(0, self.n_sensors, self.chunk):
            sl = slice(start, min(start + self.chunk, self.n_sensors))
            yield sl, (self._cached[sl] if self._cached is not None else self._phases(sl))


class ForwardModel:
    """``H``, ``H^T`` and ``H^T H`` for one plan, sensor array and time grid.

    Args:
        plan: spectral plan of the computational grid.
        sensors: transducer nodes, on ``plan.grid``.
        times: sample times.
        engine: ``"shell"`` (default, fast) or ``"fused"`` (per time step,
            ``O(N)`` memory).
        phase_budget_bytes: cap on cached sensor phase tables for the shell
            engine; above it phases are rebuilt chunk by chunk.
    """

    ENGINES = ("shell", "fused")

    def __init__(self, plan: SpectralPlan, sensors: SensorArray, times: TimeGrid,
                 engine: str = "shell", phase_budget_bytes: float = 256e6):
        if sensors.grid != plan.grid:
            raise DimensionError("sensor array and spectral plan use different grids")
        if engine not in self.ENGINES:
            raise ValueError(f"unknown engine {engine!r}; choose from {self.ENGINES}")
        self.plan = plan
        self.sensors = sensors
        self.times = times
        self.engine = engine
        self._phase_budget = phase_budget_bytes
        self._diag = None

    @property
    def grid(self) -> ImageGrid:
        return self.plan.grid

    @property
    def data_shape(self) -> tuple[int, int]:
        return (len(self.sensors), self.times.m_samples)

    @cached_property
    def _shells(self) -> _ShellTables:
        return _ShellTables(self.plan, self.sensors, self.times, self._phase_budget)

    def with_engine(self, engine: str) -> "ForwardModel":
        return ForwardModel(self.plan, self.sensors, self.times, engine, self._phase_budget)

    # -- public maps -------------------------------------------------------

    def forward(self, v) -> np.ndarray:
        v = self._check_image(v)
        return self._forward_shell(v) if self.engine == "shell" else self._forward_fused(v)

    def adjoint(self, u) -> np.ndarray:
        u = np.asarray(_meas_array(u), dtype=np.float64)
        if u.shape != self.data_shape:
            raise DimensionError(f"measurements have shape {u.shape}, expected {self.data_shape}")
        return self._adjoint_shell(u) if self.engine == "shell" else self._adjoint_fused(u)

    def normal(self, v) -> np.ndarray:
        v = self._check_image(v)
        if self.engine == "shell":
            return self._adjoint_shell(self._forward_shell(v))
        return self._normal_fused(v)

    __call__ = forward

    def normal_diagonal(self) -> np.ndarray:
        """Exact diagonal of ``H^T H``.

        Each ``P_t`` is a circular convolution with the symmetric kernel
        ``g_t``, so ``diag(H^T H) = mask (*) sum_t g_t^2``.
        """
        if self._diag is None:
            plan = self.plan
            energy = self.grid.zeros()
            for t in self.times.times:
                g = plan.irfft(np.cos(plan.omega_half * t).astype(np.complex128))
                energy += g * g
            mask = self.sensors.mask.astype(np.float64)
            self._diag = np.maximum(plan.irfft(plan.rfft(mask) * plan.rfft(energy)), 0.0)
        return self._diag

    # -- fused engine ------------------------------------------------------

    def _forward_fused(self, v):
        plan = self.plan
        ix, iy = self.sensors.positions[:, 0], self.sensors.positions[:, 1]
        spec = plan.rfft(v)
        out = np.empty(self.data_shape)
        for i, t in enumerate(self.times.times):
            out[:, i] = plan.irfft(spec * np.cos(plan.omega_half * t))[ix, iy]
        return out

    def _adjoint_fused(self, u):
        plan = self.plan
        ix, iy = self.sensors.positions[:, 0], self.sensors.positions[:, 1]
        acc = np.zeros(plan.half_shape, dtype=np.complex128)
        frame = self.grid.zeros()
        for i, t in enumerate(self.times.times):
            frame[ix, iy] = u[:, i]
            acc += np.cos(plan.omega_half * t) * plan.rfft(frame)
        return plan.irfft(acc)

    def _normal_fused(self, v):
        plan = self.plan
        mask = self.sensors.mask
        spec = plan.rfft(v)
        acc = np.zeros(plan.half_shape, dtype=np.complex128)
        for t in self.times.times:
            filt = np.cos(plan.omega_half * t)
            field_ = plan.irfft(spec * filt)
            field_ *= mask
            acc += filt * plan.rfft(field_)
        return plan.irfft(acc)

    # -- shell engine ------------------------------------------------------

    def _forward_shell(self, v):
        tab = self._shells
        spec = self.plan.rfft(v).ravel()
        per_shell = np.empty((tab.n_sensors, tab.n_shells))
        for sl, phase in tab.chunks():
            per_shell[sl] = (tab.gather @ (phase * spec).real.T).T
        return per_shell @ tab.cos_table / self.grid.size

    def _adjoint_shell(self, u):
        tab = self._shells
        coeff = u @ tab.cos_table.T
        spec = np.zeros(tab.n_half, dtype=np.complex128)
        for sl, phase in tab.chunks():
            spec += np.einsum("sk,sk->k", phase.conj(), coeff[sl][:, tab.shell_of])
        return self.plan.irfft(spec.reshape(self.plan.half_shape))

    def _check_image(self, v):
        v = self.grid.check(_as_array(v), "image")
        if not np.all(np.isfinite(v)):
            raise NumericError("input image contains non-finite values")
        return np.asarray(v, dtype=np.float64)


def _meas_array(u):
    return u.data if isinstance(u, Measurements) else u


def apply_H(plan: SpectralPlan, sensors: SensorArray, times: TimeGrid, p0,
            engine: str = "fused") -> Measurements:
    """Sample the propagated field at every sensor and time."""
    data = ForwardModel(plan, sensors, times, engine).forward(p0)
    return Measurements(data, times.dt)


def apply_Ht(plan: SpectralPlan, sensors: SensorArray, times: TimeGrid, meas,
             engine: str = "fused") -> np.ndarray:
    """Adjoint of :func:`apply_H`: back-propagate every sample and sum."""
    return ForwardModel(plan, sensors, times, engine).adjoint(meas)


def apply_HtH(plan: SpectralPlan, sensors: SensorArray, times: TimeGrid, v,
              engine: str = "fused") -> np.ndarray:
    """Normal operator ``H^T H v`` without materialising measurements."""
    return ForwardModel(plan, sensors, times, engine).normal(v)


def add_noise(clean: np.ndarray, snr_db, rng: np.random.Generator) -> np.ndarray:
    """Add white Gaussian noise so that ``20 log10(|clean| / |noise|) == snr_db``."""
    if snr_db is None:
        return clean.copy()
    snr_db = float(snr_db)
    if not np.isfinite(snr_db):
        raise ValueError("snr_db must be finite or None")
    signal = np.linalg.norm(clean)
    if signal == 0:
        raise DegenerateSignalError("cannot set an SNR on an all-zero signal")
    z = rng.standard_normal(clean.shape)
    return clean + z * (signal / (np.linalg.norm(z) * 10.0 ** (snr_db / 20.0)))


def simulate_data(plan: SpectralPlan, sensors: SensorArray, times: TimeGrid, phantom,
                  snr_db=None, seed: int = 0, fine_grid: bool = False,
                  engine: str = "shell") -> Measurements:
    """Noisy synthetic measurements of ``phantom``.

    With ``fine_grid`` the data are generated on a grid refined by two in
    each direction (pixel-replicated phantom, same physical sensor nodes)
    so that inversion does not reuse the identical discrete model.
    """
    phantom = plan.grid.check(_as_array(phantom), "phantom")
    if fine_grid:
        g = plan.grid
        if g.nx % 2 or g.ny % 2:
            raise DimensionError("fine-grid generation needs even grid sizes")
        fine = ImageGrid(2 * g.nx, 2 * g.ny, g.dx / 2, g.dy / 2)
        fplan = SpectralPlan(fine, plan.c0, plan.workers)
        fsensors = SensorArray(fine, 2 * sensors.positions, sensors.radius_mm)
        model = ForwardModel(fplan, fsensors, times, engine)
        clean = model.forward(np.kron(phantom, np.ones((2, 2))))
    else:
        clean = ForwardModel(plan, sensors, times, engine).forward(phantom)
    rng = np.random.default_rng(seed)
    data = add_noise(clean, snr_db, rng)
    meta = {"snr_db": snr_db, "seed": seed, "fine_grid": fine_grid, "c0": plan.c0}
    return Measurements(data, times.dt, metadata=meta)


def wraparound_margin(grid: ImageGrid, imaging_size_px: int, radius_mm: float,
                      c0: float, times: TimeGrid) -> float:
    """Slack (mm) before periodic wrap-around can reach the imaging region.

    Positive means the acoustic travel ``c0 * t_M`` stays below half the
    padding around the imaging region plus the sensor radius.
    """
    pad = (min(grid.extent) - imaging_size_px * min(grid.dx, grid.dy)) / 2.0
    return pad + radius_mm - c0 * times.duration


def check_wraparound(grid, imaging_size_px, radius_mm, c0, times) -> bool:
    margin = wraparound_margin(grid, imaging_size_px, radius_mm, c0, times)
    if margin <= 0:
        warnings.warn(f"acoustic travel exceeds the wrap-around margin by {-margin:.3g} mm; "
                      "enlarge the computational grid", RuntimeWarning, stacklevel=2)
        return False
    return True


class MatrixModel:
    """Explicit matrix ``H`` acting on images of ``shape`` (small problems only)."""

    def __init__(self, matrix: np.ndarray, shape: tuple[int, int], data_shape=None):
        self.matrix = np.asarray(matrix, dtype=np.float64)
        self.shape = tuple(shape)
        if self.matrix.shape[1] != self.shape[0] * self.shape[1]:
            raise DimensionError("matrix columns do not match the image size")
        self.data_shape = tuple(data_shape) if data_shape else (self.matrix.shape[0],)
        self.grid = ImageGrid(*self.shape)

    def forward(self, v):
        return (self.matrix @ np.asarray(v).ravel()).reshape(self.data_shape)

    def adjoint(self, u):
        return (self.matrix.T @ np.asarray(u).ravel()).reshape(self.shape)

    def normal(self, v):
        return self.adjoint(self.forward(v))

    def normal_diagonal(self):
        return np.sum(self.matrix ** 2, axis=0).reshape(self.shape)


def assemble_matrix(model) -> np.ndarray:
    """Dense ``H`` of ``model`` built column by column from unit impulses."""
    g = model.grid
    cols = []
    for j in range(g.size):
        e = np.zeros(g.size)
        e[j] = 1.0
        cols.append(np.asarray(model.forward(e.reshape(g.shape))).ravel())
    return np.stack(cols, axis=1)
