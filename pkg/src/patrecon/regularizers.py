"""Derivative filters, regularization functionals and their weight operators.

Stencils are applied only where they fit inside the image; output pixels
whose stencil would cross the border are zero. This makes every filter
annihilate constants on the whole grid, and the adjoint is the exact
transpose of that rule (scatter of the same stencil).
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from .errors import DimensionError

SQRT2 = np.sqrt(2.0)


@dataclass(frozen=True)
class Stencil:
    """Small correlation stencil: ``out[p] = sum(coef * x[p + offset])``."""

    name: str
    taps: tuple[tuple[int, int, float], ...]

    def _window(self, shape):
        dxs = [t[0] for t in self.taps]
        dys = [t[1] for t in self.taps]
        lo_x, hi_x = -min(dxs), shape[0] - max(dxs)
        lo_y, hi_y = -min(dys), shape[1] - max(dys)
        return lo_x, hi_x, lo_y, hi_y

    def apply(self, x: np.ndarray) -> np.ndarray:
        out = np.zeros_like(x, dtype=np.float64)
        lo_x, hi_x, lo_y, hi_y = self._window(x.shape)
        if hi_x <= lo_x or hi_y <= lo_y:
            return out
        core = out[lo_x:hi_x, lo_y:hi_y]
        for ox, oy, c in self.taps:
            core += c * x[lo_x + ox:hi_x + ox, lo_y + oy:hi_y + oy]
        return out

    def adjoint(self, y: np.ndarray) -> np.ndarray:
        out = np.zeros_like(y, dtype=np.float64)
        lo_x, hi_x, lo_y, hi_y = self._window(y.shape)
        if hi_x <= lo_x or hi_y <= lo_y:
            return out
        core = y[lo_x:hi_x, lo_y:hi_y]
        for ox, oy, c in self.taps:
            out[lo_x + ox:hi_x + ox, lo_y + oy:hi_y + oy] += c * core
        return out

    def gram_diagonal(self, w: np.ndarray) -> np.ndarray:
        """Diagonal of ``D^T diag(w) D``."""
        out = np.zeros_like(w, dtype=np.float64)
        lo_x, hi_x, lo_y, hi_y = self._window(w.shape)
        if hi_x <= lo_x or hi_y <= lo_y:
            return out
        core = w[lo_x:hi_x, lo_y:hi_y]
        for ox, oy, c in self.taps:
            out[lo_x + ox:hi_x + ox, lo_y + oy:hi_y + oy] += c * c * core
        return out

    @property
    def norm_bound(self) -> float:
        """Upper bound on the operator 2-norm (sum of absolute taps)."""
        return float(sum(abs(c) for _, _, c in self.taps))


@dataclass(frozen=True)
class DerivativeBank:
    """First- or second-order derivative filters ``D_{o,i}``.

    Order 1: d/dx, d/dy as forward differences. Order 2: d2/dx2 and d2/dy2
    as centred ``[1, -2, 1]`` and sqrt(2) d2/dxdy as the outer product of
    forward differences. ``spacing`` scales the stencils by ``1/dx`` etc.;
    the default is pixel units.
    """

    order: int = 2
    spacing: tuple[float, float] = (1.0, 1.0)
    filters: tuple[Stencil, ...] = field(init=False, repr=False)

    def __post_init__(self):
        if self.order not in (1, 2):
            raise ValueError("derivative order must be 1 or 2")
        dx, dy = self.spacing
        if self.order == 1:
            filters = (
                Stencil("dx", ((0, 0, -1.0 / dx), (1, 0, 1.0 / dx))),
                Stencil("dy", ((0, 0, -1.0 / dy), (0, 1, 1.0 / dy))),
            )
        else:
            cx, cy, cxy = 1.0 / dx ** 2, 1.0 / dy ** 2, SQRT2 / (dx * dy)
            filters = (
                Stencil("dxx", ((-1, 0, cx), (0, 0, -2.0 * cx), (1, 0, cx))),
                Stencil("dyy", ((0, -1, cy), (0, 0, -2.0 * cy), (0, 1, cy))),
                Stencil("dxy", ((0, 0, cxy), (1, 0, -cxy), (0, 1, -cxy), (1, 1, cxy))),
            )
        object.__setattr__(self, "filters", filters)

    def __len__(self):
        return len(self.filters)

    def apply(self, x: np.ndarray) -> np.ndarray:
        """Stack of filtered images, shape ``(n_filters,) + x.shape``."""
        return np.stack([f.apply(x) for f in self.filters])

    def adjoint(self, y: np.ndarray) -> np.ndarray:
        """``sum_i D_i^T y[i]``."""
        if y.shape[0] != len(self.filters):
            raise DimensionError(f"expected {len(self.filters)} channels, got {y.shape[0]}")
        out = self.filters[0].adjoint(y[0])
        for f, yi in zip(self.filters[1:], y[1:]):
            out += f.adjoint(yi)
        return out

    def gram(self, x: np.ndarray) -> np.ndarray:
        """``sum_i D_i^T D_i x``."""
        return self.adjoint(self.apply(x))

    def gram_diagonal(self, w: np.ndarray) -> np.ndarray:
        """Diagonal of ``sum_i D_i^T diag(w) D_i``."""
        out = self.filters[0].gram_diagonal(w)
        for f in self.filters[1:]:
            out += f.gram_diagonal(w)
        return out

    def squared_magnitude(self, x: np.ndarray) -> np.ndarray:
        """Per-pixel ``sum_i (D_i x)^2``."""
        d = self.apply(x)
        return np.einsum("i...,i...->...", d, d)

    @property
    def norm_bound_sq(self) -> float:
        """Upper bound on ``|| sum_i D_i^T D_i ||``."""
        return float(sum(f.norm_bound ** 2 for f in self.filters))


@dataclass(frozen=True)
class RegParams:
    """Parameters of the jointly-sparse regularizers.

    ``q == 1`` is accepted for the quadratic initialisation path.
    """

    alpha: float = 0.5
    epsilon: float = 1e-6
    q: float = 0.5
    form: int = 1
    order: int = 2

    def __post_init__(self):
        if not 0.0 < self.alpha < 1.0:
            raise ValueError("alpha must lie in (0, 1)")
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")
        if not (0.0 < self.q <= 0.5 or self.q == 1.0):
            raise ValueError("q must lie in (0, 0.5] or equal 1")
        if self.form not in (1, 2):
            raise ValueError("form must be 1 or 2")
        if self.order not in (1, 2):
            raise ValueError("order must be 1 or 2")

    def with_q(self, q: float) -> "RegParams":
        return replace(self, q=q)


def _bank(p: RegParams, bank: DerivativeBank | None) -> DerivativeBank:
    if bank is None:
        return DerivativeBank(p.order)
    if bank.order != p.order:
        raise ValueError(f"bank order {bank.order} != parameter order {p.order}")
    return bank


def eval_Rh1(x: np.ndarray, p: RegParams, bank: DerivativeBank | None = None) -> float:
    """``sum_r (eps + alpha x_r^2 + (1 - alpha) sum_i (D_i x)_r^2) ** q``."""
    d2 = _bank(p, bank).squared_magnitude(x)
    return float(np.sum((p.epsilon + p.alpha * x * x + (1.0 - p.alpha) * d2) ** p.q))


def eval_Rh2(x: np.ndarray, p: RegParams, bank: DerivativeBank | None = None) -> float:
    """``alpha sum (eps + x^2)^q + (1 - alpha) sum (eps + sum_i (D_i x)^2)^q``."""
    d2 = _bank(p, bank).squared_magnitude(x)
    intensity = np.sum((p.epsilon + x * x) ** p.q)
    derivative = np.sum((p.epsilon + d2) ** p.q)
    return float(p.alpha * intensity + (1.0 - p.alpha) * derivative)


def eval_regularizer(x, p: RegParams, bank=None) -> float:
    return eval_Rh1(x, p, bank) if p.form == 1 else eval_Rh2(x, p, bank)


def eval_tikhonov(x: np.ndarray, order: int = 2, bank: DerivativeBank | None = None) -> float:
    bank = bank or DerivativeBank(order)
    return float(np.sum(bank.squared_magnitude(x)))


def eval_tv_smooth(x: np.ndarray, epsilon: float = 1e-6, order: int = 1,
                   bank: DerivativeBank | None = None) -> float:
    bank = bank or DerivativeBank(order)
    return float(np.sum(np.sqrt(epsilon + bank.squared_magnitude(x))))


def eval_tv(x: np.ndarray, bank: DerivativeBank | None = None) -> float:
    """Isotropic first-order total variation (no smoothing)."""
    bank = bank or DerivativeBank(1)
    return float(np.sum(np.sqrt(bank.squared_magnitude(x))))


@dataclass(frozen=True, eq=False)
class DiagonalWeights:
    """Diagonal factors of the operator ``A^(x)`` frozen at one iterate.

    ``intensity`` multiplies the pixel term and ``derivative`` sits between
    ``D_i^T`` and ``D_i``; for form 1 they are the same array. ``negative``
    is ``0.5 (1 - sign x)``.
    """

    intensity: np.ndarray
    derivative: np.ndarray
    negative: np.ndarray

    @property
    def w(self) -> np.ndarray:
        return self.intensity


def build_weights(x: np.ndarray, p: RegParams, bank: DerivativeBank | None = None) -> DiagonalWeights:
    bank = _bank(p, bank)
    d2 = bank.squared_magnitude(x)
    if p.form == 1:
        if p.q == 1.0:
            w = np.ones_like(x)
        else:
            w = p.q * (p.epsilon + p.alpha * x * x + (1.0 - p.alpha) * d2) ** (p.q - 1.0)
        w_int = w_der = w
    else:
        if p.q == 1.0:
            w_int = np.ones_like(x)
            w_der = np.ones_like(x)
        else:
            w_int = p.q * (p.epsilon + x * x) ** (p.q - 1.0)
            w_der = p.q * (p.epsilon + d2) ** (p.q - 1.0)
    n = 0.5 * (1.0 - np.sign(x))
    return DiagonalWeights(w_int, w_der, n)


def apply_Ax(weights: DiagonalWeights, v: np.ndarray, normal: Callable[[np.ndarray], np.ndarray],
             lam: float, lam_p: float, alpha: float, bank: DerivativeBank) -> np.ndarray:
    """``H^T H v + lam alpha W v + lam (1-alpha) sum D^T W' D v + lam_p N v``."""
    if v.shape != weights.intensity.shape:
        raise DimensionError(f"v has shape {v.shape}, weights {weights.intensity.shape}")
    out = normal(v)
    if lam:
        out = out + lam * alpha * (weights.intensity * v)
        dv = bank.apply(v)
        dv *= weights.derivative
        out += lam * (1.0 - alpha) * bank.adjoint(dv)
    if lam_p:
        out = out + lam_p * (weights.negative * v)
    return out


def diagonal_Ax(weights: DiagonalWeights, normal_diag: np.ndarray, lam: float, lam_p: float,
                alpha: float, bank: DerivativeBank) -> np.ndarray:
    """Exact diagonal of the operator applied by :func:`apply_Ax`."""
    out = np.array(normal_diag, dtype=np.float64)
    if lam:
        out += lam * alpha * weights.intensity
        out += lam * (1.0 - alpha) * bank.gram_diagonal(weights.derivative)
    if lam_p:
        out += lam_p * weights.negative
    return out
