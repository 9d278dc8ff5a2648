"""Preconditioned-gradient reconstruction with graduated non-convexity.

The cost is

    J(x, q) = ||p_m - H x||^2 + lam R(x, q) + lam_p ||min(x, 0)||^2

with ``R`` one of the two jointly-sparse forms. Each outer iteration
solves ``A^(x) g_hat = g`` by conjugate gradients, where ``A^(x)`` is the
weighted normal operator frozen at the current iterate and
``g = A^(x) x - H^T p_m``, then backtracks along ``-g_hat``.

``g`` is half the true gradient of ``J``; the factor is absorbed by the
line search.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from functools import cached_property
from typing import Callable, Protocol

import numpy as np

from .errors import DimensionError, IndefiniteOperatorError, LineSearchFailure, NumericError
from .regularizers import (DerivativeBank, DiagonalWeights, RegParams, apply_Ax, build_weights,
                           diagonal_Ax, eval_regularizer)

log = logging.getLogger(__name__)


class LinearModel(Protocol):
    def forward(self, v: np.ndarray) -> np.ndarray: ...
    def adjoint(self, u: np.ndarray) -> np.ndarray: ...
    def normal(self, v: np.ndarray) -> np.ndarray: ...


@dataclass(frozen=True)
class SolverConfig:
    """Weights, tolerances and iteration caps for the reconstruction.

    ``lam_p`` defaults to ``10 * lam``. ``precondition="jacobi"`` runs the
    inner CG with the exact diagonal of ``A^(x)`` as preconditioner; it
    changes the convergence rate of the inner solve, not its solution.
    """

    lam: float = 1e-3
    lam_p: float | None = None
    eps_s: float = 1e-6
    eps_cg: float = 1e-6
    eps_o: float = 1e-6
    rho: float = 0.5
    max_outer: int = 200
    max_cg: int = 200
    max_ls: int = 30
    precondition: str = "jacobi"

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lam must be >= 0")
        if self.lam_p is None:
            object.__setattr__(self, "lam_p", 10.0 * self.lam)
        if self.lam_p < 0:
            raise ValueError("lam_p must be >= 0")
        for name in ("eps_s", "eps_cg", "eps_o"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if not 0.0 < self.rho < 1.0:
            raise ValueError("rho must lie in (0, 1)")
        for name in ("max_outer", "max_cg", "max_ls"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.precondition not in ("jacobi", "none"):
            raise ValueError("precondition must be 'jacobi' or 'none'")


@dataclass(frozen=True)
class GncSchedule:
    q_final: float = 0.25
    n_s: int = 10

    def __post_init__(self):
        if not 0.0 < self.q_final < 0.5:
            raise ValueError("q_final must lie in (0, 0.5)")
        if int(self.n_s) != self.n_s or self.n_s < 1:
            raise ValueError("n_s must be a positive integer")

    def stages(self) -> list[float]:
        """``q_m = 0.5 - m (0.5 - q) / n_s`` for ``m = 0..n_s``, rounded once."""
        half, q = Fraction(1, 2), Fraction(self.q_final)
        return [float(half - m * (half - q) / self.n_s) for m in range(self.n_s + 1)]


@dataclass
class IterationRecord:
    stage: int
    q: float
    iteration: int
    cost_before: float
    cost: float
    beta: float
    cg_iters: int
    cg_residual: float
    rel_change: float
    seconds: float
    direction: str = "preconditioned"


@dataclass
class StageRecord:
    stage: int
    q: float
    iterations: int
    stop_reason: str
    cost: float
    rel_change_from_start: float
    seconds: float


@dataclass
class SolveReport:
    method: str = "gnc"
    records: list[IterationRecord] = field(default_factory=list)
    stages: list[StageRecord] = field(default_factory=list)
    degraded: bool = False
    failure: str | None = None
    settings: dict = field(default_factory=dict)

    CSV_FIELDS = ("iteration", "stage", "q", "cost", "beta", "cg_iters", "rel_change", "seconds")

    def costs(self) -> np.ndarray:
        return np.array([r.cost for r in self.records])

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(self.CSV_FIELDS)
        for r in self.records:
            writer.writerow([r.iteration, r.stage, repr(r.q), repr(r.cost), repr(r.beta),
                             r.cg_iters, repr(r.rel_change), f"{r.seconds:.6f}"])
        return buf.getvalue()

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "degraded": self.degraded,
            "failure": self.failure,
            "settings": self.settings,
            "stages": [asdict(s) for s in self.stages],
            "records": [asdict(r) for r in self.records],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, default=_finite_or_str)


def _finite_or_str(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    return str(obj)


@dataclass(eq=False)
class Problem:
    """Measured data plus everything needed to evaluate ``J``."""

    model: LinearModel
    data: np.ndarray
    reg: RegParams = field(default_factory=RegParams)
    config: SolverConfig = field(default_factory=SolverConfig)
    bank: DerivativeBank | None = None

    def __post_init__(self):
        self.data = np.asarray(getattr(self.data, "data", self.data), dtype=np.float64)
        if self.bank is None:
            self.bank = DerivativeBank(self.reg.order)
        elif self.bank.order != self.reg.order:
            raise ValueError("derivative bank order does not match reg.order")

    @cached_property
    def Htp(self) -> np.ndarray:
        return self.model.adjoint(self.data)

    @property
    def lam(self) -> float:
        return self.config.lam

    @property
    def lam_p(self) -> float:
        return self.config.lam_p

    def params(self, q: float) -> RegParams:
        return self.reg.with_q(q)

    def weights(self, x: np.ndarray, q: float) -> DiagonalWeights:
        return build_weights(x, self.params(q), self.bank)

    def A(self, weights: DiagonalWeights) -> Callable[[np.ndarray], np.ndarray]:
        lam, lam_p, alpha = self.lam, self.lam_p, self.reg.alpha
        return lambda v: apply_Ax(weights, v, self.model.normal, lam, lam_p, alpha, self.bank)

    @cached_property
    def normal_diag(self) -> np.ndarray:
        return self.model.normal_diagonal()

    def preconditioner(self, weights: DiagonalWeights) -> Callable[[np.ndarray], np.ndarray] | None:
        """Inverse diagonal of ``A^(x)``, or None when disabled/unavailable."""
        if self.config.precondition == "none" or not hasattr(self.model, "normal_diagonal"):
            return None
        d = diagonal_Ax(weights, self.normal_diag, self.lam, self.lam_p, self.reg.alpha, self.bank)
        if not np.all(d > 0):
            return None
        inv = 1.0 / d
        return lambda r: inv * r

    def penalty(self, x: np.ndarray, q: float) -> float:
        """Regularization plus positivity terms of ``J``."""
        total = 0.0
        if self.lam:
            total += self.lam * eval_regularizer(x, self.params(q), self.bank)
        if self.lam_p:
            neg = np.minimum(x, 0.0)
            total += self.lam_p * float(np.sum(neg * neg))
        return total


def eval_cost(x: np.ndarray, problem: Problem, q: float, Hx: np.ndarray | None = None) -> float:
    if Hx is None:
        Hx = problem.model.forward(x)
    r = problem.data - Hx
    return float(np.sum(r * r)) + problem.penalty(x, q)


def eval_grad(x: np.ndarray, problem: Problem, q: float) -> np.ndarray:
    """``A^(x) x - H^T p_m`` (half the gradient of :func:`eval_cost`)."""
    return problem.A(problem.weights(x, q))(x) - problem.Htp


@dataclass
class CGInfo:
    iterations: int
    residual: float
    converged: bool


def cg_solve(op: Callable[[np.ndarray], np.ndarray], b: np.ndarray, eps_cg: float = 1e-6,
             max_cg: int = 200, x0: np.ndarray | None = None,
             precond: Callable[[np.ndarray], np.ndarray] | None = None
             ) -> tuple[np.ndarray, CGInfo]:
    """(Preconditioned) conjugate gradients for ``op(x) = b``, ``op`` SPD.

    Stops once ``||op(x) - b|| <= eps_cg ||b||``. At the cap the last
    iterate is returned with its residual and ``converged=False``: it is
    the minimiser of the quadratic model over the Krylov space, which the
    residual norm is not monotone in. The last iterate from ``x0 = 0``
    always satisfies ``b^T x > 0``, so it stays a descent direction.

    Raises:
        IndefiniteOperatorError: on a search direction with ``p^T A p <= 0``.
    """
    bnorm = float(np.linalg.norm(b))
    if bnorm == 0.0:
        return np.zeros_like(b), CGInfo(0, 0.0, True)
    if x0 is None:
        x = np.zeros_like(b)
        r = b.copy()
    else:
        x = x0.copy()
        r = b - op(x)
    rel = float(np.linalg.norm(r)) / bnorm
    if rel <= eps_cg:
        return x, CGInfo(0, rel, True)
    z = r if precond is None else precond(r)
    p = z.copy()
    rz = float(np.vdot(r, z))
    for it in range(1, max_cg + 1):
        Ap = op(p)
        curv = float(np.vdot(p, Ap))
        if not np.isfinite(curv):
            raise NumericError(f"non-finite curvature at CG iteration {it}")
        if curv <= 0.0:
            raise IndefiniteOperatorError(
                f"non-positive curvature {curv:.3e} at CG iteration {it} "
                f"(relative residual {rel:.3e})", iteration=it, curvature=curv, residual=rel)
        step = rz / curv
        x += step * p
        r -= step * Ap
        rel = float(np.linalg.norm(r)) / bnorm
        if rel <= eps_cg:
            return x, CGInfo(it, rel, True)
        z = r if precond is None else precond(r)
        rz_new = float(np.vdot(r, z))
        p *= rz_new / rz
        p += z
        rz = rz_new
    return x, CGInfo(max_cg, rel, False)


@dataclass
class LineSearchResult:
    beta: float
    cost: float
    betas: list[float]
    costs: list[float]


def line_search(x: np.ndarray, ghat: np.ndarray, problem: Problem, q: float,
                rho: float | None = None, eps_s: float | None = None, max_ls: int | None = None,
                cost0: float | None = None, Hx: np.ndarray | None = None) -> LineSearchResult:
    """Backtrack ``beta = 1, rho, rho^2, ...`` along ``x - beta * ghat``.

    Accepts the first step with ``J(new) <= (1 - eps_s) J(old)``.

    Raises:
        LineSearchFailure: after ``max_ls`` reductions without acceptance.
    """
    cfg = problem.config
    rho = cfg.rho if rho is None else rho
    eps_s = cfg.eps_s if eps_s is None else eps_s
    max_ls = cfg.max_ls if max_ls is None else max_ls
    if Hx is None:
        Hx = problem.model.forward(x)
    resid = problem.data - Hx
    if cost0 is None:
        cost0 = float(np.sum(resid * resid)) + problem.penalty(x, q)
    Hg = problem.model.forward(ghat)
    target = (1.0 - eps_s) * cost0
    betas, costs = [], []
    beta = 1.0
    for _ in range(max_ls + 1):
        r = resid + beta * Hg
        cost = float(np.sum(r * r)) + problem.penalty(x - beta * ghat, q)
        betas.append(beta)
        costs.append(cost)
        if np.isfinite(cost) and cost <= target:
            return LineSearchResult(beta, cost, betas, costs)
        beta *= rho
    raise LineSearchFailure(
        f"no sufficient decrease after {max_ls} reductions (J = {cost0:.6e})", betas)


def rr_solve(x0: np.ndarray, problem: Problem, q: float, report: SolveReport | None = None,
             stage: int = 0) -> tuple[np.ndarray, SolveReport]:
    """Regularized reconstruction at a fixed sparsity index ``q``."""
    cfg = problem.config
    report = report if report is not None else SolveReport(method="rr")
    x = np.array(x0, dtype=np.float64)
    if x.shape != problem.Htp.shape:
        raise DimensionError(f"x0 has shape {x.shape}, expected {problem.Htp.shape}")
    t_stage = time.perf_counter()
    Hx = problem.model.forward(x)
    cost = eval_cost(x, problem, q, Hx)
    stop = "max_outer"
    iterations = 0
    for k in range(cfg.max_outer):
        t0 = time.perf_counter()
        weights = problem.weights(x, q)
        A = problem.A(weights)
        g = A(x) - problem.Htp
        ghat, info = cg_solve(A, g, cfg.eps_cg, cfg.max_cg, precond=problem.preconditioner(weights))
        direction = "preconditioned"
        try:
            ls = line_search(x, ghat, problem, q, cost0=cost, Hx=Hx)
        except LineSearchFailure:
            direction = "gradient"
            ghat = g
            try:
                ls = line_search(x, ghat, problem, q, cost0=cost, Hx=Hx)
            except LineSearchFailure:
                stop = "step_failure"
                break
        step = ls.beta * ghat
        x_new = x - step
        dnorm, xnorm = float(np.linalg.norm(step)), float(np.linalg.norm(x))
        if dnorm == 0.0:
            stop = "stationary"
            break
        rel = dnorm / xnorm if xnorm > 0 else np.inf
        report.records.append(IterationRecord(
            stage, q, k, cost, ls.cost, ls.beta, info.iterations, info.residual, rel,
            time.perf_counter() - t0, direction))
        log.debug("stage %d q=%.4f it %d J=%.6e beta=%.3g cg=%d r=%.3e",
                  stage, q, k, ls.cost, ls.beta, info.iterations, rel)
        x, cost = x_new, ls.cost
        Hx = problem.model.forward(x)
        iterations = k + 1
        if rel < cfg.eps_o:
            stop = "tolerance"
            break
    x0n = float(np.linalg.norm(x0))
    change = float(np.linalg.norm(x - x0)) / x0n if x0n > 0 else np.inf
    report.stages.append(StageRecord(stage, q, iterations, stop, cost, change,
                                     time.perf_counter() - t_stage))
    return x, report


def quad_init(problem: Problem) -> np.ndarray:
    """Minimiser of the ``q = 1`` cost without the positivity term.

    Solves ``[H^T H + lam alpha I + lam (1 - alpha) sum D^T D] y = H^T p_m``.
    """
    y, _ = _quad_init(problem)
    return y


def _quad_init(problem: Problem) -> tuple[np.ndarray, CGInfo]:
    cfg = problem.config
    lam, alpha, bank = problem.lam, problem.reg.alpha, problem.bank
    normal = problem.model.normal

    def op(v):
        out = normal(v)
        if lam:
            out = out + lam * alpha * v + lam * (1.0 - alpha) * bank.gram(v)
        return out

    shape = problem.Htp.shape
    ones = DiagonalWeights(np.ones(shape), np.ones(shape), np.zeros(shape))
    return cg_solve(op, problem.Htp, cfg.eps_cg, cfg.max_cg,
                    precond=problem.preconditioner(ones))


def gnc_solve(problem: Problem, schedule: GncSchedule = GncSchedule(),
              x_init: np.ndarray | None = None) -> tuple[np.ndarray, SolveReport]:
    """Graduated non-convexity: ``q`` decreases from 0.5 to ``q_final``.

    Each stage warm-starts from the previous stage's result. If a stage
    fails numerically, the previous stage's result is returned and the
    report is flagged ``degraded``.
    """
    report = SolveReport(method=f"gnc-form{problem.reg.form}")
    report.settings = {"solver": asdict(problem.config), "reg": asdict(problem.reg),
                       "schedule": asdict(schedule), "stages": schedule.stages()}
    t0 = time.perf_counter()
    if x_init is None:
        y, info = _quad_init(problem)
        report.settings["quad_init"] = asdict(info)
    else:
        y = np.array(x_init, dtype=np.float64)
    report.settings["quad_init_seconds"] = time.perf_counter() - t0
    for m, q_m in enumerate(schedule.stages()):
        try:
            y, report = rr_solve(y, problem, q_m, report, stage=m)
        except NumericError as exc:
            log.warning("GNC stage %d (q=%.4f) failed: %s", m, q_m, exc)
            report.degraded = True
            report.failure = f"stage {m}: {exc}"
            break
    return y, report
