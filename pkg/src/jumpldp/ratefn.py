"""
Rate functional ``I_T(phi) = int_0^T H(phi'_t; t, phi) dt`` and the
deterministic paths that go with it.

Absolutely continuous paths are represented as piecewise-linear
:class:`~jumpldp.model.Path` objects.  The velocity on a grid cell is the
cell slope.  Step-interpolated paths (any path with jumps) have rate ``+inf``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .cumulant import _INF, _HIGH, _LOW, G_kernel, TiltOptions, solve_tilt
from .errors import FluidExplosion, NotPoissonType
from .model import CoefficientModel, History, Path, uniform_grid

#: Boundary tolerance used when H is evaluated along a supplied path.  Cell
#: slopes are differences of stored values, so a path built exactly on the
#: floor of the range of g can land a few ulps/dt away from it.
RATE_BOUNDARY_TOL = 1e-9

EXPLOSION_LEVEL = 1e12


@dataclass(frozen=True)
class RateResult:
    """Value of ``I_T(phi)`` with the per-cell integrand.

    ``per_step_H`` holds ``(midpoint, H)`` pairs.  ``refined`` is the same
    quadrature on the grid with every cell halved.  ``richardson_error``
    is the difference ``|refined - value| / 3``.
    """

    value: float
    per_step_H: list[tuple[float, float]]
    finite: bool
    boundary_steps: int
    ac_check: bool
    refined: float = float("nan")
    richardson_error: float = float("nan")
    infinite_cells: list[int] = field(default_factory=list)
    reason: str = ""

    def to_dict(self) -> dict:
        return {
            "value": _json_float(self.value),
            "finite": self.finite,
            "boundary_steps": self.boundary_steps,
            "ac_check": self.ac_check,
            "refined": _json_float(self.refined),
            "richardson_error": _json_float(self.richardson_error),
            "infinite_cells": list(self.infinite_cells),
            "reason": self.reason,
        }


def _json_float(x: float):
    x = float(x)
    if math.isfinite(x):
        return x
    if math.isnan(x):
        return "nan"
    return "inf" if x > 0 else "-inf"


def _infinite(reason: str, ac: bool) -> RateResult:
    return RateResult(math.inf, [], False, 0, ac, math.inf, math.nan, [], reason)


def _H_along(model: CoefficientModel, path: Path, times: np.ndarray, slopes: np.ndarray,
             boundary_tol: float):
    """H(slope_i; t_i, path) for each i, with one vectorised tilt solve."""
    w = model.q.weights
    a = np.empty(times.size)
    b = np.empty(times.size)
    F = np.empty((times.size, w.size))
    for i, t in enumerate(times):
        c = model.coefficients(float(t), path.history(float(t)))
        a[i], b[i], F[i] = c.a, c.b, c.F
    opts = TiltOptions(boundary_tol=boundary_tol)
    lam, H, status, _ = solve_tilt(slopes, a, b, F, w, opts)
    return lam, H, status


def rate_I(model: CoefficientModel, phi: Path, T: float | None = None,
           boundary_tol: float = RATE_BOUNDARY_TOL) -> RateResult:
    """Midpoint quadrature of ``H(phi'; t, phi)`` over ``[0, T]``.

    Returns ``+inf`` when ``phi`` does not start at the model's ``x0``,
    when ``phi`` is step-interpolated, or when ``H`` is infinite on any
    cell.  In the last case the offending cells are listed.

    Examples
    --------
    >>> from jumpldp.catalogue import brownian
    >>> round(rate_I(brownian(), Path.line(1.0, 1.0, 1e-2)).value, 12)
    0.5
    """
    T = phi.T if T is None else float(T)
    if T > phi.T + 1e-12:
        raise ValueError(f"T={T} exceeds the path horizon {phi.T}")
    if phi.interp != "linear":
        return _infinite("path is not piecewise-linear (not absolutely continuous)", False)
    if phi.x0 != model.x0:
        return _infinite(f"path starts at {phi.x0}, model at {model.x0}", True)
    phi = phi.restrict(T)
    dt = np.diff(phi.grid)
    slopes = phi.slopes
    mids = phi.grid[:-1] + 0.5 * dt
    _, H, status = _H_along(model, phi, mids, slopes, boundary_tol)
    bad = np.nonzero(status == _INF)[0]
    per_step = [(float(t), float(h)) for t, h in zip(mids, H)]
    boundary = int(np.count_nonzero((status == _LOW) | (status == _HIGH)))
    if bad.size:
        return RateResult(math.inf, per_step, False, boundary, True, math.inf, math.nan,
                          bad.tolist(), f"H infinite on {bad.size} cell(s), first at t={mids[bad[0]]:.6g}")
    value = math.fsum(H * dt)
    # same slopes, midpoints of the half cells
    quarter = np.concatenate((phi.grid[:-1] + 0.25 * dt, phi.grid[:-1] + 0.75 * dt))
    _, Hr, sr = _H_along(model, phi, quarter, np.concatenate((slopes, slopes)), boundary_tol)
    refined = math.inf if np.any(sr == _INF) else math.fsum(Hr * np.concatenate((dt, dt)) * 0.5)
    return RateResult(value, per_step, True, boundary, True, refined, abs(refined - value) / 3.0)


# ---------------------------------------------------------------- ODE paths

def _integrate(model: CoefficientModel, rhs: Callable[[float, History], float],
               T: float, dt: float) -> Path:
    """Classical RK4 for ``y' = rhs(t, y)`` with a path-dependent right-hand side.

    The history lives on the integration grid.  For a stage at ``t_k + c dt``
    the stage point is written into slot ``k + 1`` so that the history the
    right-hand side sees ends at the stage time.
    """
    grid = uniform_grid(T, dt)
    m = grid.size - 1
    times = grid.copy()
    vals = np.empty(m + 1)
    vals[0] = model.x0

    def stage(k, c, y):
        if c == 0.0:
            return float(rhs(float(grid[k]), History(times[:k + 1], vals[:k + 1])))
        times[k + 1] = grid[k] + c * dt
        vals[k + 1] = y
        return float(rhs(float(times[k + 1]), History(times[:k + 2], vals[:k + 2])))

    for k in range(m):
        y = vals[k]
        k1 = stage(k, 0.0, y)
        k2 = stage(k, 0.5, y + 0.5 * dt * k1)
        k3 = stage(k, 0.5, y + 0.5 * dt * k2)
        k4 = stage(k, 1.0, y + dt * k3)
        times[k + 1] = grid[k + 1]
        vals[k + 1] = y + dt * (k1 + 2.0 * k2 + 2.0 * k3 + k4) / 6.0
        if not math.isfinite(vals[k + 1]) or abs(vals[k + 1]) > EXPLOSION_LEVEL:
            raise FluidExplosion(f"fluid explosion at t={grid[k + 1]:.6g} (|y| > {EXPLOSION_LEVEL:g})")
    return Path(grid, vals, "linear")


def fluid_limit(model: CoefficientModel, T: float, dt: float) -> Path:
    """Solve ``Y' = a(t, Y)``, ``Y_0 = x0`` on a uniform grid of step ``dt``.

    Examples
    --------
    >>> from jumpldp.catalogue import ou
    >>> Y = fluid_limit(ou(theta=1.0, x0=1.0), 1.0, 1e-2)
    >>> abs(Y.values[-1] - math.exp(-1)) < 1e-8
    True
    """
    def rhs(t, hist):
        return model.coefficients(t, hist).a
    return _integrate(model, rhs, T, dt)


def _check_poisson_type(model: CoefficientModel, t: float, c) -> None:
    w = model.q.weights
    if not np.all(np.asarray(c.b) == 0):
        raise NotPoissonType("b(t,X)=0", f"b={float(c.b):.6g} at t={t:.6g}")
    live = w > 0
    if not live.any():
        raise NotPoissonType("f(t,X,u)>eps_T", "jump measure has no mass")
    fmin = float(np.min(np.asarray(c.F)[..., live]))
    if not fmin > 0:
        raise NotPoissonType("f(t,X,u)>eps_T", f"min f={fmin:.6g} at t={t:.6g}")


def poisson_floor_path(model: CoefficientModel, T: float, dt: float) -> Path:
    """Solve ``psi' = a(t, psi) - int f(t, psi, u) q(du)``, ``psi_0 = x0``.

    This is the lowest velocity a pure-jump model with positive jumps can
    sustain.  Its rate is ``int_0^T q(f > 0) dt = q(E) T``.  The model is
    checked at every evaluation for ``b = 0`` and ``f > 0`` on the support
    of ``q``.  :class:`~jumpldp.errors.NotPoissonType` names the failed
    clause.  ``q(E) < inf`` holds by construction of
    :class:`~jumpldp.model.JumpMeasure`.
    """
    w = model.q.weights
    c0 = model.coefficients(0.0, History(np.zeros(1), np.array([model.x0])))
    _check_poisson_type(model, 0.0, c0)

    def rhs(t, hist):
        c = model.coefficients(t, hist)
        _check_poisson_type(model, t, c)
        return c.a - c.F @ w
    return _integrate(model, rhs, T, dt)


def truncate_N(phi: Path, N: float) -> Path:
    """``phi^N_t = x + int_0^t phi'_s I(|phi'_s| <= N) ds`` on the same grid."""
    if phi.interp != "linear":
        raise ValueError("truncation needs a piecewise-linear path")
    s = phi.slopes
    kept = np.where(np.abs(s) <= N, s, 0.0)
    vals = phi.x0 + np.concatenate(([0.0], np.cumsum(kept * np.diff(phi.grid))))
    return Path(phi.grid, vals, "linear")


@dataclass(frozen=True)
class ConditionIVReport:
    """``J(N_j) = int max_{N in N_grid[:j+1]} H(phi'; t, phi^N) dt`` for each prefix."""

    N_grid: list[float]
    values: list[float]
    passed: bool
    top_ratio: float

    def to_dict(self) -> dict:
        return {"N_grid": self.N_grid, "values": [_json_float(v) for v in self.values],
                "passed": self.passed, "top_ratio": _json_float(self.top_ratio)}


def check_condition_IV(model: CoefficientModel, phi: Path, T: float | None = None,
                       N_grid: Sequence[float] = (1.0, 2.0, 4.0, 8.0, 16.0, 32.0),
                       ratio_tol: float = 1e-3) -> ConditionIVReport:
    """Empirical check that the truncated integrals stay bounded as ``N`` grows.

    Passes when every value is finite and the last two values of the
    nested sequence differ by a ratio of at most ``1 + ratio_tol``.
    """
    T = phi.T if T is None else float(T)
    phi = phi.restrict(T)
    Ns = sorted(float(n) for n in N_grid)
    dt = np.diff(phi.grid)
    mids = phi.grid[:-1] + 0.5 * dt
    best = np.full(mids.size, -np.inf)
    values = []
    for N in Ns:
        _, H, status = _H_along(model, truncate_N(phi, N), mids, phi.slopes, RATE_BOUNDARY_TOL)
        H = np.where(status == _INF, np.inf, H)
        best = np.maximum(best, H)
        values.append(math.fsum(best * dt) if np.all(np.isfinite(best)) else math.inf)
    if len(values) < 2:
        ratio = 1.0
    elif values[-2] == 0.0:
        ratio = 1.0 if values[-1] == 0.0 else math.inf
    else:
        ratio = values[-1] / values[-2]
    passed = all(math.isfinite(v) for v in values) and ratio <= 1.0 + ratio_tol
    return ConditionIVReport(Ns, values, bool(passed), float(ratio))


# ---------------------------------------------------------------- dual form

@dataclass(frozen=True)
class StepFunction:
    """Right-continuous step function equal to ``values[j]`` on ``[breaks[j], breaks[j+1])``."""

    breaks: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        br = np.asarray(self.breaks, dtype=float)
        vals = np.asarray(self.values, dtype=float)
        if br.ndim != 1 or vals.shape != (br.size - 1,) or br.size < 2:
            raise ValueError("a step function needs len(values) == len(breaks) - 1 >= 1")
        if np.any(np.diff(br) <= 0) or br[0] != 0.0:
            raise ValueError("breaks must start at 0 and increase strictly")
        if not np.all(np.isfinite(vals)):
            raise ValueError("step values must be finite")
        object.__setattr__(self, "breaks", br)
        object.__setattr__(self, "values", vals)

    @classmethod
    def constant(cls, value: float, T: float) -> "StepFunction":
        return cls(np.array([0.0, T]), np.array([float(value)]))

    def __call__(self, t):
        idx = np.searchsorted(self.breaks, t, side="right") - 1
        return self.values[np.clip(idx, 0, self.values.size - 1)]


def dual_rate_step(model: CoefficientModel, phi: Path, T: float | None,
                   lam_steps: StepFunction) -> float:
    """``int lambda dphi - int G(lambda(t); t, phi) dt`` for a step function ``lambda``.

    Every value is a lower bound for ``rate_I(model, phi, T)``.  The
    Stieltjes part is summed exactly over the pieces.  The cumulant part
    uses the midpoint rule on the merged grid of ``phi`` and the breaks.
    """
    T = phi.T if T is None else float(T)
    knots = np.union1d(phi.grid[phi.grid <= T], lam_steps.breaks[lam_steps.breaks < T])
    knots = np.union1d(knots, [T])
    lam = lam_steps(knots[:-1])
    dphi = np.diff(phi.value_at(knots))
    dt = np.diff(knots)
    mids = knots[:-1] + 0.5 * dt
    w = model.q.weights
    G = np.empty(mids.size)
    for i, t in enumerate(mids):
        c = model.coefficients(float(t), phi.history(float(t)))
        G[i] = G_kernel(lam[i], c.a, c.b, c.F, w)
    return math.fsum(lam * dphi) - math.fsum(G * dt)


def tilt_optimal_steps(model: CoefficientModel, phi: Path, T: float | None = None,
                       cap: float = 50.0) -> StepFunction:
    """Per-cell tilt ``Lambda(phi'_k; t_k, phi)``, clipped to ``[-cap, cap]``.

    Plugged into :func:`dual_rate_step` it reaches ``rate_I`` up to the
    quadrature error (exactly, for coefficients constant on cells).
    """
    T = phi.T if T is None else float(T)
    phi = phi.restrict(T)
    mids = phi.grid[:-1] + 0.5 * np.diff(phi.grid)
    lam, _, status = _H_along(model, phi, mids, phi.slopes, RATE_BOUNDARY_TOL)
    lam = np.where(status == _INF, 0.0, lam)
    return StepFunction(phi.grid, np.clip(lam, -cap, cap))
