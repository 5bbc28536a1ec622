"""
Coefficients, jump measures and paths of the scaled jump-diffusion.

The process is

    X^n_t = x + int_0^t a(s, X^n) ds + n^{-1/2} int_0^t b(s, X^n) dW_s
            + n^{-1} int_0^t int_E f(s, X^n, u) (p^n - q^n)(ds, du),

with compensator ``q^n(dt, du) = n dt q(du)``.  The coefficients are
functionals of the path.  They never see the path itself; they receive a
:class:`History`, a read-only window that ends at the evaluation time.  That
makes them predictable by construction.

All evaluators are vectorised.  A history may carry a batch of paths, with
``values`` shaped ``batch + (k+1,)``.  Evaluators return arrays that
broadcast to the batch shape (drift, diffusion) or to ``batch + (K,)``
(jump, with ``K`` marks).
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path as FilePath
from typing import Callable, Sequence

import numpy as np

from .errors import ConditionViolation, CramerViolation

#: Gauss-Legendre panel size used for density jump measures.
DEFAULT_QUADRATURE_NODES = 64

#: Tolerance used when checking linear-growth envelopes.
GROWTH_SLACK = 1e-9


@dataclass(frozen=True)
class JumpMeasure:
    """Finite jump measure ``q`` on a subset of the real line.

    Densities are discretised once, at construction, on a fixed
    Gauss-Legendre panel.  Every integral against ``q`` in the library
    (cumulants, compensators, simulation) then runs over the same nodes.
    For atomic measures the sums are therefore exact.

    Use :meth:`atoms`, :meth:`density` or :meth:`none` to build one.
    """

    marks: np.ndarray
    weights: np.ndarray
    kind: str = "atoms"
    support: tuple[float, float] | None = None

    def __post_init__(self):
        marks = np.asarray(self.marks, dtype=float).reshape(-1)
        weights = np.asarray(self.weights, dtype=float).reshape(-1)
        if marks.shape != weights.shape:
            raise ValueError("marks and weights must have the same length")
        if not (np.all(np.isfinite(marks)) and np.all(np.isfinite(weights))):
            raise ValueError("jump measure must have finite marks and weights (finite activity only)")
        if np.any(weights < 0):
            raise ValueError("jump measure weights must be nonnegative")
        marks.setflags(write=False)
        weights.setflags(write=False)
        object.__setattr__(self, "marks", marks)
        object.__setattr__(self, "weights", weights)

    @classmethod
    def atoms(cls, marks: Sequence[float], weights: Sequence[float]) -> "JumpMeasure":
        return cls(np.asarray(marks, float), np.asarray(weights, float), kind="atoms")

    @classmethod
    def density(cls, fn: Callable[[np.ndarray], np.ndarray], lo: float, hi: float,
                nodes: int = DEFAULT_QUADRATURE_NODES) -> "JumpMeasure":
        """Measure with density ``fn`` on ``[lo, hi]``, discretised with ``nodes`` points."""
        if not (np.isfinite(lo) and np.isfinite(hi) and hi > lo):
            raise ValueError("density support must be a finite interval lo < hi")
        x, w = np.polynomial.legendre.leggauss(int(nodes))
        u = 0.5 * (hi - lo) * x + 0.5 * (hi + lo)
        dens = np.asarray(fn(u), dtype=float)
        if np.any(dens < 0):
            raise ValueError("density must be nonnegative on its support")
        return cls(u, 0.5 * (hi - lo) * w * dens, kind="density", support=(float(lo), float(hi)))

    @classmethod
    def none(cls) -> "JumpMeasure":
        return cls(np.empty(0), np.empty(0), kind="atoms")

    @property
    def total_mass(self) -> float:
        return math.fsum(self.weights)

    @property
    def size(self) -> int:
        return self.marks.size

    def integrate(self, values: np.ndarray) -> np.ndarray:
        """``int g(u) q(du)`` for ``values = g(marks)`` along the last axis."""
        return (np.asarray(values) * self.weights).sum(axis=-1) if self.size else np.zeros(np.shape(values)[:-1])


class History:
    """Read-only view of a path (or batch of paths) up to time ``t``.

    ``times[-1] == t`` and ``values[..., -1]`` is the left limit ``X_{t-}``.
    Nothing at or after ``t`` beyond that left limit is visible.
    """

    __slots__ = ("times", "values", "t", "_sup")

    def __init__(self, times: np.ndarray, values: np.ndarray, sup_abs: np.ndarray | None = None):
        self.times = times
        self.values = values
        self.t = float(times[-1])
        self._sup = sup_abs

    @property
    def batch_shape(self) -> tuple[int, ...]:
        return self.values.shape[:-1]

    @property
    def last(self) -> np.ndarray:
        """``X_{t-}``."""
        return self.values[..., -1]

    @property
    def sup_abs(self) -> np.ndarray:
        """``X*_{t-} = sup_{s<t} |X_s|``."""
        if self._sup is None:
            self._sup = np.max(np.abs(self.values), axis=-1)
        return self._sup

    def window_mean(self, width: float) -> np.ndarray:
        """Time average of the path over ``[max(0, t - width), t]`` (trapezoid rule)."""
        t = self.t
        lo = max(float(self.times[0]), t - width)
        if t <= lo:
            return self.last
        times, vals = self.times, self.values
        i = int(np.searchsorted(times, lo, side="right")) - 1
        frac = (lo - times[i]) / (times[i + 1] - times[i])
        v_lo = vals[..., i] + (vals[..., i + 1] - vals[..., i]) * frac
        ts = np.concatenate(([lo], times[i + 1:]))
        vs = np.concatenate((v_lo[..., None], vals[..., i + 1:]), axis=-1)
        return np.trapezoid(vs, ts, axis=-1) / (t - lo)


@dataclass(frozen=True)
class Path:
    """A trajectory on a strictly increasing time grid starting at 0.

    ``interp`` is ``"linear"`` (piecewise-linear, the representation of
    absolutely continuous paths) or ``"step"`` (right-continuous steps).
    Outside ``[0, T]`` a path is extended by its end values.
    """

    grid: np.ndarray
    values: np.ndarray
    interp: str = "linear"

    def __post_init__(self):
        grid = np.array(self.grid, dtype=float).reshape(-1)
        values = np.array(self.values, dtype=float).reshape(-1)
        if grid.shape != values.shape or grid.size < 2:
            raise ValueError("grid and values must be 1-D with equal length >= 2")
        if grid[0] != 0.0:
            raise ValueError("path grid must start at t=0")
        if np.any(np.diff(grid) <= 0):
            raise ValueError("path grid must be strictly increasing")
        if not np.all(np.isfinite(values)):
            raise ValueError("path values must be finite")
        if self.interp not in ("linear", "step"):
            raise ValueError(f"unknown interpolation {self.interp!r}")
        grid.setflags(write=False)
        values.setflags(write=False)
        object.__setattr__(self, "grid", grid)
        object.__setattr__(self, "values", values)

    @classmethod
    def from_function(cls, fn: Callable[[np.ndarray], np.ndarray], T: float, dt: float,
                      interp: str = "linear") -> "Path":
        grid = uniform_grid(T, dt)
        return cls(grid, np.broadcast_to(np.asarray(fn(grid), float), grid.shape), interp)

    @classmethod
    def line(cls, slope: float, T: float, dt: float, x0: float = 0.0) -> "Path":
        return cls.from_function(lambda t: x0 + slope * t, T, dt)

    @classmethod
    def constant(cls, value: float, T: float, dt: float) -> "Path":
        return cls.from_function(lambda t: np.full_like(t, value), T, dt)

    @property
    def x0(self) -> float:
        return float(self.values[0])

    @property
    def T(self) -> float:
        return float(self.grid[-1])

    @property
    def slopes(self) -> np.ndarray:
        return np.diff(self.values) / np.diff(self.grid)

    def __call__(self, t):
        return self.value_at(t)

    def value_at(self, t):
        t = np.asarray(t, dtype=float)
        if self.interp == "linear":
            return np.interp(t, self.grid, self.values)
        idx = np.searchsorted(self.grid, t, side="right") - 1
        return self.values[np.clip(idx, 0, self.grid.size - 1)]

    def left_limit(self, t):
        """``X_{t-}``; equal to ``X_t`` for linear paths, and ``X_0`` at ``t = 0``."""
        t = np.asarray(t, dtype=float)
        if self.interp == "linear":
            return np.interp(t, self.grid, self.values)
        idx = np.searchsorted(self.grid, t, side="left") - 1
        return self.values[np.clip(idx, 0, self.grid.size - 1)]

    def running_sup(self) -> np.ndarray:
        """``X*_{t_k}`` at every grid point, in one forward sweep."""
        return np.maximum.accumulate(np.abs(self.values))

    def history(self, t: float) -> History:
        """History window ending at ``t`` (grid points strictly before ``t`` plus ``X_{t-}``)."""
        k = int(np.searchsorted(self.grid, t, side="left"))
        times = np.append(self.grid[:k], t)
        values = np.append(self.values[:k], self.left_limit(t))
        return History(times, values)

    def restrict(self, T: float) -> "Path":
        """Path on ``[0, T]``; ``T`` is inserted into the grid if needed."""
        if T >= self.T:
            return self
        k = int(np.searchsorted(self.grid, T, side="left"))
        grid = np.append(self.grid[:k], T)
        values = np.append(self.values[:k], self.value_at(T))
        return Path(grid, values, self.interp)

    def shifted(self, c: float) -> "Path":
        return Path(self.grid, self.values + c, self.interp)

    def to_csv(self, file) -> None:
        write_path_csv(self, file)

    @classmethod
    def from_csv(cls, file, interp: str = "linear") -> "Path":
        return read_path_csv(file, interp)


def uniform_grid(T: float, dt: float) -> np.ndarray:
    """Grid ``0, dt, ..., T``; ``dt`` must divide ``T`` to within 1e-12."""
    if not (dt > 0 and T > 0):
        raise ValueError("T and dt must be positive")
    m = int(round(T / dt))
    if m < 1 or abs(m * dt - T) > 1e-12 * max(1.0, T):
        raise ValueError(f"dt={dt} does not divide T={T}")
    return np.linspace(0.0, T, m + 1)


def write_path_csv(path: Path, file) -> None:
    """Write ``path`` as a two-column ``time,value`` CSV with a header line."""
    with open(file, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["time", "value"])
        for t, v in zip(path.grid, path.values):
            w.writerow([repr(float(t)), repr(float(v))])


def read_path_csv(file, interp: str = "linear") -> Path:
    """Read a ``time,value`` CSV written by :func:`write_path_csv`.

    Raises ``ValueError`` with the offending line when the header, a row or
    the grid is invalid.
    """
    rows = FilePath(file).read_text(encoding="utf-8").splitlines()
    if not rows or [c.strip().lower() for c in rows[0].split(",")] != ["time", "value"]:
        raise ValueError(f"{file}: expected header 'time,value'")
    times, values = [], []
    for lineno, line in enumerate(rows[1:], start=2):
        if not line.strip():
            continue
        parts = line.split(",")
        if len(parts) != 2:
            raise ValueError(f"{file}:{lineno}: expected two columns")
        try:
            times.append(float(parts[0]))
            values.append(float(parts[1]))
        except ValueError as exc:
            raise ValueError(f"{file}:{lineno}: {exc}") from None
    try:
        return Path(np.array(times), np.array(values), interp)
    except ValueError as exc:
        raise ValueError(f"{file}: {exc}") from None


def _one(t):
    return 1.0


def _abs_mark(u):
    return np.abs(u)


@dataclass(frozen=True)
class Coefficients:
    a: np.ndarray
    b: np.ndarray
    F: np.ndarray


@dataclass(frozen=True)
class CoefficientModel:
    """The triple ``(a, b, f)`` with jump measure ``q`` and initial value ``x0``.

    ``envelope`` is ``l_t`` and ``jump_envelope`` is ``h(u)``.  Together they
    state the linear-growth bound.  With ``debug=True`` every call to
    :meth:`coefficients` checks that bound and raises
    :class:`~jumpldp.errors.ConditionViolation` when it fails.
    """

    drift: Callable[[float, History], np.ndarray]
    diffusion: Callable[[float, History], np.ndarray]
    jump: Callable[[float, History, np.ndarray], np.ndarray] | None = None
    q: JumpMeasure = field(default_factory=JumpMeasure.none)
    envelope: Callable[[float], float] = _one
    jump_envelope: Callable[[np.ndarray], np.ndarray] = _abs_mark
    x0: float = 0.0
    name: str = "custom"
    debug: bool = False

    def coefficients(self, t: float, hist: History) -> Coefficients:
        shape = hist.batch_shape
        a = np.broadcast_to(np.asarray(self.drift(t, hist), dtype=float), shape)
        b = np.broadcast_to(np.asarray(self.diffusion(t, hist), dtype=float), shape)
        K = self.q.size
        if K and self.jump is not None:
            F = np.broadcast_to(np.asarray(self.jump(t, hist, self.q.marks), dtype=float), shape + (K,))
        else:
            F = np.zeros(shape + (K,))
        if self.debug:
            _assert_growth(self, t, hist, a, b, F)
        return Coefficients(a, b, F)

    def with_debug(self, debug: bool = True) -> "CoefficientModel":
        return replace(self, debug=debug)


def _growth_ratios(model, t, hist, a, b, F):
    env = model.envelope(t) * (1.0 + hist.sup_abs)
    h = np.asarray(model.jump_envelope(model.q.marks), dtype=float) if model.q.size else np.empty(0)
    with np.errstate(divide="ignore", invalid="ignore"):
        ra = np.where(np.abs(a) == 0, 0.0, np.abs(a) / env)
        rb = np.where(np.abs(b) == 0, 0.0, np.abs(b) / env)
        bound = h * env[..., None] if np.ndim(env) else h * env
        rf = np.where(np.abs(F) == 0, 0.0, np.abs(F) / bound)
    return ra, rb, rf


def _assert_growth(model, t, hist, a, b, F):
    ra, rb, rf = _growth_ratios(model, t, hist, a, b, F)
    worst = max(float(np.max(ra, initial=0)), float(np.max(rb, initial=0)), float(np.max(rf, initial=0)))
    if worst > 1.0 + GROWTH_SLACK:
        raise ConditionViolation(f"linear growth exceeded at t={t}: ratio {worst:.6g}")


def cramer_K(model: CoefficientModel, lam: float) -> float:
    """``K(lam) = int (exp(lam h(u)) - 1 - lam h(u)) q(du)``, exact for atoms."""
    q = model.q
    if not q.size:
        return 0.0
    h = np.asarray(model.jump_envelope(q.marks), dtype=float)
    x = lam * h
    with np.errstate(over="ignore"):
        terms = np.expm1(x) - x
    bad = ~np.isfinite(terms) & (q.weights > 0)
    if np.any(bad):
        raise CramerViolation(lam, float(q.marks[np.argmax(bad)]))
    terms = np.where(q.weights > 0, terms, 0.0)
    return max(0.0, math.fsum(terms * q.weights))


@dataclass(frozen=True)
class GrowthReport:
    max_ratio: float
    passed: bool
    worst_time: float
    worst_coefficient: str


def check_linear_growth(model: CoefficientModel, path: Path, T: float | None = None,
                        samples: int = 64) -> GrowthReport:
    """Largest ratio of ``|a|, |b|, |f|`` to their growth envelopes along ``path``.

    Passes iff the ratio stays below ``1 + 1e-9``.
    """
    T = path.T if T is None else T
    times = np.linspace(0.0, T, max(int(samples), 2))
    plain = model.with_debug(False) if model.debug else model
    best = (0.0, 0.0, "a")
    for t in times:
        hist = path.history(t)
        c = plain.coefficients(t, hist)
        ra, rb, rf = _growth_ratios(model, t, hist, c.a, c.b, c.F)
        for name, r in (("a", ra), ("b", rb), ("f", rf)):
            v = float(np.max(r, initial=0.0))
            if v > best[0]:
                best = (v, float(t), name)
    return GrowthReport(best[0], best[0] <= 1.0 + GROWTH_SLACK, best[1], best[2])


@dataclass(frozen=True)
class ContinuityReport:
    da: np.ndarray
    db: np.ndarray
    df: np.ndarray
    passed: bool


def check_c_continuity(model: CoefficientModel, phi: Path, perturbations: Sequence[Path],
                       t: float) -> ContinuityReport:
    """Differences ``|c(t, X^(k)) - c(t, phi)|`` along a shrinking sequence of perturbations.

    ``df`` has one column per atom.  The trend passes when the combined
    sequence is nonincreasing and ends below where it started, or is all
    zero.
    """
    base = model.coefficients(t, phi.history(t))
    da, db, df = [], [], []
    for X in perturbations:
        c = model.coefficients(t, X.history(t))
        da.append(abs(float(c.a - base.a)))
        db.append(abs(float(c.b - base.b)))
        df.append(np.abs(c.F - base.F))
    da, db = np.array(da), np.array(db)
    df = np.array(df).reshape(len(perturbations), model.q.size)
    total = np.maximum(np.maximum(da, db), df.max(axis=1, initial=0.0))
    tol = 1e-12 * (1.0 + np.max(total, initial=0.0))
    monotone = bool(np.all(np.diff(total) <= tol))
    shrinking = total.size == 0 or total[0] <= tol or total[-1] < total[0] - tol
    return ContinuityReport(da, db, df, monotone and shrinking)
