"""
Cumulant ``G(lam; t, X)``, its derivatives, and the Legendre transform ``H``.

    G(lam)  = lam a + lam^2 b^2 / 2 + int (e^{lam f} - 1 - lam f) q(du)
    g(lam)  = a + lam b^2 + int f (e^{lam f} - 1) q(du)
    g2(lam) = b^2 + int f^2 e^{lam f} q(du)
    H(y)    = sup_lam [lam y - G(lam)]

``H`` is obtained by inverting the strictly increasing map ``lam -> g(lam)``.
The array kernels below (``*_kernel``, :func:`solve_tilt`) work on coefficient
values directly.  The simulation engine uses them to solve one tilt per path
and per step in a single vectorised call.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import CumulantOverflow
from .model import CoefficientModel, History, Path

#: Exponents are capped here before ``exp`` so that no ``inf`` reaches the solver.
EXP_CAP = 700.0
#: ``exp`` of anything above this overflows in float64.
_EXP_OVERFLOW = 709.78


class TiltStatus(str, enum.Enum):
    INTERIOR = "interior"
    BOUNDARY_LOW = "boundary-low"
    BOUNDARY_HIGH = "boundary-high"
    DEGENERATE_POINT = "degenerate-point"
    INFINITE = "infinite"


# integer codes used by the array kernels
_INTERIOR, _LOW, _HIGH, _POINT, _INF = range(5)
_STATUS = (TiltStatus.INTERIOR, TiltStatus.BOUNDARY_LOW, TiltStatus.BOUNDARY_HIGH,
           TiltStatus.DEGENERATE_POINT, TiltStatus.INFINITE)


@dataclass(frozen=True)
class TiltOptions:
    tol_root: float = 1e-10
    boundary_tol: float = 1e-12
    max_iter: int = 200


@dataclass(frozen=True)
class TiltSolution:
    """Root ``Lambda`` of ``g(Lambda) = y`` together with ``H(y)``.

    ``lam`` is ``-inf``/``+inf`` at the lower/upper closure point of the
    range of ``g``.  ``H`` is ``inf`` when ``status`` is ``INFINITE``.
    """

    lam: float
    H: float
    status: TiltStatus
    iterations: int = 0

    @property
    def finite(self) -> bool:
        return self.status is not TiltStatus.INFINITE


# ---------------------------------------------------------------- kernels

def _wsum(v, w):
    # row-wise weighted sum; unlike a BLAS matvec it does not depend on the row count
    return (v * w).sum(axis=-1)


def _exp_terms(lam, F):
    x = np.asarray(lam)[..., None] * F
    return x, np.minimum(x, EXP_CAP)


def G_kernel(lam, a, b, F, w):
    lam = np.asarray(lam, dtype=float)
    x, xc = _exp_terms(lam, F)
    jump = _wsum(np.expm1(xc) - x, w) if w.size else 0.0
    return lam * a + 0.5 * lam * lam * b * b + jump


def g_kernel(lam, a, b, F, w):
    lam = np.asarray(lam, dtype=float)
    _, xc = _exp_terms(lam, F)
    jump = _wsum(F * np.expm1(xc), w) if w.size else 0.0
    return a + lam * b * b + jump


def g2_kernel(lam, a, b, F, w):
    lam = np.asarray(lam, dtype=float)
    _, xc = _exp_terms(lam, F)
    jump = _wsum(F * F * np.exp(xc), w) if w.size else 0.0
    return b * b + jump


def g_range(a, b, F, w):
    """Closure points of the range of ``g`` and the limiting values of ``H`` there.

    Returns ``(floor, ceil, H_floor, H_ceil)``; an unbounded side is ``-inf``/``+inf``.
    """
    shape = np.shape(a)
    if w.size:
        active = w > 0
        pos = ((F > 0) & active).any(axis=-1)
        neg = ((F < 0) & active).any(axis=-1)
        wF = _wsum(F, w)
        H_floor = np.where(F > 0, w, 0.0).sum(axis=-1)
        H_ceil = np.where(F < 0, w, 0.0).sum(axis=-1)
    else:
        pos = neg = np.zeros(shape, dtype=bool)
        wF = H_floor = H_ceil = np.zeros(shape)
    gauss = np.asarray(b) != 0
    floor = np.where(gauss | neg, -np.inf, a - wF)
    ceil = np.where(gauss | pos, np.inf, a - wF)
    return floor, ceil, H_floor, H_ceil


def solve_tilt(y, a, b, F, w, opts: TiltOptions | None = None):
    """Vectorised root of ``g(lam) = y`` with the corresponding ``H(y)``.

    All of ``y, a, b`` share a batch shape ``S`` and ``F`` is ``S + (K,)``.
    Returns arrays ``(lam, H, status, iterations)``.  Statuses use the
    integer codes of :data:`_STATUS`.

    Interior roots are bracketed by doubling from ``[-1, 1]``, then refined
    by Newton steps that fall back to bisection whenever a step leaves the
    bracket.  Elements stop updating once ``|g - y| <= tol (1 + |y|)``.
    Each element's result therefore does not depend on the rest of the
    batch.
    """
    opts = opts or TiltOptions()
    y, a, b = np.broadcast_arrays(*(np.asarray(v, dtype=float) for v in (y, a, b)))
    shape = y.shape
    F = np.broadcast_to(F, shape + (w.size,))
    lam = np.zeros(shape)
    H = np.zeros(shape)
    status = np.full(shape, _INTERIOR, dtype=np.int8)
    iters = np.zeros(shape, dtype=np.int32)

    floor, ceil, H_floor, H_ceil = g_range(a, b, F, w)
    btol = opts.boundary_tol * (1.0 + np.abs(y))
    # both ends finite only when g is constant: b = 0 and f = 0 q-a.e.
    flat = np.isfinite(floor) & np.isfinite(ceil)
    if np.any(flat):
        status[flat] = np.where(np.abs(y[flat] - a[flat]) <= btol[flat], _POINT, _INF)
    undecided = status == _INTERIOR
    low = undecided & np.isfinite(floor) & (np.abs(y - floor) <= btol)
    high = undecided & np.isfinite(ceil) & (np.abs(y - ceil) <= btol)
    out = undecided & ~low & ~high & ((y < floor) | (y > ceil))
    status[low], lam[low], H[low] = _LOW, -np.inf, H_floor[low]
    status[high], lam[high], H[high] = _HIGH, np.inf, H_ceil[high]
    status[out] = _INF
    H[status == _INF] = np.inf
    lam[status == _INF] = np.nan

    idx = np.nonzero(status.reshape(-1) == _INTERIOR)[0]
    if idx.size:
        ys, as_, bs = y.reshape(-1)[idx], a.reshape(-1)[idx], b.reshape(-1)[idx]
        Fs = F.reshape(y.size, w.size)[idx]
        root, it = _newton_bracketed(ys, as_, bs, Fs, w, opts)
        Hs = root * ys - G_kernel(root, as_, bs, Fs, w)
        lam.reshape(-1)[idx] = root
        H.reshape(-1)[idx] = np.maximum(Hs, 0.0)
        iters.reshape(-1)[idx] = it
    return lam, H, status, iters


def _newton_bracketed(y, a, b, F, w, opts):
    n = y.size
    lo = np.full(n, -1.0)
    hi = np.full(n, 1.0)
    # expand until g(lo) <= y <= g(hi); the range analysis guarantees termination
    for _ in range(1100):
        need = g_kernel(lo, a, b, F, w) > y
        if not need.any():
            break
        hi = np.where(need, np.minimum(hi, lo), hi)
        lo = np.where(need, 2.0 * lo, lo)
    for _ in range(1100):
        need = g_kernel(hi, a, b, F, w) < y
        if not need.any():
            break
        lo = np.where(need, np.maximum(lo, hi), lo)
        hi = np.where(need, 2.0 * hi, hi)

    lam = np.clip(np.zeros(n), lo, hi)
    tol = opts.tol_root * (1.0 + np.abs(y))
    it = np.zeros(n, dtype=np.int32)
    live = np.ones(n, dtype=bool)
    for _ in range(opts.max_iter):
        j = np.nonzero(live)[0]
        if not j.size:
            break
        lj, aj, bj, Fj, yj = lam[j], a[j], b[j], F[j], y[j]
        r = g_kernel(lj, aj, bj, Fj, w) - yj
        done = np.abs(r) <= tol[j]
        lo[j] = np.where(r < 0, lj, lo[j])
        hi[j] = np.where(r > 0, lj, hi[j])
        d = g2_kernel(lj, aj, bj, Fj, w)
        with np.errstate(divide="ignore", invalid="ignore"):
            step = lj - r / d
        bad = ~np.isfinite(step) | (step < lo[j]) | (step > hi[j])
        step = np.where(bad, 0.5 * (lo[j] + hi[j]), step)
        collapsed = (hi[j] - lo[j]) <= 4 * np.finfo(float).eps * np.maximum(1.0, np.abs(lj))
        finished = done | collapsed
        lam[j] = np.where(finished, lj, step)
        it[j] += (~finished).astype(np.int32)
        live[j] = ~finished
    return lam, it


# ---------------------------------------------------------------- public API

def _coeffs(model: CoefficientModel, t: float, X):
    hist = X if isinstance(X, History) else X.history(t)
    c = model.coefficients(t, hist)
    return c.a, c.b, c.F, model.q.weights


def _check_overflow(lam, F, w):
    x = np.asarray(lam, dtype=float)[..., None] * F
    if np.any((x > _EXP_OVERFLOW) & (w > 0)):
        raise CumulantOverflow(lam if np.ndim(lam) == 0 else lam[np.any(x > _EXP_OVERFLOW, axis=-1)][0])


def cumulant_G(model: CoefficientModel, lam, t: float, X: Path | History):
    """Cumulant ``G(lam; t, X)``; ``lam`` may be an array."""
    a, b, F, w = _coeffs(model, t, X)
    _check_overflow(lam, F, w)
    return G_kernel(lam, a, b, F, w)


def cumulant_g(model: CoefficientModel, lam, t: float, X: Path | History):
    """First derivative of the cumulant in ``lam``."""
    a, b, F, w = _coeffs(model, t, X)
    _check_overflow(lam, F, w)
    return g_kernel(lam, a, b, F, w)


def cumulant_g2(model: CoefficientModel, lam, t: float, X: Path | History):
    """Second derivative of the cumulant in ``lam`` (nonnegative)."""
    a, b, F, w = _coeffs(model, t, X)
    _check_overflow(lam, F, w)
    return g2_kernel(lam, a, b, F, w)


def solve_lambda(model: CoefficientModel, y: float, t: float, X: Path | History,
                 opts: TiltOptions | None = None) -> TiltSolution:
    """Solve ``g(Lambda; t, X) = y``.

    Examples
    --------
    >>> from jumpldp.catalogue import brownian
    >>> from jumpldp.model import Path
    >>> sol = solve_lambda(brownian(mu=0.3, sigma=2.0), 1.3, 0.0, Path.constant(0.0, 1.0, 0.5))
    >>> round(sol.lam, 12), sol.status.value
    (0.25, 'interior')
    """
    a, b, F, w = _coeffs(model, t, X)
    lam, H, status, it = solve_tilt(y, a, b, F, w, opts)
    return TiltSolution(float(lam), float(H), _STATUS[int(status)], int(it))


def legendre_H(model: CoefficientModel, y: float, t: float, X: Path | History,
               opts: TiltOptions | None = None) -> TiltSolution:
    """``H(y; t, X) = sup_lam [lam y - G(lam; t, X)]``.

    Inside the range of ``g`` the supremum is attained at the tilt root.
    At a finite closure point of the range (pure-jump, one-signed ``f``)
    the value is the closed-form limit.  At the lower point this is the
    mass of ``{f > 0}``, i.e. ``q(E)`` when ``f > 0`` everywhere.  Outside
    the closure of the range ``H`` is ``inf``.
    """
    return solve_lambda(model, y, t, X, opts)


# ---------------------------------------------------------------- nondegeneracy

class Degeneracy(str, enum.Enum):
    NONDEGENERATE = "nondegenerate"
    DEGENERATE = "degenerate"
    INDETERMINATE = "indeterminate"


class BoundKind(str, enum.Enum):
    LOG = "log"
    LINEAR = "linear"
    MIXED_PLUS = "mixed-plus"
    MIXED_MINUS = "mixed-minus"
    UNSUPPORTED = "unsupported"


@dataclass(frozen=True)
class DegeneracyReport:
    """Probe-based classification of ``f+``, ``f-`` and ``b`` near a path.

    ``bound_kind`` names the growth function ``g(y)`` available for the tilt
    (see :func:`bound_function`).  ``poisson_type`` flags models with
    ``b = 0`` and ``f`` bounded away from zero, the pure-jump case whose
    floor path is handled separately.
    """

    f_plus: Degeneracy
    f_minus: Degeneracy
    b: Degeneracy
    bound_kind: BoundKind
    poisson_type: bool
    delta: float
    gamma: float
    probes: int
    eps_T: float = field(default=float("nan"))

    @property
    def supported(self) -> bool:
        return self.bound_kind is not BoundKind.UNSUPPORTED


def bound_function(kind: BoundKind):
    """The growth function ``g(y)`` belonging to a bound kind."""
    kind = BoundKind(kind)
    if kind is BoundKind.LOG:
        return lambda y: np.log1p(np.abs(y))
    if kind is BoundKind.LINEAR:
        return lambda y: 1.0 + np.abs(y)
    if kind is BoundKind.MIXED_PLUS:
        return lambda y: np.where(y >= 0, 1.0 + np.log1p(np.maximum(y, 0)), 1.0 - np.minimum(y, 0))
    if kind is BoundKind.MIXED_MINUS:
        return lambda y: np.where(y >= 0, 1.0 + np.maximum(y, 0), 1.0 + np.log1p(-np.minimum(y, 0)))
    raise ValueError("no growth function for unsupported models")


def probe_paths(phi: Path, delta: float, count: int = 32) -> list[Path]:
    """Perturbations ``X`` of ``phi`` with ``sup |X - phi| <= delta``.

    ``phi`` itself, constant shifts ``+-delta`` and intermediate levels,
    then oscillating profiles of increasing frequency.
    """
    count = max(int(count), 3)
    T = phi.T
    probes = [phi, phi.shifted(delta), phi.shifted(-delta)]
    levels = np.linspace(-1, 1, 5)[1:-1]
    for c in levels:
        if len(probes) >= count:
            break
        probes.append(phi.shifted(c * delta))
    k = 1
    while len(probes) < count:
        for sign in (1.0, -1.0):
            if len(probes) >= count:
                break
            wave = sign * delta * np.sin(np.pi * k * phi.grid / T)
            probes.append(Path(phi.grid, phi.values + wave, phi.interp))
        k += 1
    return probes


def classify_nondegeneracy(model: CoefficientModel, phi: Path, T: float | None = None,
                           delta: float = 0.1, gamma: float = 1e-3,
                           probes: int = 32) -> DegeneracyReport:
    """Classify ``f+``, ``f-`` and ``b`` uniformly on ``[0, T]`` near ``phi``.

    The definitions quantify over every path in the ``delta``-tube, so they
    are checked only on ``probes`` sample perturbations.  A component is
    recorded as degenerate or nondegenerate when every probe agrees, and as
    indeterminate otherwise.
    """
    if not (delta > 0 and gamma > 0):
        raise ValueError("delta and gamma must be positive")
    T = phi.T if T is None else T
    w = model.q.weights
    times = phi.grid[phi.grid <= T]
    fp_nd, fp_d, fm_nd, fm_d, b_nd = [], [], [], [], []
    pois, eps = True, np.inf
    for X in probe_paths(phi, delta, probes):
        sup_pb = sup_p = sup_mb = sup_m = 0.0
        inf_b2 = np.inf
        for t in times:
            c = model.coefficients(t, X.history(t))
            F = np.asarray(c.F)
            fplus, fminus = np.maximum(F, 0), np.maximum(-F, 0)
            sup_pb = max(sup_pb, float((fplus * (fplus > gamma)) @ w) if w.size else 0.0)
            sup_p = max(sup_p, float(fplus @ w) if w.size else 0.0)
            sup_mb = max(sup_mb, float((fminus * (fminus > gamma)) @ w) if w.size else 0.0)
            sup_m = max(sup_m, float(fminus @ w) if w.size else 0.0)
            b2 = float(c.b) ** 2
            inf_b2 = min(inf_b2, b2)
            live = w > 0
            if b2 != 0.0 or not live.any():
                pois = False
            else:
                eps = min(eps, float(F[live].min()))
        fp_nd.append(sup_pb > 0)
        fp_d.append(sup_p == 0)
        fm_nd.append(sup_mb > 0)
        fm_d.append(sup_m == 0)
        b_nd.append(inf_b2 > 0)

    def verdict(nd, d):
        if all(nd):
            return Degeneracy.NONDEGENERATE
        if all(d):
            return Degeneracy.DEGENERATE
        return Degeneracy.INDETERMINATE

    fp, fm = verdict(fp_nd, fp_d), verdict(fm_nd, fm_d)
    bb = Degeneracy.NONDEGENERATE if all(b_nd) else Degeneracy.DEGENERATE
    ND, D = Degeneracy.NONDEGENERATE, Degeneracy.DEGENERATE
    if fp is ND and fm is ND:
        kind = BoundKind.LOG
    elif bb is ND and fp is D and fm is D:
        kind = BoundKind.LINEAR
    elif bb is ND and fp is ND and fm is D:
        kind = BoundKind.MIXED_PLUS
    elif bb is ND and fp is D and fm is ND:
        kind = BoundKind.MIXED_MINUS
    else:
        kind = BoundKind.UNSUPPORTED
    pois = pois and eps > 0
    return DegeneracyReport(fp, fm, bb, kind, bool(pois), float(delta), float(gamma),
                            int(probes), float(eps) if pois else float("nan"))
