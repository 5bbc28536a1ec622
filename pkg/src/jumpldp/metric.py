"""
Distances on path space and empirical exponential-tightness diagnostics.

The Skorokhod-Lindvall metric on ``[0, inf)`` compresses the path on
``[0, k+1]`` into ``[0, 1]``:

    alpha(t) = -log(1 - t),
    g_k(t)   = I(t <= k) + (k + 1 - t) I(k < t <= k + 1),
    X^k_t    = X_{alpha(t) g_k(alpha(t))}  (t < 1),  X^k_1 = 0,
    rho(X, Y) = sum_k 2^{-k} rho_k / (1 + rho_k),  rho_k = d0(X^k, Y^k),

where ``d0`` is the Billingsley metric on ``D[0, 1]``.  Only brackets of
``rho`` are computed.  The exact infimum over time changes is a continuous
optimisation problem.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .model import CoefficientModel, Path
from .simulate import SimConfig, run_paths


# ---------------------------------------------------------------- sup distance

def _merged_grid(X: Path, Y: Path, T: float) -> np.ndarray:
    pts = np.union1d(X.grid, Y.grid)
    return np.union1d(pts[pts <= T], [T])


def sup_distance(X: Path, phi: Path, T: float | None = None) -> float:
    """``sup_{t <= T} |X_t - phi_t|``, exact for linear and step paths.

    Both values and left limits are compared on the merged grid.  Beyond
    its last grid point a path is held constant.
    """
    T = min(X.T, phi.T) if T is None else float(T)
    t = _merged_grid(X, phi, T)
    d = np.abs(X.value_at(t) - phi.value_at(t))
    dl = np.abs(X.left_limit(t) - phi.left_limit(t))
    return float(max(d.max(), dl.max()))


# ---------------------------------------------------------------- compression

def g_k(t, k: int):
    t = np.asarray(t, dtype=float)
    return np.where(t <= k, 1.0, np.where(t <= k + 1, k + 1 - t, 0.0))


def compressed_time(t, k: int):
    """``alpha(t) g_k(alpha(t))`` for ``t in [0, 1)``; ``0`` at ``t = 1``."""
    t = np.asarray(t, dtype=float)
    with np.errstate(divide="ignore"):
        a = -np.log1p(-np.minimum(t, 1.0))
    a = np.where(np.isfinite(a), a, k + 2.0)
    return a * g_k(a, k)


def compressed_value(path: Path, t, k: int):
    t = np.asarray(t, dtype=float)
    return np.where(t >= 1.0, 0.0, path.value_at(compressed_time(t, k)))


def _controls(path: Path, k: int) -> np.ndarray:
    """Times in [0, 1] at which ``path^k`` may fail to be monotone or continuous."""
    knots = path.grid[path.grid <= k]
    rise = -np.expm1(-knots)
    # the folded part alpha (k + 1 - alpha) = s has its root in [k, k + 1]
    fold_alpha = 0.5 * ((k + 1) + np.sqrt(np.maximum((k + 1) ** 2 - 4 * knots, 0.0)))
    fall = -np.expm1(-fold_alpha)
    ends = -np.expm1(-np.array([float(k), float(k + 1)]))
    return np.unique(np.concatenate(([0.0, 1.0], rise, fall, ends)))


def _dense(k: int, samples: int) -> np.ndarray:
    a = np.linspace(0.0, k + 1.0, max(int(samples), 2))
    return -np.expm1(-a)


@dataclass(frozen=True)
class MetricEstimate:
    """Bracket ``lower <= rho <= upper`` (``lower`` up to the stated search slack)."""

    lower: float
    upper: float
    time_change_grid: int
    slack: float = 0.0
    levels: int = 0
    upper_levels: list[float] = field(default_factory=list)
    lower_levels: list[float] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"lower": self.lower, "upper": self.upper, "time_change_grid": self.time_change_grid,
                "slack": self.slack, "levels": self.levels}


def _cell_bound(tt, Y, Z, lin_y: bool, lin_z: bool, yfun, zfun, same_clock: bool = False):
    """Rigorous ``sup |Y - Z|`` over ``[t_0, t_end]`` from values on a control set.

    Between consecutive controls a linear path is monotone (bounded by its
    endpoint values) and a step path is constant (its midpoint value).
    With ``same_clock`` both paths are read through the same time change,
    so for two linear paths the difference itself is monotone per cell.
    """
    point = np.abs(Y - Z).max(axis=-1)
    if same_clock and lin_y and lin_z:
        return point
    mid = 0.5 * (tt[..., 1:] + tt[..., :-1])
    if lin_y:
        ylo, yhi = np.minimum(Y[..., 1:], Y[..., :-1]), np.maximum(Y[..., 1:], Y[..., :-1])
    else:
        ylo = yhi = yfun(mid)
    if lin_z:
        zlo, zhi = np.minimum(Z[..., 1:], Z[..., :-1]), np.maximum(Z[..., 1:], Z[..., :-1])
    else:
        zlo = zhi = zfun(mid)
    cell = np.maximum(np.abs(yhi - zlo), np.abs(ylo - zhi))
    # zero-width cells carry no interior
    cell = np.where(tt[..., 1:] > tt[..., :-1], cell, 0.0)
    return np.maximum(point, cell.max(axis=-1))


def _level(X: Path, phi: Path, k: int, res: int, samples: int):
    """Upper bound, rigorous lower bound, best searched value and slack for ``d0(X^k, phi^k)``."""
    cx, cz = _controls(X, k), _controls(phi, k)
    dense = _dense(k, samples)
    lin_x, lin_z = X.interp == "linear", phi.interp == "linear"

    def yv(t):
        t = np.asarray(t)
        return np.where(t >= 1.0, 0.0, X.value_at(compressed_time(t, k)))

    def zv(t):
        t = np.asarray(t)
        return np.where(t >= 1.0, 0.0, phi.value_at(compressed_time(t, k)))

    # one-breakpoint piecewise-linear time changes mu: (0,0) - (s,v) - (1,1)
    nodes = np.linspace(0.0, 1.0, res + 2)[1:-1]
    S, V = np.meshgrid(nodes, nodes, indexing="ij")
    S, V = S.ravel(), V.ravel()
    logterm = np.maximum(np.abs(np.log(V / S)), np.abs(np.log((1 - V) / (1 - S))))

    def mu(t):
        return np.where(t <= S[:, None], t * (V / S)[:, None],
                        V[:, None] + (t - S[:, None]) * ((1 - V) / (1 - S))[:, None])

    def mu_inv(u):
        return np.where(u <= V[:, None], u * (S / V)[:, None],
                        S[:, None] + (u - V[:, None]) * ((1 - S) / (1 - V))[:, None])

    base = np.concatenate((cx, dense))
    tt = np.concatenate((np.broadcast_to(base, (S.size, base.size)), mu_inv(cz[None, :]), S[:, None]), axis=1)
    tt = np.sort(np.minimum(tt, 1.0), axis=1)
    # just below t = 1 both compressed paths sit at their initial values
    body = tt < 1.0
    Y = np.where(body, yv(tt), 0.0)
    Zt = mu(tt)
    Z = np.where(body, zv(Zt), 0.0)
    Yb = np.where(body, Y, X.x0)
    Zb = np.where(body, Z, phi.x0)
    sup_cells = _cell_bound(tt, Yb, Zb, lin_x, lin_z,
                            lambda m: yv(m), lambda m: zv(mu(m)))
    cand = sup_cells + logterm
    best = float(cand.min())

    # identity time change, evaluated the same way
    ti = np.unique(np.concatenate((cx, cz, dense)))[None, :]
    bodyi = ti < 1.0
    Yi = np.where(bodyi, yv(ti), X.x0)
    Zi = np.where(bodyi, zv(ti), phi.x0)
    ident = float(_cell_bound(ti, Yi, Zi, lin_x, lin_z, yv, zv, same_clock=True)[0])

    # lower bounds valid for every time change: fixed endpoints and value ranges
    lo = abs(X.x0 - phi.x0)
    yvals = yv(ti[0][ti[0] < 1.0])
    zvals = zv(ti[0][ti[0] < 1.0])
    lo = max(lo, _range_gap(yvals, zvals, lin_z), _range_gap(zvals, yvals, lin_x))

    # search slack: oscillation of phi^k over one step of the search grid
    h = 2.0 / (res + 1)
    dz = zv(dense[dense < 1.0])
    slack = _oscillation(dense[dense < 1.0], dz, h)
    return min(best, ident), ident, lo, best, slack


def _range_gap(vals, other, other_linear: bool) -> float:
    """``max_v dist(v, range(other) U {0})`` with ``range`` an interval for linear paths."""
    if other_linear:
        lo, hi = other.min(), other.max()
        d = np.maximum(np.maximum(lo - vals, vals - hi), 0.0)
    else:
        pts = np.unique(other)
        idx = np.clip(np.searchsorted(pts, vals), 1, pts.size - 1) if pts.size > 1 else np.zeros(vals.size, int)
        d = np.minimum(np.abs(vals - pts[idx]), np.abs(vals - pts[np.maximum(idx - 1, 0)]))
    return float(np.minimum(d, np.abs(vals)).max(initial=0.0))


def _oscillation(t, v, h) -> float:
    j = np.searchsorted(t, t + h, side="right")
    out = 0.0
    for i in range(t.size):
        seg = v[i:j[i]]
        out = max(out, float(seg.max() - seg.min()))
    return out


def skorokhod_rho(X: Path, phi: Path, K: int = 4, res: int = 16, samples: int = 256) -> MetricEstimate:
    """Bracket the Skorokhod-Lindvall distance ``rho(X, phi)``.

    ``upper`` is the smallest of

    * ``sup_{t <= k+1} |X - phi| + 2^{-k}`` for ``k = 1..K``;
    * ``sum_{k<=K} 2^{-k} u_k / (1 + u_k) + 2^{-K} S / (1 + S)`` with ``u_k`` the
      best of the identity and ``res**2`` one-breakpoint piecewise-linear time
      changes, each evaluated rigorously, and ``S`` the overall sup distance.

    ``lower`` is ``sum_k 2^{-k} r_k / (1 + r_k)``.  Here ``r_k`` is the larger
    of two values.  The first is a bound valid for every time change
    (fixed endpoints, value ranges).  The second is the best searched value
    minus the search slack, i.e. the oscillation of ``phi^k`` over two grid
    steps.  ``lower`` is capped at ``upper``.
    """
    if K < 1 or res < 2:
        raise ValueError("need K >= 1 and res >= 2")
    horizon = max(X.T, phi.T)
    S = sup_distance(X, phi, max(horizon, K + 1.0))
    eq15 = min(sup_distance(X, phi, k + 1.0) + 2.0 ** -k for k in range(1, K + 1))
    ups, lows, slack = [], [], 0.0
    for k in range(1, K + 1):
        u, ident, rig, best, sl = _level(X, phi, k, res, samples)
        ups.append(u)
        lows.append(max(rig, best - sl, 0.0))
        slack = max(slack, sl)
    refined = math.fsum(2.0 ** -k * u / (1 + u) for k, u in zip(range(1, K + 1), ups))
    refined += 2.0 ** -K * S / (1 + S)
    upper = min(eq15, refined)
    lower = math.fsum(2.0 ** -k * r / (1 + r) for k, r in zip(range(1, K + 1), lows))
    lower = min(lower, upper)
    return MetricEstimate(float(lower), float(upper), int(res), float(slack), int(K), ups, lows)


# ---------------------------------------------------------------- modulus

def modulus_Wk(phi: Path, sigma: float, k: int) -> float:
    """``W_k(phi, sigma) = sup_{u, v <= k+1, |u - v| <= sigma} |phi(u g_k(u)) - phi(v g_k(v))|``.

    ``psi(u) = phi(u g_k(u))`` is monotone between the preimages of the
    knots of ``phi``.  The supremum over each window ``[u, u + sigma]`` is
    therefore attained on those preimages, their ``sigma``-shifts and the
    window ends.
    """
    if not sigma > 0:
        raise ValueError("sigma must be positive")
    top = k + 1.0
    knots = phi.grid[phi.grid <= k]
    fold = 0.5 * ((k + 1) + np.sqrt(np.maximum((k + 1) ** 2 - 4 * knots, 0.0)))
    ctrl = np.unique(np.concatenate(([0.0, float(k), top], knots, fold)))
    pts = np.unique(np.clip(np.concatenate((ctrl, ctrl - sigma, ctrl + sigma)), 0.0, top))
    psi = phi.value_at(pts * g_k(pts, k))
    if phi.interp == "step":
        # left limits matter where psi jumps
        psi_l = phi.left_limit(pts * g_k(pts, k))
        vals = np.concatenate((psi, psi_l))
        pts2 = np.concatenate((pts, pts))
        order = np.argsort(pts2, kind="stable")
        pts, psi = pts2[order], vals[order]
    hi_idx = np.searchsorted(pts, pts + sigma * (1 + 1e-12), side="right")
    mx, mn = _range_tables(psi)
    best = 0.0
    for i in range(pts.size):
        j = hi_idx[i]
        best = max(best, _query(mx, i, j, np.maximum) - _query(mn, i, j, np.minimum))
    return float(best)


def _range_tables(v):
    mx, mn = [v], [v]
    span = 1
    while 2 * span <= v.size:
        mx.append(np.maximum(mx[-1][:-span], mx[-1][span:]))
        mn.append(np.minimum(mn[-1][:-span], mn[-1][span:]))
        span *= 2
    return mx, mn


def _query(table, i, j, op):
    length = int(j - i)
    lvl = length.bit_length() - 1
    return float(op(table[lvl][i], table[lvl][j - (1 << lvl)]))


# ---------------------------------------------------------------- tightness

@dataclass(frozen=True)
class TightnessRow:
    n: int
    condition: str       # "i": tail of the running max, "ii": increment tail
    c_or_delta: float
    statistic: float     # n^{-1} log p_hat, -inf when nothing was observed
    p_hat: float
    std_err: float       # delta-method error of the statistic
    flag: bool           # monotone trend holds for this n and condition


def _stat(p, M, n):
    if p <= 0:
        return -math.inf, math.nan
    se_p = math.sqrt(p * (1 - p) / M)
    return math.log(p) / n, se_p / (p * n)


def tightness_diagnostics(model: CoefficientModel, n_list: Sequence[int], L: float,
                          c_grid: Sequence[float], delta_grid: Sequence[float], eta: float,
                          M: int, dt: float = 0.01, seed: int = 0, starts: int = 10,
                          threads: int = 1) -> list[TightnessRow]:
    """Empirical conditions for exponential tightness.

    Condition i) is ``n^{-1} log P(X*_L >= c)`` over ``c_grid``.  Condition
    ii) is ``n^{-1} log max_s P(sup_{t <= delta} |X_{s+t} - X_s| >= eta)``,
    taken over ``starts`` deterministic start times in ``[0, L]``.  The
    supremum over stopping times is replaced by those start times,
    so ii) is an underestimate.  Rows with no observed event hold ``-inf``.
    """
    c_grid = sorted(float(c) for c in c_grid)
    delta_grid = sorted(float(d) for d in delta_grid)
    T = L + max(delta_grid)
    T = math.ceil(T / dt - 1e-9) * dt
    rows: list[TightnessRow] = []
    for n in n_list:
        cfg = SimConfig(n=int(n), T=T, dt=dt, seed=int(seed), threads=threads)
        grid = cfg.grid
        in_L = grid <= L + 1e-12
        s_idx = np.unique(np.round(np.linspace(0, L, max(int(starts), 1)) / dt).astype(int))
        widths = [int(round(d / dt)) for d in delta_grid]

        def summary(res):
            X = res.X
            xstar = np.abs(X[:, in_L]).max(axis=1)
            inc = np.zeros((len(widths), s_idx.size, X.shape[0]), dtype=bool)
            for a, wdt in enumerate(widths):
                for b, s in enumerate(s_idx):
                    seg = X[:, s:s + wdt + 1]
                    inc[a, b] = np.abs(seg - X[:, s:s + 1]).max(axis=1) >= eta
            return xstar, inc.sum(axis=2)

        parts = run_paths(model, cfg, M, summary=summary)
        xstar = np.concatenate([p[0] for p in parts])
        inc = sum(p[1] for p in parts)
        stats_i = []
        for c in c_grid:
            p = float(np.mean(xstar >= c))
            stats_i.append((c,) + (p,) + _stat(p, M, n))
        flag_i = _nonincreasing([s[2] for s in stats_i])
        for c, p, st, se in stats_i:
            rows.append(TightnessRow(int(n), "i", c, st, p, se, flag_i))
        stats_ii = []
        for a, d in enumerate(delta_grid):
            p = float(inc[a].max() / M)
            stats_ii.append((d, p) + _stat(p, M, n))
        # decreasing as delta shrinks, i.e. nondecreasing along the sorted grid
        flag_ii = _nonincreasing([s[2] for s in stats_ii][::-1])
        for d, p, st, se in stats_ii:
            rows.append(TightnessRow(int(n), "ii", d, st, p, se, flag_ii))
    return rows


def _nonincreasing(vals) -> bool:
    v = np.array(vals, dtype=float)
    if v.size < 2:
        return True
    prev = v[:-1]
    nxt = v[1:]
    return bool(np.all((nxt <= prev) | (np.isneginf(nxt))))


TIGHTNESS_COLUMNS = ("n", "condition", "c_or_delta", "statistic", "std_err", "flag")


def write_tightness_csv(rows: Sequence[TightnessRow], file) -> None:
    with open(file, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(TIGHTNESS_COLUMNS)
        for r in rows:
            w.writerow([r.n, r.condition, repr(r.c_or_delta), _fmt(r.statistic), _fmt(r.std_err),
                        str(r.flag).lower()])


def _fmt(x: float) -> str:
    if math.isnan(x):
        return "nan"
    if math.isinf(x):
        return "-inf" if x < 0 else "inf"
    return repr(float(x))
