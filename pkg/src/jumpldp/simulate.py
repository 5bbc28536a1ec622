"""
Euler simulation of ``X^n`` under ``P`` and under the tilted measure, with
the discrete likelihood ratio and tube-probability estimators.

Every path draws from its own counter-based stream.  The stream is
``Philox`` keyed by ``(seed, path index)``, and each path consumes ``m``
standard normals, then ``m * K`` uniforms, in that order.  A path is
therefore the same whether it is simulated alone, in a batch, or on any
worker thread.

The tilted step at ``t_k`` (before the tube is left) uses
``Lambda_k = Lambda(phi'_k; t_k, X)``:

* Gaussian increment: mean ``(a + Lambda_k b^2) dt``, variance ``b^2 dt / n``;
* jump count at atom ``i``: Poisson with mean ``n dt w_i exp(Lambda_k f_i)``;
* compensator ``dt * sum_i w_i f_i``: untilted;
* ``log Z += n [Lambda_k (X_{k+1} - X_k) - G(Lambda_k) dt]``.

The last line is the exact log density ratio of the discrete step.  The
estimators are therefore unbiased for the discretised process.
"""
from __future__ import annotations

import enum
import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .cumulant import _HIGH, _INF, _LOW, G_kernel, g_kernel, solve_tilt
from .errors import PathExplosion
from .model import CoefficientModel, History, Path, uniform_grid

EXPLOSION_LEVEL = 1e12
#: Above this mean, Poisson counts come from scipy's quantile function.
_SMALL_MEAN = 30.0
#: A path whose tilt root fails on more than this share of steps is excluded.
ROOT_FAILURE_LIMIT = 0.01


@dataclass(frozen=True)
class SimConfig:
    """Scale ``n``, horizon ``T``, step ``dt``, master seed and tube radius ``gamma``.

    ``gamma=None`` lets :func:`estimate_tube_probability` pick ``2 * delta``.
    ``gamma=0`` switches the tilt off entirely (``tau = 0``).
    """

    n: int
    T: float = 1.0
    dt: float = 0.01
    seed: int = 0
    gamma: float | None = None
    lambda_cap: float = 50.0
    batch_size: int = 4096
    threads: int = 1

    def __post_init__(self):
        if int(self.n) != self.n or self.n < 1:
            raise ValueError("n must be an integer >= 1")
        uniform_grid(self.T, self.dt)
        if not (0 <= int(self.seed) < 2**64):
            raise ValueError("seed must be an unsigned 64-bit integer")
        if self.gamma is not None and not self.gamma >= 0:
            raise ValueError("gamma must be >= 0")
        if not self.lambda_cap > 0:
            raise ValueError("lambda_cap must be positive")
        if self.batch_size < 1 or self.threads < 1:
            raise ValueError("batch_size and threads must be >= 1")

    @property
    def grid(self) -> np.ndarray:
        return uniform_grid(self.T, self.dt)

    @property
    def steps(self) -> int:
        return self.grid.size - 1


def path_stream(seed: int, index: int) -> np.random.Generator:
    """The random stream of path ``index`` under master ``seed``."""
    return np.random.Generator(np.random.Philox(key=np.array([seed, index], dtype=np.uint64)))


class Mode(str, enum.Enum):
    P = "P"              # original dynamics, no likelihood
    TILTED = "tilted"    # tilted dynamics, log Z accumulated
    P_WEIGHT = "P-weight"  # original dynamics, log Z of the tilt policy accumulated


@dataclass
class _Batch:
    X: np.ndarray
    logZ: np.ndarray
    tau: np.ndarray          # step index at which the tube was left, -1 if never
    clamps: np.ndarray
    failures: np.ndarray
    lam: np.ndarray | None = None
    qv_pred: np.ndarray | None = None
    qv_real: np.ndarray | None = None


def _draws(cfg: SimConfig, K: int, start: int, count: int, stream=None):
    m = cfg.steps
    xi = np.empty((count, m))
    u = np.empty((count, m, K))
    for j in range(count):
        g = stream if stream is not None else path_stream(cfg.seed, start + j)
        xi[j] = g.standard_normal(m)
        if K:
            u[j] = g.random((m, K))
    return xi, u


def poisson_from_uniform(u: np.ndarray, mean: np.ndarray) -> np.ndarray:
    """Poisson(mean) variates by inversion of uniforms ``u`` (elementwise)."""
    u, mean = np.broadcast_arrays(np.asarray(u, float), np.asarray(mean, float))
    out = np.zeros(u.shape)
    small = mean <= _SMALL_MEAN
    if np.any(small):
        us, ms = u[small], mean[small]
        p = np.exp(-ms)
        cdf = p.copy()
        k = np.zeros(us.shape)
        live = us > cdf
        while np.any(live):
            k = np.where(live, k + 1, k)
            p = np.where(live, p * ms / np.maximum(k, 1), p)
            cdf = np.where(live, cdf + p, cdf)
            live = live & (us > cdf) & (p > 0)
        out[small] = k
    big = ~small
    if np.any(big):
        ub = np.clip(u[big], 1e-300, 1.0 - 2.0**-53)
        out[big] = stats.poisson.ppf(ub, mean[big])
    return out


def _phi_on_grid(phi: Path | None, grid: np.ndarray):
    if phi is None:
        return None, None
    values = phi.value_at(grid)
    cells = np.clip(np.searchsorted(phi.grid, grid[:-1], side="right") - 1, 0, phi.grid.size - 2)
    return values, phi.slopes[cells]


def _run_batch(model: CoefficientModel, cfg: SimConfig, mode: Mode, phi_vals, phi_slopes,
               gamma: float, start: int, count: int, stream=None, record: bool = False,
               qv: bool = False) -> _Batch:
    n, dt = float(cfg.n), cfg.dt
    grid = cfg.grid
    m = grid.size - 1
    w = model.q.weights
    K = w.size
    xi, u = _draws(cfg, K, start, count, stream)
    sq = math.sqrt(dt / n)

    X = np.empty((count, m + 1))
    X[:, 0] = model.x0
    sup = np.abs(X[:, 0]).copy()
    logZ = np.zeros(count)
    tau = np.full(count, -1, dtype=np.int64)
    clamps = np.zeros(count, dtype=np.int64)
    failures = np.zeros(count, dtype=np.int64)
    lam_rec = np.zeros((count, m)) if record else None
    qv_pred = np.zeros(count) if qv else None
    qv_real = np.zeros(count) if qv else None
    tilting = mode is not Mode.P and gamma > 0
    if mode is not Mode.P and gamma <= 0:
        tau[:] = 0
    alive = np.full(count, tilting)

    for k in range(m):
        hist = History(grid[:k + 1], X[:, :k + 1], sup)
        c = model.coefficients(float(grid[k]), hist)
        a, b, F = c.a, c.b, c.F
        lam = np.zeros(count)
        if tilting:
            out = np.abs(X[:, k] - phi_vals[k]) > gamma
            tau[alive & out] = k
            alive &= ~out
            if alive.any():
                idx = np.nonzero(alive)[0]
                li, _, st, _ = solve_tilt(np.full(idx.size, phi_slopes[k]), a[idx], b[idx], F[idx], w)
                fail = st == _INF
                bound = (st == _LOW) | (st == _HIGH)
                li = np.where(fail, 0.0, li)
                li = np.where(bound, np.sign(li) * cfg.lambda_cap, li)
                over = np.abs(li) > cfg.lambda_cap
                li = np.clip(li, -cfg.lambda_cap, cfg.lambda_cap)
                clamps[idx] += (bound | over).astype(np.int64)
                failures[idx] += fail.astype(np.int64)
                lam[idx] = li
        drift = a * dt
        if mode is Mode.TILTED:
            drift = drift + lam * b * b * dt
        step = drift + b * sq * xi[:, k]
        if K:
            expo = lam[:, None] * F if mode is Mode.TILTED else 0.0
            mean = n * dt * w * np.exp(np.minimum(expo, 700.0))
            N = poisson_from_uniform(u[:, k, :], mean)
            step = step + (N * F).sum(axis=-1) / n - dt * (F * w).sum(axis=-1)
        X[:, k + 1] = X[:, k] + step
        if mode is not Mode.P:
            Gk = G_kernel(lam, a, b, F, w)
            logZ += n * (lam * step - Gk * dt)
        if qv:
            gk = g_kernel(lam, a, b, F, w) if mode is Mode.TILTED else g_kernel(np.zeros(count), a, b, F, w)
            lam_q = lam if mode is Mode.TILTED else np.zeros(count)
            var = b * b / n
            if K:
                var = var + (F * F * np.exp(np.minimum(lam_q[:, None] * F, 700.0)) * w).sum(axis=-1) / n
            qv_pred += var * dt
            qv_real += (step - gk * dt) ** 2
        if record:
            lam_rec[:, k] = lam
        np.maximum(sup, np.abs(X[:, k + 1]), out=sup)
        if not np.all(np.isfinite(X[:, k + 1])) or np.any(sup > EXPLOSION_LEVEL):
            raise PathExplosion(k + 1)
    if tilting:
        out = alive & (np.abs(X[:, m] - phi_vals[m]) > gamma)
        tau[out] = m
    return _Batch(X, logZ, tau, clamps, failures, lam_rec, qv_pred, qv_real)


def _gamma(cfg: SimConfig, delta: float | None = None) -> float:
    if cfg.gamma is not None:
        return float(cfg.gamma)
    if delta is None:
        raise ValueError("gamma must be set in the config when no tube radius delta is given")
    return 2.0 * float(delta)


def _resolve_stream(cfg: SimConfig, rng_stream):
    if rng_stream is None:
        return 0, None
    if isinstance(rng_stream, (int, np.integer)):
        return int(rng_stream), None
    if isinstance(rng_stream, np.random.Generator):
        return 0, rng_stream
    raise TypeError("rng_stream must be a path index or a numpy Generator")


@dataclass(frozen=True)
class TiltRecord:
    """Likelihood and tilt trace of one tilted path.

    ``tau_step`` is the grid index at which the path first left the
    ``gamma``-tube, or ``None``.  ``lam`` is zero from that index on.
    """

    logZ: float
    tau_hit: bool
    tau_time: float | None
    tau_step: int | None
    lam: np.ndarray
    clamp_count: int = 0
    root_failures: int = 0


def simulate_path(model: CoefficientModel, cfg: SimConfig, rng_stream=0) -> Path:
    """One Euler path under ``P``.

    ``rng_stream`` is a path index (a substream of ``cfg.seed``) or a numpy
    ``Generator`` from which draws are taken in the library's order.
    """
    start, gen = _resolve_stream(cfg, rng_stream)
    res = _run_batch(model, cfg, Mode.P, None, None, 0.0, start, 1, gen)
    return Path(cfg.grid, res.X[0], "linear")


def simulate_tilted(model: CoefficientModel, phi: Path, cfg: SimConfig,
                    rng_stream=0) -> tuple[Path, TiltRecord]:
    """One Euler path under the tilted measure steering towards ``phi``."""
    _require_start(model, phi)
    start, gen = _resolve_stream(cfg, rng_stream)
    pv, ps = _phi_on_grid(phi, cfg.grid)
    gamma = _gamma(cfg, None)
    res = _run_batch(model, cfg, Mode.TILTED, pv, ps, gamma, start, 1, gen, record=True)
    t = int(res.tau[0])
    hit = t >= 0
    rec = TiltRecord(float(res.logZ[0]), hit, float(cfg.grid[t]) if hit else None,
                     t if hit else None, res.lam[0], int(res.clamps[0]), int(res.failures[0]))
    return Path(cfg.grid, res.X[0], "linear"), rec


def _require_start(model, phi):
    if phi.interp != "linear":
        raise ValueError("the target path must be piecewise-linear")
    if phi.x0 != model.x0:
        raise ValueError(f"target path starts at {phi.x0}, model at {model.x0}")


# ---------------------------------------------------------------- batches

def _batches(M: int, size: int):
    return [(s, min(size, M - s)) for s in range(0, M, size)]


def run_paths(model: CoefficientModel, cfg: SimConfig, M: int, mode: Mode = Mode.P,
              phi: Path | None = None, gamma: float = 0.0, start: int = 0,
              summary=None, qv: bool = False) -> list:
    """Simulate paths ``start .. start+M-1`` in fixed batches.

    ``summary(batch) -> object`` reduces each batch before the next one is
    kept in memory.  Results come back in batch order, independent of
    ``cfg.threads``.
    """
    pv, ps = _phi_on_grid(phi, cfg.grid)
    jobs = _batches(int(M), cfg.batch_size)

    def work(job):
        s, c = job
        res = _run_batch(model, cfg, Mode(mode), pv, ps, gamma, start + s, c, qv=qv)
        return summary(res) if summary else res

    if cfg.threads == 1 or len(jobs) == 1:
        return [work(j) for j in jobs]
    with ThreadPoolExecutor(max_workers=cfg.threads) as pool:
        return list(pool.map(work, jobs))


def sup_deviation(X: np.ndarray, phi_vals: np.ndarray) -> np.ndarray:
    """Grid sup of ``|X - phi|`` for a batch of paths on a shared grid."""
    return np.max(np.abs(X - phi_vals), axis=-1)


# ---------------------------------------------------------------- estimation

class Method(str, enum.Enum):
    CRUDE = "crude"
    TILTED = "tilted"


def _json_float(x):
    x = float(x)
    if math.isfinite(x):
        return x
    if math.isnan(x):
        return "nan"
    return "inf" if x > 0 else "-inf"


@dataclass(frozen=True)
class EstimateReport:
    """Tube-probability estimate ``P(sup_{t<=T} |X^n - phi| <= delta)``."""

    method: str
    n: int
    M: int
    dt: float
    delta: float
    gamma: float
    p_hat: float
    std_err: float
    log_rate: float
    target_rate: float
    clamp_count: int = 0
    excluded: int = 0
    hits: int = 0
    seed: int = 0
    note: str = ""

    @property
    def ci95(self) -> tuple[float, float]:
        return (max(0.0, self.p_hat - 1.96 * self.std_err), min(1.0, self.p_hat + 1.96 * self.std_err))

    def to_dict(self) -> dict:
        lo, hi = self.ci95
        return {
            "method": self.method, "n": self.n, "M": self.M, "dt": self.dt,
            "delta": self.delta, "gamma": self.gamma, "p_hat": self.p_hat,
            "std_err": self.std_err, "ci95": [lo, hi],
            "log_rate": _json_float(self.log_rate),
            "target_rate": _json_float(self.target_rate),
            "clamp_count": self.clamp_count, "excluded": self.excluded,
            "hits": self.hits, "seed": self.seed, "note": self.note,
        }


def estimate_tube_probability(model: CoefficientModel, phi: Path, delta: float, cfg: SimConfig,
                              M: int, method: str = "tilted", start: int = 0,
                              target_rate: float | None = None) -> EstimateReport:
    """Crude or importance-sampling estimate of the ``delta``-tube probability.

    Tube membership is checked on the simulation grid.  The tilted
    estimator averages ``1{in tube} exp(-log Z)`` over tilted paths.  Paths
    whose tilt root failed on more than 1% of steps are excluded, and the
    exclusions are counted.  ``target_rate`` defaults to ``-rate_I(phi)``.
    """
    from .ratefn import rate_I

    if not delta > 0:
        raise ValueError("delta must be positive")
    _require_start(model, phi)
    method = Method(method)
    gamma = _gamma(cfg, delta)
    if method is Method.TILTED and gamma < delta:
        warnings.warn(f"gamma={gamma} < delta={delta}: tilt switches off inside the tube", stacklevel=2)
    pv, _ = _phi_on_grid(phi, cfg.grid)
    mode = Mode.TILTED if method is Method.TILTED else Mode.P
    limit = ROOT_FAILURE_LIMIT * cfg.steps

    def summary(res: _Batch):
        inside = sup_deviation(res.X, pv) <= delta
        valid = res.failures <= limit
        with np.errstate(over="ignore"):
            weight = np.where(inside, np.exp(-res.logZ), 0.0) if mode is Mode.TILTED else inside.astype(float)
        return weight[valid], int(np.sum(inside & valid)), int(res.clamps.sum()), int(np.sum(~valid))

    parts = run_paths(model, cfg, M, mode, phi, gamma, start, summary)
    weights = np.concatenate([p[0] for p in parts])
    hits = sum(p[1] for p in parts)
    clamps = sum(p[2] for p in parts)
    excluded = sum(p[3] for p in parts)
    Meff = weights.size
    p_hat = math.fsum(weights) / Meff if Meff else 0.0
    if Meff > 1:
        dev = weights - p_hat
        std_err = math.sqrt(math.fsum(dev * dev) / (Meff - 1) / Meff)
    else:
        std_err = 0.0
    log_rate = math.log(p_hat) / cfg.n if p_hat > 0 else -math.inf
    note = ""
    if p_hat == 0 and method is Method.CRUDE:
        note = "no path stayed in the tube; use method='tilted'"
    if target_rate is None:
        target_rate = -rate_I(model, phi, cfg.T).value
    return EstimateReport(method.value, int(cfg.n), int(Meff), cfg.dt, float(delta), gamma,
                          float(min(p_hat, 1.0) if method is Method.CRUDE else p_hat), std_err,
                          log_rate, float(target_rate), clamps, excluded, hits, int(cfg.seed), note)


@dataclass(frozen=True)
class MeanOneReport:
    mean: float
    std_err: float
    M: int


def likelihood_mean(model: CoefficientModel, phi: Path, cfg: SimConfig, M: int,
                    start: int = 0) -> MeanOneReport:
    """Sample mean of ``Z^n = exp(log Z)`` over paths drawn under ``P``.

    ``log Z`` is accumulated with the same tilt policy as the tilted
    simulation, stopped at the exit of the ``gamma``-tube.  Its expectation
    is one.
    """
    _require_start(model, phi)
    gamma = _gamma(cfg, None)

    def summary(res):
        return np.exp(res.logZ)

    z = np.concatenate(run_paths(model, cfg, M, Mode.P_WEIGHT, phi, gamma, start, summary))
    mean = math.fsum(z) / z.size
    se = math.sqrt(math.fsum((z - mean) ** 2) / (z.size - 1) / z.size) if z.size > 1 else 0.0
    return MeanOneReport(mean, se, int(z.size))


@dataclass(frozen=True)
class QVReport:
    """Predicted and realised quadratic variation of the tilted martingale part.

    ``predicted`` is the mean of ``sum_k dt (b^2 + int f^2 e^{Lambda f} q) / n``
    and ``realized`` the mean of ``sum_k (dX_k - g(Lambda_k) dt)^2``.
    ``k_constant`` is ``n * max predicted``, the constant in ``<M> <= k / n``.
    """

    predicted: float
    realized: float
    ratio: float
    k_constant: float
    M: int

    def to_dict(self) -> dict:
        return {"predicted": self.predicted, "realized": self.realized, "ratio": self.ratio,
                "k_constant": self.k_constant, "M": self.M}


def quadratic_variation_diag(model: CoefficientModel, phi: Path, cfg: SimConfig,
                             rng_stream=0, M: int = 1) -> QVReport:
    """Quadratic-variation check on ``M`` tilted paths starting at stream ``rng_stream``."""
    _require_start(model, phi)
    start, gen = _resolve_stream(cfg, rng_stream)
    gamma = _gamma(cfg, None)
    if gen is not None:
        pv, ps = _phi_on_grid(phi, cfg.grid)
        parts = [_run_batch(model, cfg, Mode.TILTED, pv, ps, gamma, 0, 1, gen, qv=True)]
    else:
        parts = run_paths(model, cfg, M, Mode.TILTED, phi, gamma, start, qv=True)
    pred = np.concatenate([p.qv_pred for p in parts])
    real = np.concatenate([p.qv_real for p in parts])
    mp, mr = math.fsum(pred) / pred.size, math.fsum(real) / real.size
    return QVReport(mp, mr, mr / mp if mp > 0 else math.nan, float(cfg.n * pred.max()), int(pred.size))
