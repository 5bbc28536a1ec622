"""One test per acceptance criterion, each at its stated tolerance."""
from __future__ import annotations

import json
import math

import numpy as np
import pytest

from jumpldp.catalogue import CATALOGUE, brownian, ou, poisson
from jumpldp.cli import main
from jumpldp.cumulant import TiltStatus, cumulant_G, cumulant_g, cumulant_g2, legendre_H
from jumpldp.metric import skorokhod_rho, sup_distance
from jumpldp.model import Path
from jumpldp.ratefn import fluid_limit, rate_I
from jumpldp.simulate import Mode, SimConfig, estimate_tube_probability, likelihood_mean, run_paths, sup_deviation

X0 = Path.constant(0.0, 1.0, 0.5)


def _state(model):
    """A fixed state for each model: its fluid limit."""
    return fluid_limit(model, 1.0, 0.01)


def test_criterion_01_legendre_closed_forms(criterion):
    y = np.linspace(-5, 5, 1001)
    gauss = max(abs(legendre_H(brownian(), v, 0.0, X0).H - v * v / 2) for v in y)
    yp = np.concatenate((-1 + np.logspace(-12, -1, 200), np.linspace(-0.9, 5, 800)))
    pois = max(abs(legendre_H(poisson(), v, 0.0, X0).H - ((1 + v) * math.log1p(v) - v)) for v in yp)
    edge = legendre_H(poisson(), -1.0, 0.0, X0)
    ok = gauss <= 1e-8 and pois <= 1e-8 and edge.H == 1.0 and edge.status is TiltStatus.BOUNDARY_LOW
    criterion(1, "Legendre closed forms", ok,
              f"gauss err {gauss:.1e}, poisson err {pois:.1e}, H(-1)={edge.H!r}")


def test_criterion_02_duality_suite(criterion):
    lams = np.linspace(-5, 5, 41)
    ys = np.linspace(-4, 4, 33)
    fy = fd = rt = 0.0
    for name in sorted(CATALOGUE):
        m = CATALOGUE[name]()
        X = _state(m)
        t = 0.5
        G = lambda x: cumulant_G(m, x, t, X)  # noqa: E731
        g = lambda x: cumulant_g(m, x, t, X)  # noqa: E731
        Hy = np.array([legendre_H(m, v, t, X).H for v in ys])
        Gl = np.array([G(v) for v in lams])
        # Fenchel-Young: violation lam*y - G - H, must be <= 0
        fy = max(fy, float(np.max(np.outer(lams, ys) - Gl[:, None] - Hy[None, :])))
        for lam in lams:
            h = 1e-5 * max(1.0, abs(lam))
            d1 = (G(lam + h) - G(lam - h)) / (2 * h)
            d2 = (g(lam + h) - g(lam - h)) / (2 * h)
            fd = max(fd, abs(g(lam) - d1) / max(1.0, abs(g(lam))),
                     abs(cumulant_g2(m, lam, t, X) - d2) / max(1.0, abs(d2)))
            y = g(lam)
            rt = max(rt, abs(legendre_H(m, y, t, X).H + G(lam) - lam * y) / max(1.0, abs(lam * y)))
    ok = fy <= 1e-12 and fd <= 1e-6 and rt <= 1e-8
    criterion(2, "duality suite", ok, f"FY violation {fy:.1e}, FD rel {fd:.1e}, round trip rel {rt:.1e}")


def test_criterion_03_rate_of_fluid_limit(criterion):
    fluid = {name: rate_I(CATALOGUE[name](), fluid_limit(CATALOGUE[name](), 1.0, 1e-3)).value
             for name in sorted(CATALOGUE)}
    line = rate_I(brownian(), Path.line(1.0, 1.0, 1e-3)).value
    ok = all(v <= 1e-9 for v in fluid.values()) and abs(line - 0.5) <= 1e-6
    criterion(3, "rate of fluid limit", ok,
              f"max fluid rate {max(fluid.values()):.1e}, line rate {line!r}")


def test_criterion_04_martingale_mean_one(criterion):
    # n is not fixed by the criterion; E[Z^2] grows like exp(n), so a small scale keeps M=1e4 meaningful
    r = likelihood_mean(brownian(), Path.line(1.0, 1.0, 0.01), SimConfig(n=4, seed=2024, gamma=0.5), 10_000)
    ok = abs(r.mean - 1.0) <= 3 * r.std_err
    criterion(4, "martingale mean one", ok, f"mean {r.mean:.4f} +- {r.std_err:.4f}, n=4, M={r.M}")


def test_criterion_05_tilted_concentration(criterion):
    phi = Path.line(1.0, 1.0, 0.01)
    cfg = SimConfig(n=256, seed=5, gamma=0.5)
    pv = phi.value_at(cfg.grid)
    parts = run_paths(brownian(), cfg, 10_000, Mode.TILTED, phi, 0.5,
                      summary=lambda b: sup_deviation(b.X, pv) <= 0.25)
    frac = float(np.concatenate(parts).mean())
    criterion(5, "tilted concentration", frac >= 0.9, f"fraction in tube {frac:.4f}")


def test_criterion_06_ldp_slope(criterion):
    m = brownian()
    phi = Path.line(1.0, 1.0, 0.01)
    M = 100_000
    gaps, rates = [], []
    tilted16 = None
    for n in (16, 64, 256):
        r = estimate_tube_probability(m, phi, 0.25, SimConfig(n=n, seed=6), M, "tilted")
        gaps.append(abs(-r.log_rate - 0.28125))
        rates.append(-r.log_rate)
        if n == 16:
            tilted16 = r
    crude = estimate_tube_probability(m, phi, 0.25, SimConfig(n=16, seed=6), M, "crude", start=M)
    z = abs(crude.p_hat - tilted16.p_hat) / math.hypot(crude.std_err, tilted16.std_err)
    ok = gaps[-1] <= 0.05 and all(b <= a for a, b in zip(gaps, gaps[1:])) and z <= 3
    criterion(6, "LDP slope check", ok,
              "-log_rate " + ", ".join(f"{v:.4f}" for v in rates) + f"; gap at 256 {gaps[-1]:.4f}; crude z {z:.2f}")


def _median_sup(n, M=1000, dt=1e-3):
    m = ou()
    cfg = SimConfig(n=n, T=1.0, dt=dt, seed=7)
    Y = fluid_limit(m, 1.0, dt).values
    return float(np.median(np.concatenate(run_paths(m, cfg, M, summary=lambda b: sup_deviation(b.X, Y)))))


def test_criterion_07_ergodic_convergence(criterion):
    # the fluctuation scale n^{-1/2} predicts a factor 0.1 over a 100x increase in n
    lo, hi = _median_sup(100), _median_sup(10_000)
    ratio = hi / lo
    criterion(7, "ergodic convergence", 0.4 <= ratio <= 0.6,
              f"median sup {lo:.4f} (n=1e2) -> {hi:.4f} (n=1e4), ratio {ratio:.3f}, band [0.4, 0.6]")


def test_ergodic_contraction_per_fourfold_n():
    ratio = _median_sup(400) / _median_sup(100)
    assert 0.4 <= ratio <= 0.6


def test_criterion_08_poisson_cross_validation(criterion):
    m = poisson()
    phi = Path.constant(0.0, 1.0, 0.01)
    M = 100_000
    crude = estimate_tube_probability(m, phi, 0.1, SimConfig(n=32, seed=8), M, "crude")
    tilted = estimate_tube_probability(m, phi, 0.1, SimConfig(n=32, seed=8), M, "tilted", start=M)
    z = abs(crude.p_hat - tilted.p_hat) / math.hypot(crude.std_err, tilted.std_err)
    criterion(8, "Poisson estimator cross-validation", z <= 3,
              f"crude {crude.p_hat:.5f}+-{crude.std_err:.5f}, tilted {tilted.p_hat:.5f}+-{tilted.std_err:.5f}, z {z:.2f}")


def _random_pair(rng):
    out = []
    for _ in range(2):
        knots = int(rng.integers(2, 10))
        T = float(rng.uniform(1.0, 5.0))
        grid = np.concatenate(([0.0], np.sort(rng.uniform(0, T, knots - 2)), [T]))
        out.append(Path(grid, rng.normal(size=knots) * rng.uniform(0.1, 3), str(rng.choice(["linear", "step"]))))
    return out


def test_criterion_09_metric_bounds(criterion):
    rng = np.random.default_rng(9)
    K = 3
    eq15 = order = self_zero = 0
    for _ in range(1000):
        X, Y = _random_pair(rng)
        est = skorokhod_rho(X, Y, K=K, res=4)
        eq15 += all(est.upper <= sup_distance(X, Y, k + 1.0) + 2.0 ** -k for k in range(1, K + 1))
        order += 0.0 <= est.lower <= est.upper
        same = skorokhod_rho(X, X, K=K, res=4)
        self_zero += same.lower == 0.0 and same.upper == 0.0
    ok = eq15 == order == self_zero == 1000
    criterion(9, "metric bounds", ok, f"sup bound {eq15}/1000, lower<=upper {order}/1000, rho(X,X)=0 {self_zero}/1000")


def test_criterion_10_reproducibility(criterion, tmp_path):
    configs = {
        "estimate": {"model": {"name": "delay"}, "target": {"kind": "fluid"}, "seed": 10, "batch_size": 128,
                     "estimate": {"n": 16, "M": 1000, "delta": 0.3, "method": "both"}},
        "ldp-check": {"model": {"name": "brownian"}, "target": {"kind": "line", "slope": 1.0}, "seed": 11,
                      "batch_size": 256, "ldp_check": {"n_list": [4, 16], "M": 2000, "delta": 0.25}},
        "simulate": {"model": {"name": "poisson"}, "target": {"kind": "line", "slope": 0.5}, "seed": 12,
                     "batch_size": 100, "simulate": {"n": 8, "M": 500, "tilted": True}},
    }
    same = True
    for command, cfg in configs.items():
        path = tmp_path / f"{command}.json"
        path.write_text(json.dumps(cfg))
        blobs = []
        for threads in (1, 2, 4):
            out = tmp_path / f"{command}-{threads}"
            assert main([command, "--config", str(path), "--out", str(out), "--threads", str(threads)]) == 0
            blobs.append(((out / "manifest.json").read_bytes(), (out / "results.json").read_bytes()))
        same &= all(b == blobs[0] for b in blobs)
    criterion(10, "reproducibility", same, "estimate, ldp-check, simulate at 1, 2 and 4 threads")
