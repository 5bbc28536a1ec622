from __future__ import annotations

import csv
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from jumpldp.catalogue import brownian, ou
from jumpldp.metric import (TIGHTNESS_COLUMNS, compressed_time, g_k, modulus_Wk, skorokhod_rho,
                            sup_distance, tightness_diagnostics, write_tightness_csv)
from jumpldp.model import Path


def step_at(t0, T=3.0, height=1.0):
    return Path(np.array([0.0, t0, T]), np.array([0.0, height, height]), "step")


def random_path(rng, T=3.0, knots=12, interp="linear"):
    grid = np.concatenate(([0.0], np.sort(rng.uniform(0, T, knots - 2)), [T]))
    return Path(grid, rng.normal(size=knots), interp)


# ---------------------------------------------------------------- sup distance

def test_sup_distance_examples():
    phi = Path.from_function(np.sin, 2.0, 0.1)
    assert sup_distance(phi, phi) == 0.0
    assert math.isclose(sup_distance(phi.shifted(-0.3), phi), 0.3, rel_tol=1e-12)


def test_sup_distance_linear_vs_step_oracle():
    rng = np.random.default_rng(2)
    vals = rng.normal(size=21)
    grid = np.linspace(0, 1, 21)
    lin, stp = Path(grid, vals, "linear"), Path(grid, vals, "step")
    # on each cell the step path holds the left value; the gap peaks at the right end
    expected = np.abs(np.diff(vals)).max()
    assert math.isclose(sup_distance(lin, stp), expected, rel_tol=1e-12)
    dense = np.linspace(0, 1, 200_001)
    brute = np.abs(lin(dense) - stp(dense)).max()
    assert brute <= expected + 1e-12 and expected - brute < 1e-3


def test_sup_distance_on_different_grids():
    a = Path(np.array([0.0, 1.0]), np.array([0.0, 1.0]))
    b = Path(np.array([0.0, 0.3, 1.0]), np.array([0.0, 0.0, 1.0]))
    assert math.isclose(sup_distance(a, b), 0.3, rel_tol=1e-12)
    assert math.isclose(sup_distance(a, b, T=0.2), 0.2, rel_tol=1e-12)


# ---------------------------------------------------------------- compression

def test_g_k_and_compressed_time():
    assert list(g_k(np.array([0.5, 1.0, 1.5, 2.0, 3.0]), 1)) == [1.0, 1.0, 0.5, 0.0, 0.0]
    t = 1 - math.exp(-0.5)
    assert math.isclose(float(compressed_time(t, 1)), 0.5, rel_tol=1e-12)
    assert float(compressed_time(1.0, 2)) == 0.0


# ---------------------------------------------------------------- Skorokhod bracket

def test_rho_of_identical_paths_is_zero():
    for p in (Path.from_function(np.sin, 3.0, 0.05), step_at(0.7)):
        est = skorokhod_rho(p, p, K=3, res=4)
        assert est.lower == 0.0 and est.upper == 0.0


@pytest.mark.parametrize("seed", range(6))
def test_rho_respects_sup_bound(seed):
    rng = np.random.default_rng(seed)
    X, phi = random_path(rng), random_path(rng, interp="step" if seed % 2 else "linear")
    K = 3
    est = skorokhod_rho(X, phi, K=K, res=4)
    assert 0.0 <= est.lower <= est.upper
    for k in range(1, K + 1):
        assert est.upper <= sup_distance(X, phi, k + 1.0) + 2.0 ** -k + 1e-15


def _brute_level(X, phi, k, res, dense=20_001):
    """Best of the identity and ``res**2`` one-breakpoint time changes, sampled densely."""
    t = np.linspace(0, 1, dense)[:-1]
    y = X.value_at(compressed_time(t, k))
    best = np.abs(y - phi.value_at(compressed_time(t, k))).max()
    nodes = np.linspace(0, 1, res + 2)[1:-1]
    for s in nodes:
        for v in nodes:
            mu = np.where(t <= s, t * v / s, v + (t - s) * (1 - v) / (1 - s))
            z = phi.value_at(compressed_time(mu, k))
            cost = np.abs(y - z).max() + max(abs(math.log(v / s)), abs(math.log((1 - v) / (1 - s))))
            best = min(best, cost)
    return best


@pytest.mark.parametrize("shift", [0.02, 0.1])
def test_rho_shifted_jump_against_search_oracle(shift):
    X, phi = step_at(0.5 + shift), step_at(0.5)
    K, res = 2, 4
    est = skorokhod_rho(X, phi, K=K, res=res)
    S = sup_distance(X, phi, 3.0)
    eq15 = min(sup_distance(X, phi, k + 1.0) + 2.0 ** -k for k in range(1, K + 1))
    levels = [_brute_level(X, phi, k, res) for k in range(1, K + 1)]
    searched = sum(2.0 ** -k * u / (1 + u) for k, u in zip(range(1, K + 1), levels)) + 2.0 ** -K * S / (1 + S)
    assert est.upper <= min(eq15, searched) + 1e-9
    assert est.lower <= est.upper


def test_rho_shift_of_continuous_path():
    phi = Path.from_function(lambda t: t, 3.0, 0.05)
    est = skorokhod_rho(phi.shifted(0.1), phi, K=3, res=4)
    assert 0.0 < est.lower <= est.upper <= 0.1


def test_rho_rejects_bad_arguments():
    p = Path.from_function(np.sin, 3.0, 0.1)
    with pytest.raises(ValueError):
        skorokhod_rho(p, p, K=0)
    with pytest.raises(ValueError):
        skorokhod_rho(p, p, res=1)


@settings(max_examples=25)
@given(st.integers(0, 2**32 - 1))
def test_rho_symmetric_within_slack(seed):
    rng = np.random.default_rng(seed)
    X, Y = random_path(rng, knots=6), random_path(rng, knots=6)
    a, b = skorokhod_rho(X, Y, K=2, res=4), skorokhod_rho(Y, X, K=2, res=4)
    slack = max(a.slack, b.slack)
    assert abs(a.upper - b.upper) <= slack + 1e-12
    assert a.lower <= a.upper and b.lower <= b.upper


# ---------------------------------------------------------------- modulus

def brute_W(phi, sigma, k, num=2001):
    u = np.linspace(0, k + 1.0, num)
    psi = phi.value_at(u * g_k(u, k))
    w = int(round(sigma / (u[1] - u[0])))
    return max(float(np.abs(psi[j:j + w + 1] - psi[j]).max()) for j in range(num)) if w else 0.0


def test_modulus_examples():
    assert modulus_Wk(Path.constant(2.0, 3.0, 0.1), 0.5, 2) == 0.0
    line = Path.line(1.0, 3.0, 0.01)
    w = modulus_Wk(line, 0.1, 1)
    assert abs(w - 0.19) <= 1e-12
    assert abs(w - brute_W(line, 0.1, 1)) <= 1e-9
    with pytest.raises(ValueError):
        modulus_Wk(line, 0.0, 1)


def test_modulus_shrinks_with_sigma():
    phi = Path.from_function(lambda t: np.sin(3 * t), 3.0, 0.01)
    sig = [0.5, 0.2, 0.1, 0.01, 1e-4]
    vals = [modulus_Wk(phi, s, 2) for s in sig]
    assert all(b <= a for a, b in zip(vals, vals[1:]))
    assert vals[-1] < 1e-3


@settings(max_examples=30)
@given(st.integers(0, 2**32 - 1), st.floats(0.05, 1.0), st.integers(1, 3))
def test_modulus_matches_pair_scan(seed, sigma, k):
    rng = np.random.default_rng(seed)
    phi = random_path(rng, T=4.0, knots=10)
    # grid-aligned sigma so the scan has no window rounding
    num = 4001
    h = (k + 1.0) / (num - 1)
    sigma = round(sigma / h) * h
    W = modulus_Wk(phi, sigma, k)
    brute = brute_W(phi, sigma, k, num)
    lip = np.abs(phi.slopes).max() * (2 * k + 2)
    assert brute <= W + 1e-9
    assert W <= brute + 2 * lip * h + 1e-9
    assert W <= modulus_Wk(phi, 1.5 * sigma, k) + 1e-12


# ---------------------------------------------------------------- tightness

def test_tightness_sentinel_and_csv(tmp_path):
    rows = tightness_diagnostics(brownian(), [4], L=1.0, c_grid=[0.5, 50.0], delta_grid=[0.1],
                                 eta=100.0, M=200, seed=1)
    far = [r for r in rows if r.condition == "i" and r.c_or_delta == 50.0][0]
    assert far.p_hat == 0.0 and far.statistic == -math.inf
    inc = [r for r in rows if r.condition == "ii"][0]
    assert inc.statistic == -math.inf
    out = tmp_path / "t.csv"
    write_tightness_csv(rows, out)
    with open(out, newline="") as fh:
        read = list(csv.DictReader(fh))
    assert tuple(read[0]) == TIGHTNESS_COLUMNS and len(read) == len(rows)
    assert read[1]["statistic"] == "-inf"


def test_tightness_monotone_in_c():
    rows = tightness_diagnostics(ou(), [2, 4, 8], L=1.0, c_grid=[1.0, 1.2, 1.5, 2.0], delta_grid=[0.05, 0.2],
                                 eta=0.5, M=2000, seed=3)
    for n in (2, 4, 8):
        r = [x for x in rows if x.n == n and x.condition == "i"]
        assert all(x.flag for x in r)
        s = [x.statistic for x in r]
        assert all(b <= a for a, b in zip(s, s[1:]))


def test_tightness_statistic_does_not_grow_with_n():
    rows = tightness_diagnostics(brownian(), [1, 2, 4], L=1.0, c_grid=[1.0, 1.5], delta_grid=[0.1],
                                 eta=0.5, M=4000, seed=4)
    for c in (1.0, 1.5):
        r = sorted((x for x in rows if x.condition == "i" and x.c_or_delta == c), key=lambda x: x.n)
        for a, b in zip(r, r[1:]):
            assert b.statistic <= a.statistic + 2 * math.hypot(a.std_err, b.std_err)


def test_tightness_matches_oversampled_gaussian_oracle():
    n, c, M = 1, 2.0, 4000
    rows = tightness_diagnostics(brownian(), [n], L=1.0, c_grid=[c], delta_grid=[0.1], eta=1.0, M=M, seed=5)
    p = [r for r in rows if r.condition == "i"][0].p_hat
    rng = np.random.default_rng(123)
    W = np.cumsum(rng.normal(scale=math.sqrt(0.01 / n), size=(10 * M, 100)), axis=1)
    q = float(np.mean(np.abs(W).max(axis=1) >= c))
    se = math.hypot(math.sqrt(p * (1 - p) / M), math.sqrt(q * (1 - q) / (10 * M)))
    assert abs(p - q) <= 3 * se
