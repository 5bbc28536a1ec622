"""
Built-in models, selectable by name from experiment configs.

=============  ==============================================================
``brownian``   ``a = mu``, ``b = sigma``, no jumps (scaled Brownian motion)
``ou``         ``a = -theta X_{t-}``, ``b = sigma``, no jumps
``poisson``    ``a = drift``, ``b = 0``, ``f = size`` with ``q(E) = rate``
``delay``      ``a = kappa * mean(X over [t - tau, t))``, ``b = sigma``,
               ``f(u) = u`` on atoms ``+-jump`` of weight ``rate / 2``
=============  ==============================================================
"""
from __future__ import annotations

from typing import Any, Callable

import numpy as np

from .model import CoefficientModel, JumpMeasure


def _const(value: float) -> Callable:
    def coeff(t, hist):
        return value
    return coeff


def brownian(mu: float = 0.0, sigma: float = 1.0, x0: float = 0.0) -> CoefficientModel:
    return CoefficientModel(
        drift=_const(float(mu)),
        diffusion=_const(float(sigma)),
        envelope=_const_env(max(abs(mu), abs(sigma))),
        x0=float(x0),
        name="brownian",
    )


def ou(theta: float = 1.0, sigma: float = 1.0, x0: float = 1.0) -> CoefficientModel:
    theta = float(theta)

    def drift(t, hist):
        return -theta * hist.last

    return CoefficientModel(
        drift=drift,
        diffusion=_const(float(sigma)),
        envelope=_const_env(max(abs(theta), abs(sigma))),
        x0=float(x0),
        name="ou",
    )


def poisson(rate: float = 1.0, size: float = 1.0, drift: float = 0.0, x0: float = 0.0) -> CoefficientModel:
    size = float(size)

    def jump(t, hist, u):
        return np.full(hist.batch_shape + u.shape, size)

    return CoefficientModel(
        drift=_const(float(drift)),
        diffusion=_const(0.0),
        jump=jump,
        q=JumpMeasure.atoms([0.0], [float(rate)]),
        envelope=_const_env(max(abs(drift), 1.0)),
        jump_envelope=lambda u: np.full_like(u, abs(size)),
        x0=float(x0),
        name="poisson",
    )


def delay(kappa: float = -1.0, tau: float = 0.5, sigma: float = 0.5, jump: float = 0.5,
          rate: float = 1.0, x0: float = 1.0) -> CoefficientModel:
    kappa, tau = float(kappa), float(tau)
    if tau <= 0:
        raise ValueError("delay window tau must be positive")

    def drift(t, hist):
        return kappa * hist.window_mean(tau)

    def f(t, hist, u):
        return np.broadcast_to(u, hist.batch_shape + u.shape)

    return CoefficientModel(
        drift=drift,
        diffusion=_const(float(sigma)),
        jump=f,
        q=JumpMeasure.atoms([-float(jump), float(jump)], [0.5 * rate, 0.5 * rate]),
        envelope=_const_env(max(abs(kappa), abs(sigma), 1.0)),
        x0=float(x0),
        name="delay",
    )


def _const_env(value: float) -> Callable[[float], float]:
    def env(t):
        return value
    return env


CATALOGUE: dict[str, Callable[..., CoefficientModel]] = {
    "brownian": brownian,
    "ou": ou,
    "poisson": poisson,
    "delay": delay,
}


def build_model(name: str, params: dict[str, Any] | None = None) -> CoefficientModel:
    """Instantiate a catalogue model; unknown names or parameters raise ``ValueError``."""
    try:
        factory = CATALOGUE[name]
    except KeyError:
        raise ValueError(f"unknown model {name!r}; choose from {sorted(CATALOGUE)}") from None
    try:
        return factory(**(params or {}))
    except TypeError as exc:
        raise ValueError(f"bad parameters for model {name!r}: {exc}") from None
