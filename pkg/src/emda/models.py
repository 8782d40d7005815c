"""Chaotic test models and the fixed-step integrator that cycles them.

All derivative functions are vectorized over leading axes: a state array of
shape (..., n) yields a derivative array of the same shape, so a whole
ensemble is advanced with one call.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


def lorenz63_deriv(state: np.ndarray, sigma: float = 10.0, rho: float = 28.0,
                   beta: float = 8.0 / 3.0) -> np.ndarray:
    """Lorenz-63 right-hand side for state (..., 3)."""
    state = np.asarray(state, dtype=float)
    if state.shape[-1] != 3:
        raise ValueError(f"lorenz63 state must have 3 components, got {state.shape[-1]}")
    x, y, z = state[..., 0], state[..., 1], state[..., 2]
    return np.stack([sigma * (y - x), x * (rho - z) - y, x * y - beta * z], axis=-1)


def lorenz96_deriv(state: np.ndarray, forcing: float = 8.0) -> np.ndarray:
    """Single-scale Lorenz-96 right-hand side for state (..., n), n >= 4.

    Component i is x[i-1] * (x[i+1] - x[i-2]) - x[i] + forcing with periodic
    indices.
    """
    state = np.asarray(state, dtype=float)
    n = state.shape[-1]
    if n < 4:
        raise ValueError(f"lorenz96 needs at least 4 variables, got {n}")
    xp1 = np.roll(state, -1, axis=-1)
    xm1 = np.roll(state, 1, axis=-1)
    xm2 = np.roll(state, 2, axis=-1)
    return (xp1 - xm2) * xm1 - state + forcing


def two_scale_lorenz96_deriv(x: np.ndarray, y: np.ndarray, forcing: float = 20.0,
                             h: float = 1.0, b: float = 10.0, c: float = 10.0):
    """Two-scale Lorenz-96 right-hand side.

    Parameters
    ----------
    x : ndarray, shape (..., n)
        Large-scale variables.
    y : ndarray, shape (..., n_s)
        Small-scale variables; n_s must be a multiple of n. Variable y[m]
        is coupled to its parent x[m // (n_s // n)] (contiguous blocks).
    forcing, h, b, c : float
        Forcing and coupling constants.

    Returns
    -------
    (dx, dy) : pair of ndarray
        Time derivatives of the two scales.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    n = x.shape[-1]
    n_s = y.shape[-1]
    if n_s % n != 0:
        raise ValueError(f"small-scale count {n_s} is not a multiple of large-scale count {n}")
    ratio = n_s // n

    coupling = (h * c / b) * y.reshape(y.shape[:-1] + (n, ratio)).sum(axis=-1)
    # advection inlined rather than via lorenz96_deriv: the periodic stencil
    # is well defined for any n >= 1 and small-n configurations are allowed here
    xp1 = np.roll(x, -1, axis=-1)
    xm1 = np.roll(x, 1, axis=-1)
    xm2 = np.roll(x, 2, axis=-1)
    dx = (xp1 - xm2) * xm1 - x + forcing - coupling

    yp1 = np.roll(y, -1, axis=-1)
    ym1 = np.roll(y, 1, axis=-1)
    yp2 = np.roll(y, -2, axis=-1)
    dy = c * b * yp1 * (ym1 - yp2) - c * y + (h * c / b) * np.repeat(x, ratio, axis=-1)
    return dx, dy


def rk4_step(f, state: np.ndarray, dt: float) -> np.ndarray:
    """One classical fourth-order Runge-Kutta step of size dt.

    Raises FloatingPointError if the stepped state is not finite (the model
    has blown up, typically from too large a dt).
    """
    k1 = f(state)
    k2 = f(state + 0.5 * dt * k1)
    k3 = f(state + 0.5 * dt * k2)
    k4 = f(state + dt * k3)
    out = state + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    if not np.isfinite(out).all():
        raise FloatingPointError(f"non-finite state after rk4 step of size {dt}")
    return out


def integrate(f, state: np.ndarray, dt: float, n_steps: int) -> np.ndarray:
    """Advance state through n_steps fixed rk4 steps of size dt (0 steps = identity)."""
    if n_steps < 0:
        raise ValueError(f"n_steps must be non-negative, got {n_steps}")
    state = np.asarray(state, dtype=float)
    for _ in range(n_steps):
        state = rk4_step(f, state, dt)
    return state


@dataclass(frozen=True)
class Lorenz63:
    sigma: float = 10.0
    rho: float = 28.0
    beta: float = 8.0 / 3.0

    dimension = 3

    def deriv(self, state: np.ndarray) -> np.ndarray:
        return lorenz63_deriv(state, self.sigma, self.rho, self.beta)


@dataclass(frozen=True)
class Lorenz96:
    n: int
    forcing: float = 8.0

    @property
    def dimension(self) -> int:
        return self.n

    def deriv(self, state: np.ndarray) -> np.ndarray:
        return lorenz96_deriv(state, self.forcing)


@dataclass(frozen=True)
class TwoScaleLorenz96:
    """Two-scale system on the concatenated state (x, y) of length n + n_s."""

    n: int = 8
    n_s: int = 256
    forcing: float = 20.0
    h: float = 1.0
    b: float = 10.0
    c: float = 10.0

    def __post_init__(self):
        if self.n_s % self.n != 0:
            raise ValueError(
                f"small-scale count {self.n_s} is not a multiple of large-scale count {self.n}")

    @property
    def dimension(self) -> int:
        return self.n + self.n_s

    def split(self, state: np.ndarray):
        return state[..., :self.n], state[..., self.n:]

    def deriv(self, state: np.ndarray) -> np.ndarray:
        x, y = self.split(state)
        dx, dy = two_scale_lorenz96_deriv(x, y, self.forcing, self.h, self.b, self.c)
        return np.concatenate([dx, dy], axis=-1)

    def coupling_term(self, state: np.ndarray) -> np.ndarray:
        """Per-block coupling (h c / b) * sum of small-scale variables, shape (..., n).

        This is the forcing the truncated single-scale model is missing; its
        sample covariance over a run is the reference shape for the model
        error of that truncation.
        """
        _, y = self.split(state)
        blocks = y.reshape(y.shape[:-1] + (self.n, self.n_s // self.n))
        return (self.h * self.c / self.b) * blocks.sum(axis=-1)


@dataclass(frozen=True)
class CycledModel:
    """An ODE system advanced a fixed number of rk4 steps per assimilation cycle."""

    system: object        # anything with .deriv(state) and .dimension
    dt: float             # model time step
    n_steps: int          # steps per cycle

    @property
    def cycle_length(self) -> float:
        return self.dt * self.n_steps

    @property
    def dimension(self) -> int:
        return self.system.dimension

    def propagate(self, state: np.ndarray) -> np.ndarray:
        """Map state(s) one full cycle forward, shape preserved."""
        return integrate(self.system.deriv, state, self.dt, self.n_steps)


@dataclass(frozen=True)
class LinearModel:
    """Linear transition x -> a @ x, the cycle map of the reference problems."""

    a: np.ndarray         # (n, n) transition matrix

    @property
    def dimension(self) -> int:
        return self.a.shape[0]

    def propagate(self, state: np.ndarray) -> np.ndarray:
        return np.asarray(state, dtype=float) @ self.a.T
