"""Explicit one-step integrators over a velocity field.

Every stepper takes ``v`` (a function from ``GameState`` to the flat velocity
array), the current ``GameState`` and a step size ``h`` and returns a
``StepResult``. Steppers never adapt ``h``.

The embedded 2(3) pair shares three stages::

    c  | A
    0  |
    1  | 1
    1/2| 1/4  1/4
    ---+----------------
    b3 | 1/6  1/6  2/3     (propagated, order 3)
    b2 | 1/2  1/2  0       (embedded, order 2)
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, NamedTuple

import numpy as np

from .games import GameState

Velocity = Callable[[GameState], np.ndarray]

STEPPERS = ("euler", "heun", "rk4", "embedded23", "extragradient", "consensus", "sga", "adam")


class Moments(NamedTuple):
    first: np.ndarray
    second: np.ndarray
    count: int

    @classmethod
    def zeros(cls, size: int) -> "Moments":
        return cls(np.zeros(size), np.zeros(size), 0)


@dataclass
class StepResult:
    next_state: GameState
    evaluations: int
    error_estimate: float | None = None
    moments: Moments | None = None


def _check_h(h):
    if not h > 0:
        raise ValueError(f"step size must be positive, got {h}")


def _eval(v: Velocity, state: GameState) -> np.ndarray:
    out = np.asarray(v(state), dtype=np.float64)
    if out.shape != (state.n_theta + state.n_phi,):
        raise ValueError(f"velocity has shape {out.shape}, expected ({state.n_theta + state.n_phi},)")
    if not np.all(np.isfinite(out)):
        raise FloatingPointError("non-finite velocity")
    return out


def _state(y, like: GameState) -> GameState:
    return GameState.from_flat(y, like.n_theta)


def euler_step(v: Velocity, state: GameState, h: float) -> StepResult:
    _check_h(h)
    y = state.flat()
    return StepResult(_state(y + h * _eval(v, state), state), 1)


def heun_step(v: Velocity, state: GameState, h: float) -> StepResult:
    _check_h(h)
    y = state.flat()
    k1 = _eval(v, state)
    y_pred = y + h * k1
    k2 = _eval(v, _state(y_pred, state))
    return StepResult(_state(y + (h / 2) * (k1 + k2), state), 2)


def rk4_step(v: Velocity, state: GameState, h: float) -> StepResult:
    _check_h(h)
    y = state.flat()
    k1 = _eval(v, state)
    k2 = _eval(v, _state(y + (h / 2) * k1, state))
    k3 = _eval(v, _state(y + (h / 2) * k2, state))
    k4 = _eval(v, _state(y + h * k3, state))
    return StepResult(_state(y + (h / 6) * (k1 + 2 * k2 + 2 * k3 + k4), state), 4)


def embedded23_step(v: Velocity, state: GameState, h: float) -> StepResult:
    """Advance with the third-order solution; report ||y3 - y2||_2."""
    _check_h(h)
    y = state.flat()
    k1 = _eval(v, state)
    k2 = _eval(v, _state(y + h * k1, state))
    k3 = _eval(v, _state(y + (h / 4) * (k1 + k2), state))
    y3 = y + h * (k1 / 6 + k2 / 6 + 2 * k3 / 3)
    y2 = y + (h / 2) * (k1 + k2)
    return StepResult(_state(y3, state), 3, error_estimate=float(np.linalg.norm(y3 - y2)))


def consensus_like_step(v: Velocity, state: GameState, h: float, a: float = 1.0, b: float = 1.0,
                        gamma: float | None = None) -> StepResult:
    """y~ = y + gamma v(y);  y+ = y + h/2 (a v(y) + b v(y~)).  ``gamma`` defaults to ``h``."""
    _check_h(h)
    gamma = h if gamma is None else gamma
    y = state.flat()
    k1 = _eval(v, state)
    k2 = _eval(v, _state(y + gamma * k1, state))
    return StepResult(_state(y + (h / 2) * (a * k1 + b * k2), state), 2)


def extragradient_step(v: Velocity, state: GameState, h: float) -> StepResult:
    _check_h(h)
    y = state.flat()
    k1 = _eval(v, state)
    k2 = _eval(v, _state(y + h * k1, state))
    return StepResult(_state(y + h * k2, state), 2)


def sga_like_step(v: Velocity, state: GameState, h: float, gamma: float | None = None) -> StepResult:
    """Each player's second velocity is taken with only the opponent look-ahead."""
    _check_h(h)
    gamma = h if gamma is None else gamma
    n = state.n_theta
    k1 = _eval(v, state)
    ahead = _state(state.flat() + gamma * k1, state)
    v_theta = _eval(v, GameState(state.theta, ahead.phi))[:n]
    v_phi = _eval(v, GameState(ahead.theta, state.phi))[n:]
    mixed = np.concatenate([v_theta, v_phi])
    return StepResult(_state(state.flat() + (h / 2) * (k1 + mixed), state), 3)


def adaptive_moment_baseline_step(v: Velocity, state: GameState, h: float, moments: Moments | None = None,
                                  beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> StepResult:
    """Bias-corrected first/second moment scaling of the velocity (Adam-style ascent along v)."""
    _check_h(h)
    if not (0 <= beta1 < 1 and 0 <= beta2 < 1):
        raise ValueError("moment decay rates must lie in [0, 1)")
    size = state.n_theta + state.n_phi
    moments = Moments.zeros(size) if moments is None else moments
    if moments.first.shape != (size,) or moments.second.shape != (size,):
        raise ValueError("moment accumulators must match the state size")
    g = _eval(v, state)
    t = moments.count + 1
    m = beta1 * moments.first + (1 - beta1) * g
    s = beta2 * moments.second + (1 - beta2) * g * g
    m_hat = m / (1 - beta1 ** t)
    s_hat = s / (1 - beta2 ** t)
    y = state.flat() + h * m_hat / (np.sqrt(s_hat) + eps)
    return StepResult(_state(y, state), 1, moments=Moments(m, s, t))


@dataclass(frozen=True)
class StepperKind:
    """A named stepper with its parameters, selectable from configs."""

    name: str = "rk4"
    a: float = 1.0
    b: float = 1.0
    gamma: float | None = None
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.name not in STEPPERS:
            raise ValueError(f"unknown stepper {self.name!r}; choose from {STEPPERS}")
        for val in (self.a, self.b, self.beta1, self.beta2, self.eps):
            if not np.isfinite(val):
                raise ValueError("stepper parameters must be finite")
        if self.gamma is not None and not np.isfinite(self.gamma):
            raise ValueError("gamma must be finite")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("beta1 and beta2 must lie in [0, 1)")

    @property
    def stateful(self) -> bool:
        return self.name == "adam"

    @property
    def embedded(self) -> bool:
        return self.name == "embedded23"

    def step(self, v: Velocity, state: GameState, h: float, moments: Moments | None = None) -> StepResult:
        name = self.name
        if name == "euler":
            return euler_step(v, state, h)
        if name == "heun":
            return heun_step(v, state, h)
        if name == "rk4":
            return rk4_step(v, state, h)
        if name == "embedded23":
            return embedded23_step(v, state, h)
        if name == "extragradient":
            return extragradient_step(v, state, h)
        if name == "consensus":
            return consensus_like_step(v, state, h, self.a, self.b, self.gamma)
        if name == "sga":
            return sga_like_step(v, state, h, self.gamma)
        return adaptive_moment_baseline_step(v, state, h, moments, self.beta1, self.beta2, self.eps)


def integrate(stepper: StepperKind, v: Velocity, state: GameState, h: float, steps: int) -> list[GameState]:
    """Fixed-step trajectory including the initial state."""
    out = [state]
    moments = None
    for _ in range(steps):
        res = stepper.step(v, out[-1], h, moments)
        moments = res.moments
        out.append(res.next_state)
    return out


def stability_polynomial(name: str, z):
    """Amplification factor R(z) of the stepper on y' = lambda*y, z = h*lambda."""
    z = np.asarray(z, dtype=np.complex128)
    if name == "euler":
        return 1 + z
    if name == "heun":
        return 1 + z + z**2 / 2
    if name == "rk4":
        return 1 + z + z**2 / 2 + z**3 / 6 + z**4 / 24
    if name == "embedded23":
        return 1 + z + z**2 / 2 + z**3 / 6
    if name == "extragradient":
        return 1 + z + z**2
    raise ValueError(f"no stability polynomial for {name!r}")
