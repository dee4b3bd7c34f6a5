"""Linearised-dynamics analysis of two-player games.

Jacobians and spectra, the structural checks behind local convergence near a
differential Nash equilibrium, the closed-form toy trajectory, and the
one-step Euler truncation-error estimate.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import NamedTuple

import numpy as np

from . import eigen
from .games import GameState, LinearGameBlocks, PIECEWISE_LINEAR

DENSE_GUARD = 512
DEFINITENESS_TOL = 1e-8
RANK_RTOL = 1e-8


class EigenSpectrum(NamedTuple):
    values: np.ndarray  # complex, unordered

    @property
    def pairs(self) -> list[tuple[float, float]]:
        return [(float(v.real), float(v.imag)) for v in self.values]

    @property
    def min_real(self) -> float:
        return float(self.values.real.min())

    @property
    def max_abs_real(self) -> float:
        return float(np.abs(self.values.real).max())

    def conjugate_closed(self, tol: float = 1e-9) -> bool:
        remaining = list(self.values)
        while remaining:
            v = remaining.pop()
            if abs(v.imag) <= tol:
                continue
            dists = [abs(w - np.conj(v)) for w in remaining]
            if not dists or min(dists) > tol * max(1.0, abs(v)):
                return False
            remaining.pop(int(np.argmin(dists)))
        return True


def jacobian_at(game, state: GameState, batch=None) -> np.ndarray:
    """H = -[dv/dtheta, dv/dphi] at ``state``."""
    dim = state.n_theta + state.n_phi
    if dim > DENSE_GUARD:
        raise ValueError(f"parameter dimension {dim} exceeds dense guard {DENSE_GUARD}")
    return np.asarray(game.jacobian(state, batch), dtype=np.float64)


def eigen_spectrum(h: np.ndarray) -> EigenSpectrum:
    return EigenSpectrum(eigen.eigvals(h))


def _sym_min_eig(m: np.ndarray) -> float:
    sym = 0.5 * (m + m.T)
    return float(eigen.eigvals(sym).real.min())


@dataclass
class NashCheckReport:
    a_min_eig: float
    a_pd: bool
    a_psd: bool
    c_min_eig: float
    c_pd: bool
    c_psd: bool
    b_min_singular: float
    b_full_rank: bool
    h_invertible: bool
    min_real_part: float
    max_abs_real_part: float
    verdict: str  # ConvergesLocally | Inconclusive | NonHyperbolic

    @property
    def hypotheses_hold(self) -> bool:
        return ((self.a_pd and self.c_psd) or (self.a_psd and self.c_pd)) and self.b_full_rank

    def to_dict(self) -> dict:
        return asdict(self)

    def to_text(self) -> str:
        return "".join(f"{k} {_fmt(v)}\n" for k, v in self.to_dict().items())


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _invertible(m: np.ndarray, tol: float) -> bool:
    ev = np.abs(eigen.eigvals(m))
    return bool(ev.min() > tol * max(1.0, ev.max()))


def check_differential_nash(blocks: LinearGameBlocks, tol: float = DEFINITENESS_TOL) -> NashCheckReport:
    a, b, c = blocks.a, blocks.b, blocks.c
    a_min = _sym_min_eig(a)
    c_min = _sym_min_eig(c)
    a_pd, a_psd = a_min > tol, a_min >= -tol
    c_pd, c_psd = c_min > tol, c_min >= -tol
    sv = np.linalg.svd(b, compute_uv=False)
    b_min = float(sv.min())
    b_full = bool(sv.max() > 0 and b_min > RANK_RTOL * sv.max())
    if a_pd:
        # Schur complement of A
        h_inv = _invertible(a, tol) and _invertible(c + b @ np.linalg.solve(a, b.T), tol)
    elif c_pd:
        h_inv = _invertible(c, tol) and _invertible(a + b.T @ np.linalg.solve(c, b), tol)
    else:
        h_inv = _invertible(blocks.matrix(), tol)
    spec = eigen_spectrum(blocks.matrix())
    min_re, max_abs_re = spec.min_real, spec.max_abs_real
    hyp = ((a_pd and c_psd) or (a_psd and c_pd)) and b_full
    if max_abs_re < tol:
        verdict = "NonHyperbolic"
    elif hyp and min_re > 0:
        verdict = "ConvergesLocally"
    else:
        verdict = "Inconclusive"
    return NashCheckReport(a_min, a_pd, a_psd, c_min, c_pd, c_psd, b_min, b_full, h_inv, min_re, max_abs_re, verdict)


def toy_analytic_solution(epsilon: float, init, t):
    """Exact flow of the toy game from ``init = (theta0, phi0)``; ``t`` may be an array.

    theta(t) = exp(-eps t / 2) (a0 cos wt + b0 sin wt), likewise for phi, with
    w = sqrt(4 - eps^2) / 2 and the constants fixed by the initial values and
    initial slopes of the ODE.
    """
    if not 0 <= epsilon < 2:
        raise ValueError("closed form requires 0 <= epsilon < 2")
    th0, ph0 = float(init[0]), float(init[1])
    w = math.sqrt(4.0 - epsilon**2) / 2.0
    a0, a1 = th0, ph0
    b0 = (ph0 - 0.5 * epsilon * th0) / w
    b1 = (0.5 * epsilon * ph0 - th0) / w
    t = np.asarray(t, dtype=np.float64)
    decay = np.exp(-0.5 * epsilon * t)
    cos, sin = np.cos(w * t), np.sin(w * t)
    return decay * (a0 * cos + b0 * sin), decay * (a1 * cos + b1 * sin)


class TruncationEstimate(NamedTuple):
    tau: np.ndarray
    half_step_difference: np.ndarray
    ratio_check: float


def truncation_estimate(game, state: GameState, h: float, batch=None) -> TruncationEstimate:
    """Leading Euler truncation term (h^2/4) J v against two half steps minus one full step.

    ``ratio_check`` is NaN when both are exactly zero (e.g. at a fixed point).
    """
    if not h > 0:
        raise ValueError("step size must be positive")
    v0 = np.asarray(game.velocity(state, batch))
    jac = -jacobian_at(game, state, batch)
    tau = (h * h / 4.0) * (jac @ v0)
    y = state.flat()
    full = y + h * v0
    mid = y + (h / 2) * v0
    v_mid = np.asarray(game.velocity(GameState.from_flat(mid, state.n_theta), batch))
    halves = mid + (h / 2) * v_mid
    diff = halves - full
    tn = float(np.linalg.norm(tau))
    dn = float(np.linalg.norm(diff))
    ratio = math.nan if tn == 0.0 else dn / tn
    return TruncationEstimate(tau, diff, ratio)


def offdiag_opposites_check(h: np.ndarray, split: tuple[int, int], tol: float = 1e-8) -> tuple[bool, float]:
    """Max |H_top_right + H_bottom_left^T| and whether it is below ``tol``."""
    n, m = split
    h = np.asarray(h, dtype=np.float64)
    if h.shape != (n + m, n + m):
        raise ValueError(f"matrix shape {h.shape} does not match split {split}")
    if n == 0 or m == 0:
        return True, 0.0
    dev = float(np.abs(h[:n, n:] + h[n:, :n].T).max())
    return dev < tol, dev


@dataclass
class PsdCheck:
    status: str  # ok | violated | skipped
    min_eigenvalue: float | None
    message: str = ""

    @property
    def passed(self) -> bool:
        return self.status == "ok"


def discriminator_hessian_psd_check(game, state: GameState, batch, tol: float = 1e-6,
                                    block: str = "all") -> PsdCheck:
    """Minimum eigenvalue of d^2 l_D / d theta^2.

    ``block="all"`` uses every discriminator parameter. ``block="output"``
    restricts to the output layer (weights and bias), the only block in which
    the logit is linear in the parameters once hidden layers are present;
    there the Hessian is a positively weighted sum of outer products.
    """
    spec = game.discriminator
    if spec.hidden and spec.activation not in PIECEWISE_LINEAR:
        return PsdCheck("skipped", None, f"activation {spec.activation!r} is not piecewise linear")
    if state.n_theta > DENSE_GUARD:
        raise ValueError(f"discriminator has {state.n_theta} parameters, above dense guard {DENSE_GUARD}")
    hess = game.hessian_d(state, batch)
    if block == "output":
        r, c = spec.shapes[-2]
        k = r * c + c
        hess = hess[-k:, -k:]
    elif block != "all":
        raise ValueError("block must be 'all' or 'output'")
    lo = _sym_min_eig(hess)
    if lo >= -tol:
        return PsdCheck("ok", lo)
    return PsdCheck("violated", lo, f"min eigenvalue {lo:.3e} below -{tol:g}")
