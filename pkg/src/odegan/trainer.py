"""ODE-style GAN training loop with the generator-gradient-norm regulariser.

Each iteration, in order:

1. draw one batch (reused by every stage of the step),
2. compute ``g = grad_theta ||dl_G/dphi||^2`` at the current state,
3. advance both players with the configured stepper,
4. apply ``theta -= h * lam * g``,
5. log.
"""

from __future__ import annotations

import csv
import dataclasses
import logging
import math
import time
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

from .autodiff import AutodiffError
from .games import LOG2, LOG4, GameState, LossPair, MoGSpec
from .integrators import Moments, StepperKind, embedded23_step

log = logging.getLogger(__name__)

TRAJECTORY_SCHEMA = "# schema: odegan.trajectory/1"
TRAJECTORY_COLUMNS = ("iter", "l_d", "l_g", "grad_norm_d", "grad_norm_g", "gap_d", "gap_g", "embedded_err", "coverage")


@dataclass
class TrainerConfig:
    stepper: StepperKind = field(default_factory=lambda: StepperKind("rk4"))
    step_schedule: Sequence[tuple[int, float]] = ((0, 0.03),)
    lam: float = 0.07
    max_iterations: int = 18000
    batch_size: int | None = None
    seed: int = 0
    log_every: int = 1
    track_embedded_error: bool = False
    coverage_every: int = 0
    coverage_samples: int = 2000
    alpha: float | None = None
    beta: float | None = None

    def __post_init__(self):
        self.step_schedule = tuple((int(i), float(h)) for i, h in self.step_schedule)
        if not self.step_schedule or self.step_schedule[0][0] != 0:
            raise ValueError("step schedule must start at iteration 0")
        thresholds = [i for i, _ in self.step_schedule]
        if any(b <= a for a, b in zip(thresholds, thresholds[1:])):
            raise ValueError("step schedule thresholds must be strictly increasing")
        if any(not h > 0 for _, h in self.step_schedule):
            raise ValueError("step sizes must be positive")
        if self.lam < 0:
            raise ValueError("lambda must be nonnegative")
        if self.max_iterations < 1 or self.log_every < 1:
            raise ValueError("max_iterations and log_every must be >= 1")

    def step_size(self, iteration: int) -> float:
        h = self.step_schedule[0][1]
        for start, value in self.step_schedule:
            if iteration >= start:
                h = value
        return h


@dataclass
class LogRecord:
    iteration: int
    l_d: float
    l_g: float
    grad_norm_d: float
    grad_norm_g: float
    gap_d: float
    gap_g: float
    h: float
    embedded_err: float | None = None
    coverage: float | None = None
    wall_clock: float = 0.0

    def csv_row(self) -> list[str]:
        def f(x):
            return "" if x is None else repr(float(x))

        return [str(self.iteration), f(self.l_d), f(self.l_g), f(self.grad_norm_d), f(self.grad_norm_g),
                f(self.gap_d), f(self.gap_g), f(self.embedded_err), f(self.coverage)]


@dataclass
class TrajectoryLog:
    records: list[LogRecord] = field(default_factory=list)
    final_state: GameState | None = None
    status: str = "completed"  # completed | aborted
    message: str = ""

    @property
    def aborted(self) -> bool:
        return self.status == "aborted"

    def series(self, name: str) -> np.ndarray:
        vals = [getattr(r, name) for r in self.records]
        return np.array([np.nan if v is None else v for v in vals], dtype=np.float64)

    @property
    def iterations(self) -> np.ndarray:
        return np.array([r.iteration for r in self.records], dtype=np.int64)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            fh.write(TRAJECTORY_SCHEMA + "\n")
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(TRAJECTORY_COLUMNS)
            for r in self.records:
                writer.writerow(r.csv_row())


class StepOutcome(NamedTuple):
    state: GameState
    record: LogRecord
    moments: Moments | None


class TrainingAborted(RuntimeError):
    def __init__(self, message: str, record: LogRecord | None = None):
        super().__init__(message)
        self.record = record


def nash_gap(losses: LossPair) -> tuple[float, float]:
    return abs(losses[0] - LOG4), abs(losses[1] - LOG2)


def mode_coverage(samples: np.ndarray, spec: MoGSpec) -> float:
    """Fraction of modes with at least max(1, n / (10 K)) samples within 4 sigma."""
    samples = np.asarray(samples, dtype=np.float64)
    n = samples.shape[0]
    if n < 1:
        raise ValueError("need at least one sample")
    k = spec.n_modes
    need = max(1.0, n / (10.0 * k))
    d2 = ((samples[:, None, :] - spec.means[None, :, :]) ** 2).sum(axis=-1)
    counts = (d2 <= (4.0 * spec.std) ** 2).sum(axis=0)
    return float((counts >= need).sum()) / k


def reg_grad(game, state: GameState, batch=None) -> np.ndarray:
    """grad_theta ||dl_G/dphi||^2 at ``state``."""
    return game.reg_grad(state, batch)


def _with_scalings(game, config: TrainerConfig):
    changes = {}
    if config.alpha is not None and config.alpha != game.alpha:
        changes["alpha"] = config.alpha
    if config.beta is not None and config.beta != game.beta:
        changes["beta"] = config.beta
    if changes:
        return dataclasses.replace(game, **changes)
    return game


def generator_coverage(game, state: GameState, n: int, seed: int) -> float:
    rng = np.random.default_rng(seed)
    z = rng.standard_normal((n, game.latent_dim))
    return mode_coverage(game.generate(state, z), game.data)


def train_step(game, state: GameState, config: TrainerConfig, iteration: int, rng: np.random.Generator,
               moments: Moments | None = None) -> StepOutcome:
    if iteration >= config.max_iterations:
        raise ValueError("iteration index beyond max_iterations")
    t0 = time.perf_counter()
    h = config.step_size(iteration)
    batch = None
    if hasattr(game, "sample_batch"):
        batch = game.sample_batch(rng, config.batch_size)
    use_reg = config.lam > 0
    try:
        pre = game.probe(state, batch, with_reg=use_reg)
    except (FloatingPointError, AutodiffError) as exc:
        raise TrainingAborted(f"iteration {iteration}: {exc}") from exc

    def v(s: GameState) -> np.ndarray:
        if s is state:
            return pre.velocity
        return game.velocity(s, batch)

    gap_d, gap_g = nash_gap(pre.losses)
    record = LogRecord(
        iteration, pre.losses.l_d, pre.losses.l_g,
        float(np.linalg.norm(pre.grad_d)), float(np.linalg.norm(pre.grad_g)),
        gap_d, gap_g, h,
    )
    try:
        res = config.stepper.step(v, state, h, moments)
        if config.stepper.embedded:
            record.embedded_err = res.error_estimate
        elif config.track_embedded_error:
            record.embedded_err = embedded23_step(v, state, h).error_estimate
    except (FloatingPointError, AutodiffError) as exc:
        raise TrainingAborted(f"iteration {iteration}: {exc}", record) from exc
    new = res.next_state
    if use_reg:
        new = GameState(new.theta - h * config.lam * pre.reg_grad, new.phi)
    if not new.is_finite():
        raise TrainingAborted(f"iteration {iteration}: non-finite state after step", record)
    record.wall_clock = time.perf_counter() - t0
    return StepOutcome(new, record, res.moments)


def train(game, config: TrainerConfig, state: GameState | None = None, progress_every: int = 0) -> TrajectoryLog:
    """Run ``config.max_iterations`` steps; on a non-finite state return the partial log marked aborted."""
    game = _with_scalings(game, config)
    if state is None:
        state = game.init_state()
    rng = np.random.default_rng(config.seed)
    out = TrajectoryLog()
    moments = None
    last = config.max_iterations - 1
    for i in range(config.max_iterations):
        try:
            state, record, moments = train_step(game, state, config, i, rng, moments)
        except TrainingAborted as exc:
            out.status, out.message = "aborted", str(exc)
            if exc.record is not None:
                out.records.append(exc.record)
            log.warning("training aborted: %s", exc)
            break
        if i % config.log_every == 0 or i == last:
            cov_due = config.coverage_every and (i % config.coverage_every == 0 or i == last)
            if cov_due and hasattr(game, "generate"):
                record.coverage = generator_coverage(game, state, config.coverage_samples, config.seed + 7919 + i)
            out.records.append(record)
        if progress_every and i % progress_every == 0:
            log.info("iter %d  l_d=%.4f l_g=%.4f |g_D|=%.3g |g_G|=%.3g", i, record.l_d, record.l_g,
                     record.grad_norm_d, record.grad_norm_g)
    out.final_state = state
    return out


def trailing_mean(values: np.ndarray, window: int) -> np.ndarray:
    """Mean of the last ``window`` entries at each position (shorter at the start)."""
    values = np.asarray(values, dtype=np.float64)
    c = np.concatenate([[0.0], np.cumsum(values)])
    idx = np.arange(1, len(values) + 1)
    lo = np.maximum(0, idx - window)
    return (c[idx] - c[lo]) / (idx - lo)


def settling_iteration(traj: TrajectoryLog, threshold: float = 0.15, window: int = 500) -> int | None:
    """First logged iteration after which the trailing-mean Nash gaps both stay below ``threshold``.

    Returns None when the run never settles.
    """
    if not traj.records:
        return None
    ok = (trailing_mean(traj.series("gap_d"), window) < threshold) & (
        trailing_mean(traj.series("gap_g"), window) < threshold
    )
    if not ok[-1]:
        return None
    bad = np.nonzero(~ok)[0]
    first_ok = 0 if bad.size == 0 else bad[-1] + 1
    return int(traj.iterations[first_ok])


def final_window_means(traj: TrajectoryLog, count: int = 1000) -> dict[str, float]:
    tail = traj.records[-count:]
    return {
        "gap_d": float(np.mean([r.gap_d for r in tail])),
        "gap_g": float(np.mean([r.gap_g for r in tail])),
        "l_d": float(np.mean([r.l_d for r in tail])),
        "l_g": float(np.mean([r.l_g for r in tail])),
    }


def mean_embedded_error(traj: TrajectoryLog, start: int = 0, stop: int | None = None) -> float:
    vals = [r.embedded_err for r in traj.records
            if r.embedded_err is not None and r.iteration >= start and (stop is None or r.iteration < stop)]
    return float(np.mean(vals)) if vals else math.nan
