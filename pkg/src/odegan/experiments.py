"""Experiment runners behind the command line.

Each ``run_*`` function takes an ``ExperimentConfig`` and an output directory,
writes its CSV files there and returns a ``RunSummary``. The summary JSON is
written by the caller (``write_summary``) so that timestamps never leak into
the CSV bodies.
"""

from __future__ import annotations

import csv
import datetime as _dt
import json
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import analysis
from .config import ExperimentConfig
from .games import GameState, GanGame, LinearGameBlocks, MLPSpec, MoGSpec, ToyGame, grid_means
from .integrators import StepperKind, integrate
from .trainer import TrainerConfig, final_window_means, settling_iteration, train

log = logging.getLogger(__name__)

EXIT_OK, EXIT_THRESHOLDS, EXIT_ABORTED, EXIT_CONFIG = 0, 2, 3, 4


@dataclass
class Check:
    name: str
    value: object
    threshold: str
    passed: bool


@dataclass
class RunSummary:
    kind: str
    config: dict
    metrics: dict = field(default_factory=dict)
    checks: list[Check] = field(default_factory=list)
    aborted: bool = False
    files: list[str] = field(default_factory=list)
    timing: dict = field(default_factory=dict)

    def check(self, name: str, value, threshold: str, passed: bool) -> bool:
        self.checks.append(Check(name, value, threshold, bool(passed)))
        return bool(passed)

    @property
    def passed(self) -> bool:
        return not self.aborted and all(c.passed for c in self.checks)

    @property
    def exit_code(self) -> int:
        if self.aborted:
            return EXIT_ABORTED
        return EXIT_OK if self.passed else EXIT_THRESHOLDS

    def to_dict(self) -> dict:
        d = asdict(self)
        d["status"] = "aborted" if self.aborted else ("passed" if self.passed else "failed")
        return _jsonable(d)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        x = float(obj)
        return None if not math.isfinite(x) else x
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    return obj


def write_summary(summary: RunSummary, out_dir: Path, started: float, elapsed: float) -> Path:
    summary.timing = {
        "started_utc": _dt.datetime.fromtimestamp(started, _dt.timezone.utc).isoformat(),
        "elapsed_s": elapsed,
    }
    path = out_dir / "summary.json"
    path.write_text(json.dumps(summary.to_dict(), indent=2, sort_keys=True) + "\n")
    return path


def _write_csv(path: Path, schema: str, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(f"# schema: {schema}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_cell(x) for x in row])


def _cell(x) -> str:
    if x is None:
        return ""
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return str(x)


def _hints(out_dir: Path, lines: list[str]) -> str:
    (out_dir / "plot_hints.txt").write_text("\n".join(lines) + "\n")
    return "plot_hints.txt"


# --------------------------------------------------------------------------- builders


def stepper_from(cfg: ExperimentConfig, name: str | None = None) -> StepperKind:
    return StepperKind(
        name or cfg["trainer.stepper"], a=float(cfg["trainer.a"]), b=float(cfg["trainer.b"]),
        gamma=None if cfg["trainer.gamma"] is None else float(cfg["trainer.gamma"]),
        beta1=float(cfg["trainer.beta1"]), beta2=float(cfg["trainer.beta2"]), eps=float(cfg["trainer.eps"]),
    )


def game_from(cfg: ExperimentConfig) -> GanGame:
    means = cfg["game.means"]
    if means is None:
        means = grid_means(int(cfg["game.grid_side"]), float(cfg["game.grid_spacing"]))
    hidden = tuple(cfg["game.hidden"])
    act, slope = cfg["game.activation"], float(cfg["game.slope"])
    latent = int(cfg["game.latent_dim"])
    return GanGame(
        discriminator=MLPSpec(2, 1, hidden, act, slope, int(cfg["game.d_seed"])),
        generator=MLPSpec(latent, 2, hidden, act, slope, int(cfg["game.g_seed"])),
        data=MoGSpec(means, float(cfg["game.std"])),
        latent_dim=latent,
        batch_size=int(cfg["game.batch_size"]),
        alpha=float(cfg["game.alpha"]),
        beta=float(cfg["game.beta"]),
    )


def trainer_config_from(cfg: ExperimentConfig, **changes) -> TrainerConfig:
    schedule = cfg["trainer.step_schedule"] or [[0, float(cfg["trainer.h"])]]
    kw = dict(
        stepper=stepper_from(cfg),
        step_schedule=[tuple(p) for p in schedule],
        lam=float(cfg["trainer.lambda"]),
        max_iterations=int(cfg["trainer.max_iterations"]),
        seed=cfg.seed,
        log_every=int(cfg["trainer.log_every"]),
        track_embedded_error=bool(cfg["trainer.track_embedded_error"]),
        coverage_every=int(cfg["trainer.coverage_every"]),
        coverage_samples=int(cfg["trainer.coverage_samples"]),
    )
    kw.update(changes)
    return TrainerConfig(**kw)


# --------------------------------------------------------------------------- toy


def run_toy(cfg: ExperimentConfig, out_dir: Path) -> RunSummary:
    eps, h, steps = float(cfg["toy.epsilon"]), float(cfg["toy.h"]), int(cfg["toy.steps"])
    init = [float(x) for x in cfg["toy.init"]]
    game = ToyGame(eps)
    s0 = GameState([init[0]], [init[1]])
    t = h * np.arange(steps + 1)
    analytic = analysis.toy_analytic_solution(eps, init, t) if eps < 2 else None
    summary = RunSummary("toy", cfg.echo())
    rows = []
    for name in cfg["toy.steppers"]:
        traj = integrate(stepper_from(cfg, name), game.velocity, s0, h, steps)
        for k, s in enumerate(traj):
            th, ph = s.theta[0], s.phi[0]
            if analytic is not None:
                at, ap = analytic[0][k], analytic[1][k]
                err = math.hypot(th - at, ph - ap)
            else:
                at = ap = err = None
            rows.append([name, k, t[k], th, ph, s.norm(), at, ap, err])
        ratio = traj[-1].norm() / s0.norm()
        summary.metrics[f"{name}_norm_ratio"] = ratio
    for name, bound in (cfg["toy.min_ratio"] or {}).items():
        val = summary.metrics.get(f"{name}_norm_ratio")
        if val is not None:
            summary.check(f"{name}_growth", val, f"> {bound}", val > bound)
    for name, bound in (cfg["toy.max_ratio"] or {}).items():
        val = summary.metrics.get(f"{name}_norm_ratio")
        if val is not None:
            summary.check(f"{name}_decay", val, f"< {bound}", val < bound)
    _write_csv(out_dir / "toy_trajectory.csv", "odegan.toy/1",
               ["stepper", "step", "t", "theta", "phi", "norm", "analytic_theta", "analytic_phi", "error"], rows)
    summary.files += ["toy_trajectory.csv", _hints(out_dir, [
        "toy_trajectory.csv: x=theta y=phi, one curve per stepper (phase portrait)",
        "toy_trajectory.csv: x=t y=norm, log y axis, one curve per stepper",
    ])]
    return summary


# --------------------------------------------------------------------------- order of accuracy


def order_errors(eps: float, init, t_end: float, h_values, steppers) -> dict[str, list[float]]:
    game = ToyGame(eps)
    s0 = GameState([init[0]], [init[1]])
    exact = np.array([float(x) for x in analysis.toy_analytic_solution(eps, init, t_end)])
    out = {}
    for name in steppers:
        errs = []
        for h in h_values:
            n = int(round(t_end / h))
            if not math.isclose(n * h, t_end, rel_tol=1e-12):
                raise ValueError(f"T={t_end} is not a multiple of h={h}")
            final = integrate(StepperKind(name), game.velocity, s0, h, n)[-1]
            errs.append(float(np.linalg.norm(final.flat() - exact)))
        out[name] = errs
    return out


def loglog_slope(h_values, errors) -> float:
    return float(np.polyfit(np.log(h_values), np.log(errors), 1)[0])


def run_order_test(cfg: ExperimentConfig, out_dir: Path) -> RunSummary:
    eps, t_end = float(cfg["order.epsilon"]), float(cfg["order.T"])
    hs = [float(h) for h in cfg["order.h_values"]]
    init = [float(x) for x in cfg["order.init"]]
    errors = order_errors(eps, init, t_end, hs, cfg["order.steppers"])
    summary = RunSummary("order-test", cfg.echo())
    rows = []
    expected = cfg["order.expected"] or {}
    for name, errs in errors.items():
        slope = loglog_slope(hs, errs)
        summary.metrics[f"{name}_slope"] = slope
        rows += [[h, name, e] for h, e in zip(hs, errs)]
        if name in expected:
            target, tol = expected[name]
            summary.check(f"{name}_slope", slope, f"{target} +/- {tol}", abs(slope - target) <= tol)
        i_small, i_large = int(np.argmin(hs)), int(np.argmax(hs))
        summary.check(f"{name}_monotone", [errs[i_small], errs[i_large]], "err(h_min) < err(h_max)",
                      errs[i_small] < errs[i_large])
    _write_csv(out_dir / "order.csv", "odegan.order/1", ["h", "stepper", "global_error"], rows)
    summary.files += ["order.csv", _hints(out_dir, ["order.csv: x=h y=global_error, log-log, one line per stepper"])]
    return summary


# --------------------------------------------------------------------------- mixture of Gaussians


def _grad_blowup_ratio(traj, after: int = 1000) -> float:
    g = np.array([r.grad_norm_g for r in traj.records if r.iteration >= after])
    if g.size == 0:
        return math.nan
    return float(g.max() / np.median(g))


def _mog_metrics(cfg, game, traj, prefix=""):
    window = int(cfg["mog.final_window"])
    means = final_window_means(traj, window) if traj.records else {}
    m = {f"{prefix}{k}_final_mean": v for k, v in means.items()}
    m[f"{prefix}settle_iteration"] = settling_iteration(traj, float(cfg["mog.gap_threshold"]), int(cfg["mog.settle_window"]))
    m[f"{prefix}grad_norm_g_max_over_median"] = _grad_blowup_ratio(traj)
    m[f"{prefix}status"] = traj.status
    if traj.message:
        m[f"{prefix}abort_message"] = traj.message
    return m


def run_mog(cfg: ExperimentConfig, out_dir: Path) -> RunSummary:
    game = game_from(cfg)
    tcfg = trainer_config_from(cfg)
    summary = RunSummary("mog", cfg.echo())
    traj = train(game, tcfg, progress_every=1000)
    traj.write_csv(out_dir / "trajectory.csv")
    summary.files.append("trajectory.csv")
    summary.metrics.update(_mog_metrics(cfg, game, traj))
    thr = float(cfg["mog.gap_threshold"])
    if traj.aborted:
        summary.aborted = True
        return summary
    n = int(cfg["mog.final_samples"])
    rng = np.random.default_rng(cfg.seed + 104729)
    samples = game.generate(traj.final_state, rng.standard_normal((n, game.latent_dim)))
    _write_csv(out_dir / "samples.csv", "odegan.samples/1", ["x0", "x1"], samples.tolist())
    summary.files.append("samples.csv")
    from .trainer import mode_coverage

    cov = mode_coverage(samples, game.data)
    summary.metrics["final_coverage"] = cov
    summary.check("gap_d_final_mean", summary.metrics["gap_d_final_mean"], f"< {thr}",
                  summary.metrics["gap_d_final_mean"] < thr)
    summary.check("gap_g_final_mean", summary.metrics["gap_g_final_mean"], f"< {thr}",
                  summary.metrics["gap_g_final_mean"] < thr)
    summary.check("final_coverage", cov, f">= {cfg['mog.min_coverage']}", cov >= float(cfg["mog.min_coverage"]))
    if tcfg.lam > 0:
        ratio = summary.metrics["grad_norm_g_max_over_median"]
        summary.check("grad_norm_g_bounded", ratio, "<= 10 (after iteration 1000)", not ratio > 10)
    else:
        summary.metrics["gradient_blowup_flag"] = bool(summary.metrics["grad_norm_g_max_over_median"] > 10)

    other = cfg["mog.compare_stepper"]
    if other:
        ocfg = trainer_config_from(cfg, stepper=stepper_from(cfg, other))
        otraj = train(game, ocfg, progress_every=1000)
        otraj.write_csv(out_dir / f"trajectory_{other}.csv")
        summary.files.append(f"trajectory_{other}.csv")
        summary.metrics.update(_mog_metrics(cfg, game, otraj, prefix=f"{other}_"))
        if otraj.aborted:
            summary.check(f"{other}_completed", otraj.message, "no abort", False)
        else:
            om = summary.metrics
            summary.check(f"{other}_converged", [om[f"{other}_gap_d_final_mean"], om[f"{other}_gap_g_final_mean"]],
                          f"both < {thr}", om[f"{other}_gap_d_final_mean"] < thr and om[f"{other}_gap_g_final_mean"] < thr)
            mine, theirs = om["settle_iteration"], om[f"{other}_settle_iteration"]
            ok = mine is not None and (theirs is None or theirs >= mine)
            summary.check(f"{other}_settles_no_earlier", [mine, theirs],
                          f"settle({other}) >= settle({tcfg.stepper.name})", ok)
    summary.files.append(_hints(out_dir, [
        "trajectory.csv: x=iter y=l_d,l_g with reference lines log(4), log(2)",
        "trajectory.csv: x=iter y=grad_norm_d,grad_norm_g (log y)",
        "trajectory.csv: x=iter y=embedded_err (log y) when tracked",
        "samples.csv: 2-d histogram of x0,x1 over [-2.5, 2.5]^2",
    ]))
    return summary


# --------------------------------------------------------------------------- regularisation sweep


def _sweep_worker(args):
    values, lam = args
    cfg = ExperimentConfig("reg-sweep", values)
    game = game_from(cfg)
    tcfg = trainer_config_from(cfg, lam=float(lam), track_embedded_error=True, coverage_every=0)
    traj = train(game, tcfg)
    return {
        "lambda": float(lam),
        "status": traj.status,
        "message": traj.message,
        "iterations": traj.iterations.tolist(),
        "embedded_err": traj.series("embedded_err").tolist(),
        "grad_norm_g": traj.series("grad_norm_g").tolist(),
        "gaps": final_window_means(traj, int(cfg["mog.final_window"])) if traj.records else {},
    }


def _window_mean(run: dict, key: str, start: int, stop: int) -> float:
    vals = [v for i, v in zip(run["iterations"], run[key]) if start <= i < stop and math.isfinite(v)]
    return float(np.mean(vals)) if vals else math.nan


def run_reg_sweep(cfg: ExperimentConfig, out_dir: Path, parallel: int | None = None) -> RunSummary:
    """Train once per lambda and compare mean embedded error over a common iteration window.

    The window is ``[sweep.window_start, stop)`` where ``stop`` is the last
    iteration every run reached with a finite embedded error, so an aborted
    run is still compared on the span it completed.
    """
    lambdas = [float(x) for x in cfg["sweep.lambdas"]]
    if len(lambdas) < 2:
        raise ValueError("reg-sweep needs at least two lambda values")
    parallel = int(parallel or cfg["sweep.parallel"] or 1)
    jobs = [(dict(cfg.values), lam) for lam in lambdas]
    if parallel > 1:
        with ProcessPoolExecutor(max_workers=parallel) as pool:
            runs = list(pool.map(_sweep_worker, jobs))
    else:
        runs = [_sweep_worker(j) for j in jobs]
    start = int(cfg["sweep.window_start"])
    stop = min(max([i for i, e in zip(r["iterations"], r["embedded_err"]) if math.isfinite(e)], default=-1)
               for r in runs) + 1
    summary = RunSummary("reg-sweep", cfg.echo())
    rows = []
    for r in runs:
        err = _window_mean(r, "embedded_err", start, stop)
        gn = _window_mean(r, "grad_norm_g", start, stop)
        rows.append([r["lambda"], err, gn])
        summary.metrics.setdefault("runs", []).append({
            "lambda": r["lambda"], "status": r["status"], "message": r["message"], "mean_embedded_error": err,
            "mean_grad_norm_g": gn, "final_window": r["gaps"],
        })
    summary.metrics["window"] = [start, stop]
    summary.metrics["aborted_runs"] = [r["lambda"] for r in runs if r["status"] == "aborted"]
    _write_csv(out_dir / "reg_sweep.csv", "odegan.reg_sweep/1", ["lambda", "mean_embedded_error", "mean_grad_norm_g"],
               rows)
    summary.files += ["reg_sweep.csv", _hints(out_dir, ["reg_sweep.csv: x=lambda y=mean_embedded_error (log y)"])]
    if stop <= start:
        summary.check("matched_window", [start, stop], "non-empty", False)
        return summary
    errs = [row[1] for row in sorted(rows, key=lambda row: row[0])]
    ok = all(b <= a for a, b in zip(errs, errs[1:]))
    summary.check("embedded_error_nonincreasing", errs, "nonincreasing in lambda", ok)
    return summary


# --------------------------------------------------------------------------- eigen checks


def tiny_gan(seed: int = 0, batch_size: int = 64) -> GanGame:
    return GanGame(
        discriminator=MLPSpec(2, 1, (4,), "relu", seed=seed + 1),
        generator=MLPSpec(2, 2, (4,), "relu", seed=seed + 2),
        latent_dim=2,
        batch_size=batch_size,
    )


def random_lemma_blocks(rng: np.random.Generator, n: int, m: int) -> LinearGameBlocks:
    g = rng.standard_normal((n, n))
    k = rng.standard_normal((m, m))
    b = rng.standard_normal((m, n))
    return LinearGameBlocks(g @ g.T + 0.1 * np.eye(n), b, k @ k.T)


TOY_EIGEN = complex(0.05, math.sqrt(1 - 0.05**2))


def run_eigen_check(cfg: ExperimentConfig, out_dir: Path) -> RunSummary:
    summary = RunSummary("eigen-check", cfg.echo())
    rng = np.random.default_rng(cfg.seed)
    trials, dim = int(cfg["eigen.trials"]), int(cfg["eigen.dim"])
    lines = []
    positive = 0
    worst = math.inf
    for i in range(trials):
        rep = analysis.check_differential_nash(random_lemma_blocks(rng, dim, dim))
        positive += rep.min_real_part > 0
        worst = min(worst, rep.min_real_part)
        lines.append(f"trial {i} verdict {rep.verdict} min_real_part {rep.min_real_part!r}")
    summary.metrics["lemma_min_real_part_worst"] = worst
    summary.check("lemma_trials_positive", f"{positive}/{trials}", f"{trials}/{trials}", positive == trials)

    toy = analysis.eigen_spectrum(ToyGame(0.1).jacobian(GameState([0.0], [0.0])))
    dev = max(min(abs(v - TOY_EIGEN), abs(v - TOY_EIGEN.conjugate())) for v in toy.values)
    summary.metrics["toy_spectrum"] = toy.pairs
    summary.check("toy_spectrum", dev, "<= 1e-9", dev <= 1e-9)

    bil = analysis.check_differential_nash(LinearGameBlocks([[0.0]], [[1.0]], [[0.0]]))
    summary.check("bilinear_nonhyperbolic", bil.verdict, "NonHyperbolic", bil.verdict == "NonHyperbolic")
    lines.append("bilinear\n" + bil.to_text())

    game = tiny_gan(cfg.seed)
    tol = float(cfg["eigen.psd_tol"])
    n_states = int(cfg["eigen.psd_states"])
    full_ok = out_ok = 0
    mins_full, mins_out = [], []
    for _ in range(n_states):
        st = GameState(rng.standard_normal(game.n_theta), rng.standard_normal(game.n_phi))
        batch = game.sample_batch(rng)
        full = analysis.discriminator_hessian_psd_check(game, st, batch, tol)
        outb = analysis.discriminator_hessian_psd_check(game, st, batch, tol, block="output")
        full_ok += full.passed
        out_ok += outb.passed
        mins_full.append(full.min_eigenvalue)
        mins_out.append(outb.min_eigenvalue)
    summary.metrics["psd_all_params_min_eig"] = min(mins_full)
    summary.metrics["psd_output_layer_min_eig"] = min(mins_out)
    summary.metrics["psd_output_layer_pass"] = f"{out_ok}/{n_states}"
    summary.check("relu_discriminator_hessian_psd", f"{full_ok}/{n_states}", f"{n_states}/{n_states} with min eig >= -{tol:g}",
                  full_ok == n_states)

    iters = int(cfg["eigen.train_iterations"])
    tcfg = TrainerConfig(StepperKind("rk4"), ((0, 0.03),), 0.07, max(iters, 1), seed=cfg.seed, log_every=max(iters, 1))
    traj = train(game, tcfg)
    st = traj.final_state
    batch = game.sample_batch(np.random.default_rng(cfg.seed + 1))
    h = analysis.jacobian_at(game, st, batch)
    _, offdev = analysis.offdiag_opposites_check(h, (game.n_theta, game.n_phi))
    summary.metrics["tiny_gan_offdiag_deviation"] = offdev
    lines.append(f"tiny_gan offdiag_deviation {offdev!r} after {iters} iterations")
    (out_dir / "eigen_report.txt").write_text("\n".join(lines) + "\n")
    summary.files.append("eigen_report.txt")
    return summary


# --------------------------------------------------------------------------- linear probe


def run_linear_probe(cfg: ExperimentConfig, out_dir: Path) -> RunSummary:
    a, b, c = cfg["linear.a"], cfg["linear.b"], cfg["linear.c"]
    if a is None or b is None or c is None:
        raise ValueError("linear-probe needs linear.a, linear.b and linear.c")
    blocks = LinearGameBlocks(a, b, c)
    rep = analysis.check_differential_nash(blocks, float(cfg["linear.tol"]))
    spec = analysis.eigen_spectrum(blocks.matrix())
    summary = RunSummary("linear-probe", cfg.echo())
    summary.metrics.update(rep.to_dict())
    summary.metrics["spectrum"] = spec.pairs
    (out_dir / "linear_report.txt").write_text(rep.to_text())
    summary.files.append("linear_report.txt")
    return summary


RUNNERS = {
    "toy": run_toy,
    "order-test": run_order_test,
    "mog": run_mog,
    "reg-sweep": run_reg_sweep,
    "eigen-check": run_eigen_check,
    "linear-probe": run_linear_probe,
}


def run(cfg: ExperimentConfig, out_dir: Path, **kw) -> RunSummary:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    started = time.time()
    t0 = time.perf_counter()
    summary = RUNNERS[cfg.kind](cfg, out_dir, **kw)
    write_summary(summary, out_dir, started, time.perf_counter() - t0)
    return summary
