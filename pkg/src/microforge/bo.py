"""Closed-loop Bayesian optimisation over the generator latent space.

The loop keeps a Gaussian-process surrogate of the NEGATED objective on
inputs affinely scaled to the unit box, proposes the next latent vector
by minimising mu - alpha * sigma with a bounded quasi-Newton multi-start,
evaluates it through the generator and property pipeline, and refits
with the previous hyperparameters as a warm start.  All randomness is
seeded, so a rerun with the same configuration reproduces the trace
bit for bit (wall-clock timings live only in memory and never reach the
persisted outputs).
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from typing import Callable, Protocol

import numpy as np
from scipy.optimize import minimize

from . import gp
from .errors import ConfigError, EvaluationError
from .objectives import ObjectiveSpec, evaluate_objective, freeze_from_design
from .props import PropertyReport, SolverConfig, evaluate_all
from .voxel import Microstructure

ALPHA_MAX = 1.96


@dataclass(frozen=True)
class DesignSpace:
    """Axis-aligned box for latent vectors with an affine map to the
    unit cube used by the surrogate."""

    dim: int
    lo: float = -5.0
    hi: float = 5.0

    def __post_init__(self):
        if self.dim < 1:
            raise ConfigError("design space needs at least one dimension")
        if not self.lo < self.hi:
            raise ConfigError("design space bounds must satisfy lo < hi")

    def scale(self, z: np.ndarray) -> np.ndarray:
        """Map design coordinates to [0, 1]."""
        z = np.asarray(z, dtype=np.float64)
        return (z - self.lo) / (self.hi - self.lo)

    def unscale(self, x: np.ndarray) -> np.ndarray:
        """Map unit-cube coordinates back to the design box."""
        x = np.asarray(x, dtype=np.float64)
        return self.lo + x * (self.hi - self.lo)

    def clip(self, z: np.ndarray) -> np.ndarray:
        return np.clip(np.asarray(z, dtype=np.float64), self.lo, self.hi)


def lhs(n: int, dim: int, seed: int) -> np.ndarray:
    """Latin hypercube sample on [0, 1]^dim.

    Each column is an independent random permutation of n strata with a
    uniform offset inside each stratum, so every column places exactly
    one point in each of the n equal bins.
    """
    if n < 1 or dim < 1:
        raise ConfigError("lhs needs n >= 1 and dim >= 1")
    rng = np.random.default_rng(seed)
    out = np.empty((n, dim), dtype=np.float64)
    for d in range(dim):
        perm = rng.permutation(n)
        out[:, d] = (perm + rng.random(n)) / n
    return out


def alpha_schedule(i: int, i_tot: int) -> float:
    """Linearly decaying exploration weight, 1.96 at i=0 down to 0 at
    i=i_tot."""
    if i_tot < 1:
        raise ConfigError("i_tot must be at least 1")
    if not 0 <= i <= i_tot:
        raise ConfigError(f"iteration {i} outside [0, {i_tot}]")
    return ALPHA_MAX * (1.0 - i / i_tot)


def acquisition(
    model: gp.GPModel, alpha: float, space: DesignSpace
) -> Callable[[np.ndarray], float]:
    """Scalar field over the design space: mu(z) - alpha * sigma(z) of
    the surrogate fitted to the negated objective.  Low values mark
    promising candidates."""

    def value(z: np.ndarray) -> float:
        mu, var = gp.predict(model, space.scale(z))
        return float(mu - alpha * np.sqrt(var))

    return value


def _acq_with_grad(model: gp.GPModel, alpha: float):
    """Acquisition value and gradient in the scaled unit cube."""

    def fun(x: np.ndarray):
        mu, var = gp.predict(model, x)
        sigma = float(np.sqrt(var))
        grad_mu, grad_sigma = gp.predict_gradient(model, x)
        return float(mu - alpha * sigma), grad_mu - alpha * grad_sigma

    return fun


@dataclass(frozen=True)
class AcquisitionResult:
    z: np.ndarray
    value: float
    improved: bool  # False when no start beat its own initial point


def minimise_acquisition(
    model: gp.GPModel,
    alpha: float,
    space: DesignSpace,
    starts: int = 5,
    seed: int = 0,
    max_iterations: int = 200,
    gtol: float = 1e-6,
) -> AcquisitionResult:
    """Multi-start bounded quasi-Newton minimisation of the acquisition.

    Starts come from a seeded Latin hypercube in the scaled space.  The
    best final iterate wins; if no start improves on its own initial
    value the best evaluated start is returned with improved=False.
    """
    fun = _acq_with_grad(model, alpha)
    x0s = lhs(starts, space.dim, seed)
    bounds = [(0.0, 1.0)] * space.dim
    best_x = None
    best_val = np.inf
    any_improved = False
    for x0 in x0s:
        f0, _ = fun(x0)
        res = minimize(
            fun,
            x0,
            jac=True,
            method="L-BFGS-B",
            bounds=bounds,
            options={"maxiter": max_iterations, "gtol": gtol},
        )
        x_end, f_end = res.x, float(res.fun)
        if not np.isfinite(f_end) or f_end > f0:
            x_end, f_end = x0, f0
        else:
            any_improved = any_improved or f_end < f0
        if f_end < best_val:
            best_val = f_end
            best_x = x_end
    best_x = np.clip(best_x, 0.0, 1.0)
    return AcquisitionResult(
        z=space.unscale(best_x), value=best_val, improved=any_improved
    )


class LoopObjective(Protocol):
    """What the loop needs from an objective: a freeze step over the
    initial design and a per-sample value."""

    def prepare(self, samples) -> None: ...

    def value(self, z, volume, report) -> float: ...


class PipelineObjective:
    """Adapter binding an ObjectiveSpec to the property pipeline."""

    def __init__(self, spec: ObjectiveSpec):
        self.spec = spec

    def prepare(self, samples) -> None:
        reports = [s[2] for s in samples]
        self.spec = freeze_from_design(self.spec, reports)

    def value(self, z, volume, report) -> float:
        return evaluate_objective(self.spec, volume, report)


class SyntheticObjective:
    """Wraps a plain z -> float callable; used to exercise the loop
    against closed-form targets."""

    def __init__(self, fn: Callable[[np.ndarray], float]):
        self.fn = fn
        self.spec = None

    def prepare(self, samples) -> None:
        pass

    def value(self, z, volume, report) -> float:
        return float(self.fn(z))


@dataclass(frozen=True)
class LoopConfig:
    space: DesignSpace
    n_init: int = 50
    i_tot: int = 500
    seed: int = 0
    solver: SolverConfig = field(default_factory=SolverConfig)
    threads: int = 1
    acq_starts: int = 5
    fit_starts: int = 5
    ard: bool = False
    fail_hard: bool = False  # raise on a failed evaluation instead of skipping
    early_stop_patience: int = 0  # 0 disables early stopping
    early_stop_tol: float = 0.0

    def __post_init__(self):
        if self.n_init < 2:
            raise ConfigError("need at least two initial design points")
        if self.i_tot < 0:
            raise ConfigError("i_tot must be non-negative")
        if self.early_stop_patience < 0 or self.early_stop_tol < 0:
            raise ConfigError("early-stop settings must be non-negative")


@dataclass
class TraceRecord:
    """One evaluated candidate, from the initial design or the loop."""

    index: int
    phase: str  # "init" or "bo"
    iteration: int | None
    alpha: float | None
    z: np.ndarray
    objective: float | None
    best_so_far: float | None
    accepted: bool
    report: PropertyReport | None = None
    nll: float | None = None
    acq_value: float | None = None
    acq_improved: bool | None = None
    message: str = ""
    wall_time: float = 0.0  # in-memory only, excluded from persisted files


@dataclass
class OptimisationTrace:
    records: list[TraceRecord]
    objective_spec: ObjectiveSpec | None
    config: LoopConfig
    best_volume: Microstructure | None = None  # in-memory only

    @property
    def best(self) -> float | None:
        values = [r.best_so_far for r in self.records if r.best_so_far is not None]
        return values[-1] if values else None

    def best_record(self) -> TraceRecord | None:
        best = None
        for rec in self.records:
            if not rec.accepted or rec.objective is None:
                continue
            if best is None or rec.objective > best.objective:
                best = rec
        return best

    def accepted_records(self) -> list[TraceRecord]:
        return [r for r in self.records if r.accepted]

    def training_size_after(self, index: int) -> int:
        return sum(1 for r in self.records[: index + 1] if r.accepted)

    CSV_COLUMNS = (
        "iteration",
        "alpha",
        "objective",
        "best_so_far",
        "phi_pore",
        "phi_nmc",
        "phi_cbd",
        "ssa_nmc",
        "d_rel_x",
        "d_rel_y",
        "d_rel_z",
    )

    def to_csv(self, path) -> None:
        """Summary table, one row per record.  Deterministic for a given
        configuration: no timestamps or timings are written."""
        lines = [",".join(self.CSV_COLUMNS)]
        for rec in self.records:
            row = [
                str(rec.index),
                "" if rec.alpha is None else repr(float(rec.alpha)),
                "" if rec.objective is None else repr(float(rec.objective)),
                "" if rec.best_so_far is None else repr(float(rec.best_so_far)),
            ]
            if rec.report is None:
                row.extend([""] * 7)
            else:
                r = rec.report
                row.extend(
                    repr(float(v))
                    for v in (
                        r.phi_pore,
                        r.phi_nmc,
                        r.phi_cbd,
                        r.ssa_nmc,
                        r.d_rel_x,
                        r.d_rel_y,
                        r.d_rel_z,
                    )
                )
            lines.append(",".join(row))
        with open(path, "w") as fh:
            fh.write("\n".join(lines) + "\n")

    def to_jsonl(self, path) -> None:
        """Full per-record log, one JSON object per line.  Wall-clock
        timings are deliberately omitted so reruns are byte-identical."""
        with open(path, "w") as fh:
            for rec in self.records:
                obj = {
                    "index": rec.index,
                    "phase": rec.phase,
                    "iteration": rec.iteration,
                    "alpha": rec.alpha,
                    "z": [float(v) for v in rec.z],
                    "objective": rec.objective,
                    "best_so_far": rec.best_so_far,
                    "accepted": rec.accepted,
                    "nll": rec.nll,
                    "acq_value": rec.acq_value,
                    "acq_improved": rec.acq_improved,
                    "message": rec.message,
                }
                if rec.report is not None:
                    cells = rec.report.to_csv_row().split(",")
                    obj["report"] = dict(zip(PropertyReport.CSV_COLUMNS, cells))
                fh.write(json.dumps(obj) + "\n")


def run_loop(
    objective,
    generator: Callable[[np.ndarray], Microstructure] | None,
    cfg: LoopConfig,
    snapshot_every: int = 0,
    snapshot_fn: Callable[[OptimisationTrace, int], None] | None = None,
) -> OptimisationTrace:
    """Run the full closed loop and return the in-memory trace.

    objective may be an ObjectiveSpec (evaluated through the property
    pipeline), a LoopObjective, or a plain z -> float callable for
    synthetic targets.  Failed evaluations are recorded and skipped
    rather than imputed unless cfg.fail_hard is set.  When the loop
    aborts with an exception, the partial trace is attached to it as
    `exc.trace` so callers can still flush what was completed.
    """
    if isinstance(objective, ObjectiveSpec):
        objective = PipelineObjective(objective)
    elif callable(objective) and not hasattr(objective, "value"):
        objective = SyntheticObjective(objective)

    space = cfg.space
    records: list[TraceRecord] = []
    trace = OptimisationTrace(records=records, objective_spec=None, config=cfg)
    try:
        return _run_loop_body(
            objective, generator, cfg, trace, snapshot_every, snapshot_fn
        )
    except Exception as exc:
        exc.trace = trace
        raise


def _run_loop_body(
    objective,
    generator,
    cfg: LoopConfig,
    trace: OptimisationTrace,
    snapshot_every: int,
    snapshot_fn,
) -> OptimisationTrace:
    space = cfg.space
    records = trace.records
    x_train: list[np.ndarray] = []  # scaled inputs
    y_train: list[float] = []  # raw objective values (maximisation)
    best: float | None = None

    def evaluate(z):
        """Generate and measure one candidate.  Returns
        (volume, report, ok, message)."""
        if generator is None:
            return None, None, True, ""
        try:
            volume = generator(z)
            report = evaluate_all(volume, cfg.solver, threads=cfg.threads)
        except Exception as exc:  # noqa: BLE001 - caller decides severity
            if cfg.fail_hard:
                raise
            return None, None, False, f"evaluation failed: {exc}"
        if not report.converged:
            if cfg.fail_hard:
                raise EvaluationError("transport solve did not converge")
            return volume, report, False, "transport solve did not converge"
        return volume, report, True, ""

    # Initial design: evaluate, then freeze objective statistics before
    # any objective value is computed, so init and loop share one scale.
    design = lhs(cfg.n_init, space.dim, cfg.seed)
    init_samples = []
    for k, x in enumerate(design):
        t0 = time.perf_counter()
        z = space.unscale(x)
        volume, report, ok, message = evaluate(z)
        records.append(
            TraceRecord(
                index=k,
                phase="init",
                iteration=None,
                alpha=None,
                z=z,
                objective=None,
                best_so_far=None,
                accepted=ok,
                report=report,
                message=message,
                wall_time=time.perf_counter() - t0,
            )
        )
        if ok:
            init_samples.append((z, volume, report, k, x))

    if len(init_samples) < 2:
        raise EvaluationError(
            "fewer than two initial design points evaluated successfully"
        )

    objective.prepare([(z, v, r) for z, v, r, _, _ in init_samples])
    for z, volume, report, k, x in init_samples:
        y = float(objective.value(z, volume, report))
        if best is None or y > best:
            best = y
            trace.best_volume = volume
        records[k].objective = y
        records[k].best_so_far = best
        x_train.append(np.asarray(x, dtype=np.float64))
        y_train.append(y)

    trace.objective_spec = getattr(objective, "spec", None)

    # Main loop: refit (warm start), propose, evaluate, augment.
    warm = None
    for i in range(cfg.i_tot):
        t0 = time.perf_counter()
        x_arr = np.vstack(x_train)
        y_arr = -np.asarray(y_train, dtype=np.float64)  # surrogate minimises
        model = gp.fit(
            x_arr,
            y_arr,
            starts=cfg.fit_starts,
            ard=cfg.ard,
            seed=0,
            warm_start=warm,
        )
        warm = model.theta
        fit_nll = gp.nll(model.x_train, model.y_centered, model.theta)
        alpha = alpha_schedule(i, cfg.i_tot)
        acq = minimise_acquisition(
            model,
            alpha,
            space,
            starts=cfg.acq_starts,
            seed=cfg.seed * 1_000_003 + i + 1,
        )
        z_star = acq.z
        volume, report, ok, message = evaluate(z_star)
        y = None
        if ok:
            y = float(objective.value(z_star, volume, report))
            if best is None or y > best:
                best = y
                trace.best_volume = volume
            x_train.append(space.scale(z_star))
            y_train.append(y)
        records.append(
            TraceRecord(
                index=len(records),
                phase="bo",
                iteration=i,
                alpha=alpha,
                z=z_star,
                objective=y,
                best_so_far=best,
                accepted=ok,
                report=report,
                nll=float(fit_nll),
                acq_value=acq.value,
                acq_improved=acq.improved,
                message=message,
                wall_time=time.perf_counter() - t0,
            )
        )
        if snapshot_every and snapshot_fn and (i + 1) % snapshot_every == 0:
            snapshot_fn(trace, i)
        if cfg.early_stop_patience and _stalled(records, cfg):
            break

    return trace


def _stalled(records: list[TraceRecord], cfg: LoopConfig) -> bool:
    """True when best-so-far improved by no more than early_stop_tol
    over the last early_stop_patience loop records."""
    loop_recs = [r for r in records if r.phase == "bo"]
    if len(loop_recs) <= cfg.early_stop_patience:
        return False
    recent = loop_recs[-cfg.early_stop_patience :]
    before = loop_recs[-cfg.early_stop_patience - 1]
    if before.best_so_far is None:
        return False
    gain = max(
        (r.best_so_far or -np.inf) for r in recent
    ) - before.best_so_far
    return gain <= cfg.early_stop_tol
