"""Objective catalogue mapping property reports to scalar targets.

Every objective is a maximisation target.  Normalisation ranges and
constraint centres are frozen from the statistics of the initial design
once per run and never drift afterwards, which keeps the target
stationary for the surrogate model.  Penalty objectives accept a batch
of reports; with a single report the RMSE penalty reduces to the
absolute deviation.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from math import sqrt

import numpy as np

from .errors import ConfigError
from .props import PropertyReport
from .voxel import Microstructure, Phase, slice_profile

KINDS = (
    "ssa",
    "drel",
    "drel_axis",
    "weighted_ssa_drel",
    "ssa_const_vf",
    "drel_const_porosity",
    "drel_axis_const_others",
    "graded_profile",
)

_AXES = ("x", "y", "z")


@dataclass(frozen=True)
class ObjectiveSpec:
    """Choice of objective plus its frozen statistics.

    gamma weighs the SSA term of the weighted objective; the transport
    weight is beta = 1 - gamma by construction.  Range and mean fields
    default to None and are filled by `freeze_from_design`.
    """

    kind: str = "ssa"
    gamma: float = 0.5
    axis: str = "x"
    batch_size: int = 1
    ssa_range: float | None = None
    drel_range: float | None = None
    phi_mean: float | None = None
    phi_range: float | None = None
    penalty_means: tuple[float, float] | None = None  # the two non-target axes
    graded_phase: int = int(Phase.PORE)
    graded_axis: str = "z"
    profile_lo: float = 0.2
    profile_hi: float = 0.6

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown objective kind {self.kind!r}")
        if not 0.0 <= self.gamma <= 1.0:
            raise ConfigError(f"gamma must lie in [0, 1], got {self.gamma}")
        if self.axis not in _AXES or self.graded_axis not in _AXES:
            raise ConfigError("axis must be one of x, y, z")
        if self.batch_size < 1:
            raise ConfigError("batch size must be at least 1")
        for name in ("ssa_range", "drel_range", "phi_range"):
            value = getattr(self, name)
            if value is not None and value <= 0:
                raise ConfigError(f"{name} must be positive, got {value}")

    @property
    def beta(self) -> float:
        return 1.0 - self.gamma

    def is_frozen(self) -> bool:
        """True once every statistic this kind relies on is set."""
        needs = {
            "weighted_ssa_drel": ("ssa_range", "drel_range"),
            "ssa_const_vf": ("ssa_range", "phi_mean", "phi_range"),
            "drel_const_porosity": ("drel_range", "phi_mean", "phi_range"),
            "drel_axis_const_others": ("penalty_means",),
        }.get(self.kind, ())
        return all(getattr(self, name) is not None for name in needs)


def _rmse(values, centre: float) -> float:
    arr = np.asarray(values, dtype=np.float64)
    return float(np.sqrt(np.mean((arr - centre) ** 2)))


def _mean_drel(report: PropertyReport) -> float:
    return (report.d_rel_x + report.d_rel_y + report.d_rel_z) / 3.0


def eval_ssa(report: PropertyReport) -> float:
    return report.ssa_nmc


def eval_drel(report: PropertyReport) -> float:
    """Relative diffusivity averaged over the three axes."""
    return _mean_drel(report)


def eval_drel_axis(report: PropertyReport, axis: str) -> float:
    return report.d_rel(axis)


def eval_weighted(report: PropertyReport, spec: ObjectiveSpec) -> float:
    """beta * D_rel / D_rel_range + gamma * SSA / SSA_range."""
    _require(spec, "ssa_range", "drel_range")
    return (
        spec.beta * _mean_drel(report) / spec.drel_range
        + spec.gamma * report.ssa_nmc / spec.ssa_range
    )


def eval_constrained_vf(reports, spec: ObjectiveSpec) -> float:
    """Normalised SSA minus the RMSE of the NMC fraction about its
    frozen mean, normalised by the frozen fraction range."""
    _require(spec, "ssa_range", "phi_mean", "phi_range")
    reports = _as_batch(reports)
    ssa_term = float(np.mean([r.ssa_nmc for r in reports])) / spec.ssa_range
    penalty = _rmse([r.phi_nmc for r in reports], spec.phi_mean) / spec.phi_range
    return ssa_term - penalty


def eval_constrained_porosity(reports, spec: ObjectiveSpec) -> float:
    """Normalised mean D_rel minus the RMSE of porosity about its
    frozen mean."""
    _require(spec, "drel_range", "phi_mean", "phi_range")
    reports = _as_batch(reports)
    drel_term = float(np.mean([_mean_drel(r) for r in reports])) / spec.drel_range
    penalty = _rmse([r.phi_pore for r in reports], spec.phi_mean) / spec.phi_range
    return drel_term - penalty


def eval_drel_axis_constrained(reports, spec: ObjectiveSpec) -> float:
    """Target-axis D_rel minus RMSE penalties holding the other two axes
    at their frozen means."""
    _require(spec, "penalty_means")
    reports = _as_batch(reports)
    target = float(np.mean([r.d_rel(spec.axis) for r in reports]))
    others = [a for a in _AXES if a != spec.axis]
    value = target
    for axis, centre in zip(others, spec.penalty_means):
        value -= _rmse([r.d_rel(axis) for r in reports], centre)
    return value


def graded_target(spec: ObjectiveSpec, n_slices: int) -> np.ndarray:
    return np.linspace(spec.profile_lo, spec.profile_hi, n_slices)


def eval_graded(m: Microstructure, spec: ObjectiveSpec) -> float:
    """Negated RMSE between the phase slice profile and a linear target,
    so a perfect match scores 0 and is maximal."""
    profile = slice_profile(m, Phase(spec.graded_phase), spec.graded_axis)
    target = graded_target(spec, profile.size)
    return -float(np.sqrt(np.mean((profile - target) ** 2)))


def _as_batch(reports):
    if isinstance(reports, PropertyReport):
        return [reports]
    reports = list(reports)
    if not reports:
        raise ValueError("objective needs at least one report")
    return reports


def _require(spec: ObjectiveSpec, *names: str) -> None:
    missing = [n for n in names if getattr(spec, n) is None]
    if missing:
        raise ConfigError(
            f"objective {spec.kind!r} used before freezing: missing "
            + ", ".join(missing)
        )


def evaluate_objective(
    spec: ObjectiveSpec,
    volume: Microstructure,
    report,
) -> float:
    """Dispatch a single evaluation (or a batch for penalty kinds)."""
    if spec.kind == "ssa":
        return eval_ssa(_one(report))
    if spec.kind == "drel":
        return eval_drel(_one(report))
    if spec.kind == "drel_axis":
        return eval_drel_axis(_one(report), spec.axis)
    if spec.kind == "weighted_ssa_drel":
        return eval_weighted(_one(report), spec)
    if spec.kind == "ssa_const_vf":
        return eval_constrained_vf(report, spec)
    if spec.kind == "drel_const_porosity":
        return eval_constrained_porosity(report, spec)
    if spec.kind == "drel_axis_const_others":
        return eval_drel_axis_constrained(report, spec)
    if spec.kind == "graded_profile":
        return eval_graded(volume, spec)
    raise ConfigError(f"unknown objective kind {spec.kind!r}")


def _one(report) -> PropertyReport:
    if isinstance(report, PropertyReport):
        return report
    batch = list(report)
    if len(batch) != 1:
        raise ValueError("this objective takes exactly one report")
    return batch[0]


def freeze_from_design(spec: ObjectiveSpec, reports) -> ObjectiveSpec:
    """Fill the spec's unset ranges and means from initial-design
    statistics.  Already-set fields are kept; a degenerate (zero-width)
    range raises ConfigError."""
    reports = _as_batch(reports)
    updates: dict[str, object] = {}

    def span(values, name):
        width = float(np.max(values) - np.min(values))
        if width <= 0:
            raise ConfigError(
                f"cannot freeze {name}: initial design spans zero width"
            )
        return width

    if spec.kind in ("weighted_ssa_drel", "ssa_const_vf") and spec.ssa_range is None:
        updates["ssa_range"] = span([r.ssa_nmc for r in reports], "ssa_range")
    if (
        spec.kind in ("weighted_ssa_drel", "drel_const_porosity")
        and spec.drel_range is None
    ):
        updates["drel_range"] = span(
            [_mean_drel(r) for r in reports], "drel_range"
        )
    if spec.kind == "ssa_const_vf":
        values = [r.phi_nmc for r in reports]
        if spec.phi_mean is None:
            updates["phi_mean"] = float(np.mean(values))
        if spec.phi_range is None:
            updates["phi_range"] = span(values, "phi_range")
    if spec.kind == "drel_const_porosity":
        values = [r.phi_pore for r in reports]
        if spec.phi_mean is None:
            updates["phi_mean"] = float(np.mean(values))
        if spec.phi_range is None:
            updates["phi_range"] = span(values, "phi_range")
    if spec.kind == "drel_axis_const_others" and spec.penalty_means is None:
        others = [a for a in _AXES if a != spec.axis]
        updates["penalty_means"] = tuple(
            float(np.mean([r.d_rel(a) for r in reports])) for a in others
        )
    return replace(spec, **updates) if updates else spec
