"""Run configuration: a sectioned key=value file describing one campaign.

The format is diff-able plain text parsed with configparser.  Floats are
written with repr so every numeric field round-trips exactly; a run is
reproducible from its persisted configuration alone.
"""

from __future__ import annotations

import configparser
import shlex
from dataclasses import dataclass, field, fields
from pathlib import Path

from .bo import DesignSpace, LoopConfig
from .errors import ConfigError
from .genlat import LATENT_HI, LATENT_LO, GeneratorConfig
from .objectives import ObjectiveSpec
from .props import SolverConfig

_ENDPOINT_MODES = ("builtin", "external")


@dataclass(frozen=True)
class RunConfig:
    """Everything needed to reproduce a campaign, plus output plumbing."""

    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    solver: SolverConfig = field(default_factory=SolverConfig)
    objective: ObjectiveSpec = field(default_factory=ObjectiveSpec)
    lo: float = LATENT_LO
    hi: float = LATENT_HI
    n_init: int = 50
    i_tot: int = 500
    seed: int = 0
    acq_starts: int = 5
    fit_starts: int = 5
    ard: bool = False
    fail_hard: bool = False
    early_stop_patience: int = 0
    early_stop_tol: float = 0.0
    snapshot_every: int = 50
    threads: int = 1
    out_dir: str = "runs/run"
    endpoint_mode: str = "builtin"
    external_command: tuple[str, ...] = ()

    def __post_init__(self):
        if self.endpoint_mode not in _ENDPOINT_MODES:
            raise ConfigError(
                f"endpoint mode must be one of {_ENDPOINT_MODES}, "
                f"got {self.endpoint_mode!r}"
            )
        if self.endpoint_mode == "external" and not self.external_command:
            raise ConfigError("external endpoint needs a command")
        if self.threads < 1:
            raise ConfigError("threads must be at least 1")
        if self.snapshot_every < 0:
            raise ConfigError("snapshot interval must be non-negative")

    def design_space(self) -> DesignSpace:
        return DesignSpace(
            dim=self.generator.latent_length, lo=self.lo, hi=self.hi
        )

    def loop_config(self) -> LoopConfig:
        return LoopConfig(
            space=self.design_space(),
            n_init=self.n_init,
            i_tot=self.i_tot,
            seed=self.seed,
            solver=self.solver,
            threads=self.threads,
            acq_starts=self.acq_starts,
            fit_starts=self.fit_starts,
            ard=self.ard,
            fail_hard=self.fail_hard,
            early_stop_patience=self.early_stop_patience,
            early_stop_tol=self.early_stop_tol,
        )


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, int):
        return str(value)
    if isinstance(value, tuple):
        return ",".join(_fmt(v) for v in value)
    return str(value)


def _parse_bool(text: str, key: str) -> bool:
    low = text.strip().lower()
    if low in ("true", "1", "yes", "on"):
        return True
    if low in ("false", "0", "no", "off"):
        return False
    raise ConfigError(f"{key}: expected a boolean, got {text!r}")


def _parse_tuple(text: str, cast, key: str) -> tuple:
    try:
        return tuple(cast(p.strip()) for p in text.split(",") if p.strip())
    except ValueError as exc:
        raise ConfigError(f"{key}: {exc}") from exc


def save_config(cfg: RunConfig, path) -> None:
    gen, sol, obj = cfg.generator, cfg.solver, cfg.objective
    sections: dict[str, dict[str, str]] = {
        "generator": {
            "output_dims": _fmt(gen.output_dims),
            "seed": _fmt(gen.seed),
            "corr_lengths": _fmt(gen.corr_lengths),
            "alpha": _fmt(gen.alpha),
            "beta": _fmt(gen.beta),
            "gamma": _fmt(gen.gamma),
            "sigma_smooth": _fmt(gen.sigma_smooth),
            "voxel_size": _fmt(gen.voxel_size),
        },
        "solver": {
            "max_iterations": _fmt(sol.max_iterations),
            "tolerance": _fmt(sol.tolerance),
            "omega": _fmt(sol.omega),
            "checkpoint_interval": _fmt(sol.checkpoint_interval),
        },
        "space": {"lo": _fmt(cfg.lo), "hi": _fmt(cfg.hi)},
        "objective": {
            "kind": obj.kind,
            "gamma": _fmt(obj.gamma),
            "axis": obj.axis,
            "batch_size": _fmt(obj.batch_size),
            "graded_phase": _fmt(obj.graded_phase),
            "graded_axis": obj.graded_axis,
            "profile_lo": _fmt(obj.profile_lo),
            "profile_hi": _fmt(obj.profile_hi),
        },
        "loop": {
            "n_init": _fmt(cfg.n_init),
            "i_tot": _fmt(cfg.i_tot),
            "seed": _fmt(cfg.seed),
            "acq_starts": _fmt(cfg.acq_starts),
            "fit_starts": _fmt(cfg.fit_starts),
            "ard": _fmt(cfg.ard),
            "fail_hard": _fmt(cfg.fail_hard),
            "early_stop_patience": _fmt(cfg.early_stop_patience),
            "early_stop_tol": _fmt(cfg.early_stop_tol),
            "snapshot_every": _fmt(cfg.snapshot_every),
            "threads": _fmt(cfg.threads),
        },
        "run": {
            "out_dir": cfg.out_dir,
            "endpoint_mode": cfg.endpoint_mode,
        },
    }
    for name in ("ssa_range", "drel_range", "phi_mean", "phi_range"):
        value = getattr(obj, name)
        if value is not None:
            sections["objective"][name] = _fmt(value)
    if obj.penalty_means is not None:
        sections["objective"]["penalty_means"] = _fmt(obj.penalty_means)
    if cfg.external_command:
        sections["run"]["external_command"] = shlex.join(cfg.external_command)

    lines = []
    for section, pairs in sections.items():
        lines.append(f"[{section}]")
        lines.extend(f"{key} = {value}" for key, value in pairs.items())
        lines.append("")
    Path(path).write_text("\n".join(lines))


_KNOWN_KEYS = {
    "generator": {
        "output_dims", "seed", "corr_lengths", "alpha", "beta", "gamma",
        "sigma_smooth", "voxel_size",
    },
    "solver": {"max_iterations", "tolerance", "omega", "checkpoint_interval"},
    "space": {"lo", "hi"},
    "objective": {
        "kind", "gamma", "axis", "batch_size", "graded_phase", "graded_axis",
        "profile_lo", "profile_hi", "ssa_range", "drel_range", "phi_mean",
        "phi_range", "penalty_means",
    },
    "loop": {
        "n_init", "i_tot", "seed", "acq_starts", "fit_starts", "ard",
        "fail_hard", "early_stop_patience", "early_stop_tol",
        "snapshot_every", "threads",
    },
    "run": {"out_dir", "endpoint_mode", "external_command"},
}


def load_config(path) -> RunConfig:
    """Parse a configuration file; unknown sections or keys are errors."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"configuration file not found: {path}")
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read_string(path.read_text())
    except (configparser.Error, UnicodeDecodeError) as exc:
        raise ConfigError(f"{path}: {exc}") from exc

    for section in parser.sections():
        if section not in _KNOWN_KEYS:
            raise ConfigError(f"{path}: unknown section [{section}]")
        for key in parser[section]:
            if key not in _KNOWN_KEYS[section]:
                raise ConfigError(
                    f"{path}: unknown key {key!r} in section [{section}]"
                )

    def get(section, key, default, cast):
        if not parser.has_option(section, key):
            return default
        raw = parser.get(section, key)
        full = f"[{section}] {key}"
        if cast is bool:
            return _parse_bool(raw, full)
        try:
            return cast(raw)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{path}: {full}: {exc}") from exc

    def get_tuple(section, key, default, cast):
        if not parser.has_option(section, key):
            return default
        return _parse_tuple(parser.get(section, key), cast, f"[{section}] {key}")

    try:
        generator = GeneratorConfig(
            output_dims=get_tuple("generator", "output_dims", (64, 64, 64), int),
            seed=get("generator", "seed", 42, int),
            corr_lengths=get_tuple(
                "generator", "corr_lengths", (5.0, 8.0, 3.0), float
            ),
            alpha=get_tuple("generator", "alpha", GeneratorConfig().alpha, float),
            beta=get_tuple("generator", "beta", GeneratorConfig().beta, float),
            gamma=get_tuple("generator", "gamma", GeneratorConfig().gamma, float),
            sigma_smooth=get("generator", "sigma_smooth", 2.0, float),
            voxel_size=get("generator", "voxel_size", 0.4, float),
        )
        solver = SolverConfig(
            max_iterations=get("solver", "max_iterations", 20000, int),
            tolerance=get("solver", "tolerance", 1e-4, float),
            omega=get("solver", "omega", 1.9, float),
            checkpoint_interval=get("solver", "checkpoint_interval", 100, int),
        )
        objective = ObjectiveSpec(
            kind=get("objective", "kind", "ssa", str),
            gamma=get("objective", "gamma", 0.5, float),
            axis=get("objective", "axis", "x", str),
            batch_size=get("objective", "batch_size", 1, int),
            ssa_range=get("objective", "ssa_range", None, float),
            drel_range=get("objective", "drel_range", None, float),
            phi_mean=get("objective", "phi_mean", None, float),
            phi_range=get("objective", "phi_range", None, float),
            penalty_means=get_tuple("objective", "penalty_means", None, float),
            graded_phase=get("objective", "graded_phase", 0, int),
            graded_axis=get("objective", "graded_axis", "z", str),
            profile_lo=get("objective", "profile_lo", 0.2, float),
            profile_hi=get("objective", "profile_hi", 0.6, float),
        )
        command_text = get("run", "external_command", "", str)
        return RunConfig(
            generator=generator,
            solver=solver,
            objective=objective,
            lo=get("space", "lo", LATENT_LO, float),
            hi=get("space", "hi", LATENT_HI, float),
            n_init=get("loop", "n_init", 50, int),
            i_tot=get("loop", "i_tot", 500, int),
            seed=get("loop", "seed", 0, int),
            acq_starts=get("loop", "acq_starts", 5, int),
            fit_starts=get("loop", "fit_starts", 5, int),
            ard=get("loop", "ard", False, bool),
            fail_hard=get("loop", "fail_hard", False, bool),
            early_stop_patience=get("loop", "early_stop_patience", 0, int),
            early_stop_tol=get("loop", "early_stop_tol", 0.0, float),
            snapshot_every=get("loop", "snapshot_every", 50, int),
            threads=get("loop", "threads", 1, int),
            out_dir=get("run", "out_dir", "runs/run", str),
            endpoint_mode=get("run", "endpoint_mode", "builtin", str),
            external_command=tuple(shlex.split(command_text)),
        )
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def override(cfg: RunConfig, **changes) -> RunConfig:
    """Return cfg with the given fields replaced (None values ignored)."""
    active = {k: v for k, v in changes.items() if v is not None}
    if not active:
        return cfg
    names = {f.name for f in fields(RunConfig)}
    unknown = set(active) - names
    if unknown:
        raise ConfigError(f"unknown config overrides: {sorted(unknown)}")
    from dataclasses import replace

    return replace(cfg, **active)
