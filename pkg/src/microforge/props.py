"""Physics property engine for three-phase voxel volumes.

Computes specific surface area by voxel-face counting, directional
relative diffusivity and tortuosity of a conducting phase by a
steady-state finite-volume diffusion solve, and per-particle geometry
statistics under 6-connectivity.

The diffusion solve applies Dirichlet concentrations C=1 / C=0 on the
inlet and outlet voxel planes of the chosen axis (restricted to
conducting voxels), zero flux on lateral walls and at interfaces with
the other phases, and iterates red-black successive over-relaxation
until both the inlet/outlet flux imbalance and the flux drift between
checkpoints fall below tolerance.  With the intrinsic diffusivity
normalised to 1 and plane spacing of one voxel,

    D_rel = mean(flux_in, flux_out) * (n_axis - 1) / (n1 * n2)

so a fully conducting cube gives exactly 1 and a straight channel
through half the cross-section gives exactly 1/2.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from math import pi

import numpy as np
from scipy import ndimage

from .voxel import Microstructure, Phase, _axis_index, volume_fractions

_TINY = 1e-300

# solve axis first, remaining axes in a fixed cyclic order so that
# relabeling two axes of the volume permutes the working array without
# changing any arithmetic
_AXIS_ORDER = {0: (0, 1, 2), 1: (1, 0, 2), 2: (2, 0, 1)}

_STRUCT_6 = ndimage.generate_binary_structure(3, 1)


@dataclass(frozen=True)
class SolverConfig:
    """Iteration budget and convergence control for the diffusion solve."""

    max_iterations: int = 20000
    tolerance: float = 1e-4
    omega: float = 1.9
    checkpoint_interval: int = 100

    def __post_init__(self):
        if not 1.0 < self.omega < 2.0:
            raise ValueError(f"omega must lie in (1, 2), got {self.omega}")
        if self.tolerance <= 0:
            raise ValueError("tolerance must be positive")
        if self.max_iterations < 1 or self.checkpoint_interval < 1:
            raise ValueError("iteration counts must be positive")


@dataclass(frozen=True)
class SolveDiagnostics:
    """Outcome of one directional diffusion solve."""

    iterations: int
    residual: float
    converged: bool
    flux_in: float = 0.0
    flux_out: float = 0.0


@dataclass(frozen=True)
class ParticleStats:
    """Geometry of one connected component."""

    label: int
    voxel_count: int
    volume: float  # µm³
    surface_area: float  # µm², exposed faces including domain boundary
    equivalent_diameter: float  # µm, diameter of the equal-volume sphere
    sphericity: float
    touches_boundary: bool


def ssa_nmc(m: Microstructure) -> float:
    """Interfacial area between NMC and pore per unit total volume, in 1/µm.

    Counts voxel-face pairs where one side is NMC and the 6-neighbour is
    pore; faces against the carbon-binder phase or the domain boundary do
    not contribute.
    """
    labels = m.labels
    faces = 0
    for axis in range(3):
        a = _face_slab(labels, axis, 0)
        b = _face_slab(labels, axis, 1)
        faces += int(np.count_nonzero(
            ((a == Phase.NMC) & (b == Phase.PORE))
            | ((a == Phase.PORE) & (b == Phase.NMC))
        ))
    h = m.voxel_size
    return faces * h * h / (m.n_voxels * h ** 3)


def _face_slab(arr: np.ndarray, axis: int, side: int) -> np.ndarray:
    sl = [slice(None)] * 3
    sl[axis] = slice(None, -1) if side == 0 else slice(1, None)
    return arr[tuple(sl)]


def relative_diffusivity(
    m: Microstructure,
    phase: Phase,
    axis,
    cfg: SolverConfig | None = None,
) -> tuple[float, float, SolveDiagnostics]:
    """Directional relative diffusivity and tortuosity of `phase`.

    Returns (D_rel, tau, diagnostics).  D_rel is the steady flux through
    the structure relative to a fully conducting block; tau is the
    global volume fraction of the phase divided by D_rel, reported as
    +inf when no conducting path spans the axis.  Non-convergence within
    the iteration budget is reported through diagnostics.converged, not
    raised; the caller may retry with a larger budget.
    """
    if cfg is None:
        cfg = SolverConfig()
    ax = _axis_index(axis)
    cond = m.phase_mask(phase).transpose(_AXIS_ORDER[ax])
    phi = float(np.count_nonzero(m.labels == int(phase))) / m.n_voxels

    cond = _spanning_mask(cond)
    if cond is None:
        return 0.0, float("inf"), SolveDiagnostics(0, 0.0, True)

    flux_in, flux_out, diag = _solve_axis0(cond, cfg)
    n0, n1, n2 = cond.shape
    d_rel = 0.5 * (flux_in + flux_out) * (n0 - 1) / (n1 * n2)
    tau = phi / d_rel if d_rel > 0 else float("inf")
    return d_rel, tau, diag


def _spanning_mask(cond: np.ndarray) -> np.ndarray | None:
    """Restrict `cond` to components touching both end planes of axis 0.

    Dead-end and isolated regions carry no steady flux, so removing them
    leaves D_rel unchanged while tightening convergence.  Returns None
    when nothing spans.
    """
    if not cond[0].any() or not cond[-1].any():
        return None
    lab, _ = ndimage.label(cond, structure=_STRUCT_6)
    spanning = np.intersect1d(lab[0][cond[0]], lab[-1][cond[-1]])
    if spanning.size == 0:
        return None
    return np.isin(lab, spanning)


def _solve_axis0(cond: np.ndarray, cfg: SolverConfig):
    """Red-black SOR sweep of the Laplace problem along axis 0 of `cond`."""
    n0, n1, n2 = cond.shape
    c = np.where(cond, 1.0 - np.arange(n0)[:, None, None] / max(n0 - 1, 1), 0.0)

    # conducting-neighbour count per voxel; zero-flux walls appear as
    # absent neighbours
    pad_mask = np.pad(cond, 1).astype(np.float64)
    nbrs = _six_neighbour_sum(pad_mask)

    parity = (
        np.arange(n0)[:, None, None]
        + np.arange(n1)[None, :, None]
        + np.arange(n2)[None, None, :]
    ) % 2
    interior = cond.copy()
    interior[0] = False
    interior[-1] = False
    masks = [interior & (parity == 0), interior & (parity == 1)]
    inv_nbrs = [np.where(mask, 1.0 / np.maximum(nbrs, 1.0), 0.0) for mask in masks]

    # the potential lives inside a zero-padded array so neighbour reads
    # are plain shifted views; updates happen in place, checkerboard
    # colour by colour, each colour split into its four regular
    # sub-lattices so every update is strided slicing
    padded = np.zeros((n0 + 2, n1 + 2, n2 + 2))
    core = (slice(1, -1),) * 3
    c = padded[core]
    c[...] = np.where(
        cond, 1.0 - np.arange(n0)[:, None, None] / max(n0 - 1, 1), 0.0
    )

    # neighbour term order matches _six_neighbour_sum
    shifted = (
        padded[:-2, 1:-1, 1:-1],
        padded[2:, 1:-1, 1:-1],
        padded[1:-1, :-2, 1:-1],
        padded[1:-1, 2:, 1:-1],
        padded[1:-1, 1:-1, :-2],
        padded[1:-1, 1:-1, 2:],
    )

    omega = cfg.omega
    colour_plans = []
    for colour, (mask, inv) in enumerate(zip(masks, inv_nbrs)):
        plan = []
        for i0 in (0, 1):
            for j0 in (0, 1):
                for k0 in (0, 1):
                    if (i0 + j0 + k0) % 2 != colour:
                        continue
                    sub = (
                        slice(2 if i0 == 0 else 1, n0 - 1, 2),
                        slice(j0, None, 2),
                        slice(k0, None, 2),
                    )
                    wfac = np.where(mask[sub], omega, 0.0)
                    if not wfac.any():
                        continue
                    plan.append(
                        (sub, np.ascontiguousarray(wfac),
                         np.ascontiguousarray(inv[sub]))
                    )
        colour_plans.append(plan)

    inlet_links = cond[0] & cond[1]
    outlet_links = cond[-2] & cond[-1]

    def fluxes():
        fin = float(np.sum(c[0][inlet_links] - c[1][inlet_links]))
        fout = float(np.sum(c[-2][outlet_links] - c[-1][outlet_links]))
        return fin, fout

    flux_in, flux_out = fluxes()
    prev_mean = 0.5 * (flux_in + flux_out)
    residual = float("inf")

    sweeps = 0
    while sweeps < cfg.max_iterations:
        block = min(cfg.checkpoint_interval, cfg.max_iterations - sweeps)
        for _ in range(block):
            for plan in colour_plans:
                for sub, wfac, inv in plan:
                    s = (
                        shifted[0][sub]
                        + shifted[1][sub]
                        + shifted[2][sub]
                        + shifted[3][sub]
                        + shifted[4][sub]
                        + shifted[5][sub]
                    )
                    tgt = c[sub]
                    tgt += wfac * (s * inv - tgt)
        sweeps += block

        flux_in, flux_out = fluxes()
        mean = 0.5 * (flux_in + flux_out)
        imbalance = abs(flux_in - flux_out) / max(abs(flux_in), abs(flux_out), _TINY)
        drift = abs(mean - prev_mean) / max(abs(mean), _TINY)
        prev_mean = mean
        residual = max(imbalance, drift)
        if residual < cfg.tolerance:
            return flux_in, flux_out, SolveDiagnostics(
                sweeps, residual, True, flux_in, flux_out
            )

    return flux_in, flux_out, SolveDiagnostics(
        sweeps, residual, False, flux_in, flux_out
    )


def _six_neighbour_sum(padded: np.ndarray) -> np.ndarray:
    return (
        padded[:-2, 1:-1, 1:-1]
        + padded[2:, 1:-1, 1:-1]
        + padded[1:-1, :-2, 1:-1]
        + padded[1:-1, 2:, 1:-1]
        + padded[1:-1, 1:-1, :-2]
        + padded[1:-1, 1:-1, 2:]
    )


def particle_metrics(
    m: Microstructure, phase: Phase
) -> tuple[float | None, float | None, list[ParticleStats]]:
    """Per-particle geometry for the connected components of `phase`.

    Components are 6-connected.  Surface area counts every exposed face,
    including faces on the domain boundary, so an isolated cube keeps the
    analytic cube sphericity (pi/6)^(1/3) wherever it sits.  Means are
    volume-weighted; an empty phase yields (None, None, []).
    """
    mask = m.phase_mask(phase)
    lab, n = ndimage.label(mask, structure=_STRUCT_6)
    if n == 0:
        return None, None, []

    voxel_counts = np.bincount(lab.ravel(), minlength=n + 1)[1:]
    face_counts = _exposed_face_counts(lab, n)
    boundary = _boundary_labels(lab, n)

    h = m.voxel_size
    particles = []
    for idx in range(n):
        v = voxel_counts[idx] * h ** 3
        a = face_counts[idx] * h ** 2
        d_eq = (6.0 * v / pi) ** (1.0 / 3.0)
        psi = pi ** (1.0 / 3.0) * (6.0 * v) ** (2.0 / 3.0) / a
        particles.append(
            ParticleStats(
                label=idx + 1,
                voxel_count=int(voxel_counts[idx]),
                volume=v,
                surface_area=a,
                equivalent_diameter=d_eq,
                sphericity=psi,
                touches_boundary=bool(boundary[idx]),
            )
        )

    volumes = np.array([p.volume for p in particles])
    weights = volumes / volumes.sum()
    d_eq_mean = float(np.sum(weights * [p.equivalent_diameter for p in particles]))
    psi_mean = float(np.sum(weights * [p.sphericity for p in particles]))
    return d_eq_mean, psi_mean, particles


def _exposed_face_counts(lab: np.ndarray, n: int) -> np.ndarray:
    counts = np.zeros(n + 1, dtype=np.int64)
    for axis in range(3):
        a = _face_slab(lab, axis, 0)
        b = _face_slab(lab, axis, 1)
        diff = a != b
        counts += np.bincount(a[diff & (a > 0)], minlength=n + 1)
        counts += np.bincount(b[diff & (b > 0)], minlength=n + 1)
        first = lab[_boundary_slab(lab.shape, axis, 0)]
        last = lab[_boundary_slab(lab.shape, axis, 1)]
        counts += np.bincount(first[first > 0], minlength=n + 1)
        counts += np.bincount(last[last > 0], minlength=n + 1)
    return counts[1:]


def _boundary_slab(shape, axis: int, side: int):
    sl = [slice(None)] * 3
    sl[axis] = 0 if side == 0 else shape[axis] - 1
    return tuple(sl)


def _boundary_labels(lab: np.ndarray, n: int) -> np.ndarray:
    touched = np.zeros(n + 1, dtype=bool)
    for axis in range(3):
        for side in (0, 1):
            slab = lab[_boundary_slab(lab.shape, axis, side)]
            touched[np.unique(slab)] = True
    return touched[1:]


@dataclass(frozen=True)
class PropertyReport:
    """Flat property record for one microstructure.

    CSV column order (see `csv_header`): phi_pore, phi_nmc, phi_cbd,
    ssa_nmc, d_rel_x, d_rel_y, d_rel_z, tau_x, tau_y, tau_z,
    particle_d_eq_mean, particle_sphericity_mean, then per-axis solver
    iterations and residuals.  Infinite tortuosity serialises as "inf";
    absent particle means serialise as empty fields.
    """

    phi_pore: float
    phi_nmc: float
    phi_cbd: float
    ssa_nmc: float
    d_rel_x: float
    d_rel_y: float
    d_rel_z: float
    tau_x: float
    tau_y: float
    tau_z: float
    particle_d_eq_mean: float | None
    particle_sphericity_mean: float | None
    diagnostics: dict[str, SolveDiagnostics] = field(default_factory=dict)

    CSV_COLUMNS = (
        "phi_pore", "phi_nmc", "phi_cbd", "ssa_nmc",
        "d_rel_x", "d_rel_y", "d_rel_z",
        "tau_x", "tau_y", "tau_z",
        "particle_d_eq_mean", "particle_sphericity_mean",
        "iterations_x", "iterations_y", "iterations_z",
        "residual_x", "residual_y", "residual_z",
    )

    def d_rel(self, axis) -> float:
        return (self.d_rel_x, self.d_rel_y, self.d_rel_z)[_axis_index(axis)]

    def tau(self, axis) -> float:
        return (self.tau_x, self.tau_y, self.tau_z)[_axis_index(axis)]

    @property
    def converged(self) -> bool:
        return all(d.converged for d in self.diagnostics.values())

    @classmethod
    def csv_header(cls) -> str:
        return ",".join(cls.CSV_COLUMNS)

    def to_csv_row(self) -> str:
        def num(x):
            if x is None:
                return ""
            return repr(float(x))

        cells = [
            num(self.phi_pore), num(self.phi_nmc), num(self.phi_cbd),
            num(self.ssa_nmc),
            num(self.d_rel_x), num(self.d_rel_y), num(self.d_rel_z),
            num(self.tau_x), num(self.tau_y), num(self.tau_z),
            num(self.particle_d_eq_mean), num(self.particle_sphericity_mean),
        ]
        for name in ("x", "y", "z"):
            diag = self.diagnostics.get(name)
            cells.append(str(diag.iterations) if diag else "")
        for name in ("x", "y", "z"):
            diag = self.diagnostics.get(name)
            cells.append(repr(diag.residual) if diag else "")
        return ",".join(cells)


def evaluate_all(
    m: Microstructure,
    cfg: SolverConfig | None = None,
    threads: int = 1,
) -> PropertyReport:
    """Full property report: fractions, SSA, pore transport on all axes,
    NMC particle statistics.

    The three directional solves are independent; `threads` > 1 runs them
    concurrently with identical results.  Non-converged solves are
    flagged in diagnostics rather than raised.
    """
    if cfg is None:
        cfg = SolverConfig()
    vf = volume_fractions(m)

    def solve(axis):
        return relative_diffusivity(m, Phase.PORE, axis, cfg)

    axes = ("x", "y", "z")
    if threads > 1:
        with ThreadPoolExecutor(max_workers=min(threads, 3)) as pool:
            results = list(pool.map(solve, axes))
    else:
        results = [solve(a) for a in axes]

    d_eq_mean, psi_mean, _ = particle_metrics(m, Phase.NMC)
    diagnostics = {a: r[2] for a, r in zip(axes, results)}
    return PropertyReport(
        phi_pore=vf[Phase.PORE],
        phi_nmc=vf[Phase.NMC],
        phi_cbd=vf[Phase.CBD],
        ssa_nmc=ssa_nmc(m),
        d_rel_x=results[0][0],
        d_rel_y=results[1][0],
        d_rel_z=results[2][0],
        tau_x=results[0][1],
        tau_y=results[1][1],
        tau_z=results[2][1],
        particle_d_eq_mean=d_eq_mean,
        particle_sphericity_mean=psi_mean,
        diagnostics=diagnostics,
    )
