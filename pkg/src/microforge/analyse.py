"""Plot-ready analysis tables: latent-space PCA, best-so-far curves,
and per-slice phase profiles.

All outputs are plain CSV data tables; rendering is left to whatever
plotting tool the user prefers.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .voxel import Microstructure, Phase, slice_profile


@dataclass(frozen=True)
class PCAResult:
    """Principal components of a point cloud.

    components has one unit-norm row per component, ordered by
    decreasing eigenvalue, with the sign fixed so each row's
    largest-magnitude loading is positive.  scores are the centred data
    projected onto the requested leading components.
    """

    mean: np.ndarray  # (d,)
    components: np.ndarray  # (d, d), row i = i-th component
    eigenvalues: np.ndarray  # (d,), descending
    scores: np.ndarray  # (n, k)

    @property
    def explained_fractions(self) -> np.ndarray:
        total = float(np.sum(self.eigenvalues))
        if total <= 0:
            return np.zeros_like(self.eigenvalues)
        return self.eigenvalues / total

    def project(self, points: np.ndarray, k: int | None = None) -> np.ndarray:
        comps = self.components if k is None else self.components[:k]
        return (np.atleast_2d(points) - self.mean) @ comps.T

    def reconstruct(self, scores: np.ndarray) -> np.ndarray:
        scores = np.atleast_2d(scores)
        return self.mean + scores @ self.components[: scores.shape[1]]


def pca(points: np.ndarray, n_components: int = 2) -> PCAResult:
    """Eigen-decomposition of the sample covariance of `points` (n, d).

    Needs at least two points.  Tiny negative eigenvalues from rounding
    are clamped to zero.
    """
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    n, d = pts.shape
    if n < 2:
        raise ValueError("PCA needs at least two points")
    if not 1 <= n_components <= d:
        raise ValueError(f"n_components must lie in [1, {d}]")
    mean = pts.mean(axis=0)
    centred = pts - mean
    cov = centred.T @ centred / (n - 1)
    eigvals, eigvecs = np.linalg.eigh(cov)
    order = np.argsort(eigvals)[::-1]
    eigvals = np.maximum(eigvals[order], 0.0)
    components = eigvecs[:, order].T.copy()
    for row in components:
        peak = int(np.argmax(np.abs(row)))
        if row[peak] < 0:
            row *= -1.0
    scores = centred @ components[:n_components].T
    return PCAResult(
        mean=mean,
        components=components,
        eigenvalues=eigvals,
        scores=scores,
    )


def _write_table(path, header: list[str], rows: list[list[str]]) -> None:
    lines = [",".join(header)]
    lines.extend(",".join(row) for row in rows)
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def _cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return repr(float(value))


def write_pca_table(path, result: PCAResult, extra_columns=None) -> None:
    """Per-point component scores, optionally joined with property
    columns ({name: sequence} of equal length)."""
    extra = dict(extra_columns or {})
    k = result.scores.shape[1]
    header = [f"pc{j + 1}" for j in range(k)] + list(extra)
    rows = []
    for i in range(result.scores.shape[0]):
        row = [_cell(result.scores[i, j]) for j in range(k)]
        row.extend(_cell(extra[name][i]) for name in extra)
        rows.append(row)
    _write_table(path, header, rows)


def write_variance_table(path, result: PCAResult) -> None:
    fractions = result.explained_fractions
    rows = [
        [str(i + 1), _cell(result.eigenvalues[i]), _cell(fractions[i])]
        for i in range(result.eigenvalues.size)
    ]
    _write_table(path, ["component", "eigenvalue", "explained_fraction"], rows)


def write_best_curve(path, records) -> None:
    """Best-so-far curve from a sequence of trace records (objects with
    index, phase, iteration, objective, best_so_far)."""
    rows = []
    for rec in records:
        rows.append(
            [
                str(rec.index),
                rec.phase,
                "" if rec.iteration is None else str(rec.iteration),
                _cell(rec.objective),
                _cell(rec.best_so_far),
            ]
        )
    _write_table(
        path, ["index", "phase", "iteration", "objective", "best_so_far"], rows
    )


def write_profile_table(path, m: Microstructure, axis: str) -> None:
    """Per-slice fractions of all three phases along `axis`."""
    profiles = {phase: slice_profile(m, phase, axis) for phase in Phase}
    n = profiles[Phase.PORE].size
    rows = [
        [
            str(j),
            _cell(profiles[Phase.PORE][j]),
            _cell(profiles[Phase.NMC][j]),
            _cell(profiles[Phase.CBD][j]),
        ]
        for j in range(n)
    ]
    _write_table(path, ["slice", "phi_pore", "phi_nmc", "phi_cbd"], rows)
