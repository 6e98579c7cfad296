"""Latent-vector parameterised microstructure generation.

A latent vector z (conceptually an L x L x L grid of reals in [-5, 5])
is mapped deterministically to a three-phase voxel volume 16x larger in
every direction:

1. reshape z to the latent grid and trilinearly upsample x16,
2. Gaussian-smooth the upsampled field,
3. per phase c, score S_c = alpha_c * U + beta_c * G_c + gamma_c where
   G_c is a fixed zero-mean unit-variance correlated random field,
4. label each voxel with the argmax phase (ties resolve to the lowest
   phase code).

The G_c fields are built from white noise hashed out of global voxel
coordinates (counter-based, no sequential RNG state), then filtered
with a Gaussian of standard deviation equal to the phase's correlation
length and rescaled to unit variance analytically.  Because the noise
is a pure function of (seed, phase, coordinate), volumes of different
sizes agree on the coordinates they share, and results are bit-exact
across platforms.

Generation can also be delegated to an external executable via a small
file protocol; see `external_generate`.
"""

from __future__ import annotations

import subprocess
import tempfile
import threading
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter, map_coordinates
from scipy.special import ndtri

from .errors import ExternalGeneratorError, VolumeIOError
from .voxel import Microstructure, Phase, read_volume

LATENT_LO = -5.0
LATENT_HI = 5.0

UPSAMPLE = 16

# truncation radius of the correlation filter, in standard deviations
_TRUNCATE = 4.0

_SM_GAMMA = np.uint64(0x9E3779B97F4A7C15)
_SM_MUL1 = np.uint64(0xBF58476D1CE4E5B9)
_SM_MUL2 = np.uint64(0x94D049BB133111EB)


@dataclass(frozen=True)
class LatentVector:
    """Latent input, clamped to the admissible box on construction.

    `n_clamped` reports how many components were moved onto the bounds.
    """

    values: np.ndarray
    n_clamped: int = 0

    def __post_init__(self):
        raw = np.asarray(self.values, dtype=np.float64).ravel()
        if raw.size == 0:
            raise ValueError("latent vector must not be empty")
        clipped = np.clip(raw, LATENT_LO, LATENT_HI)
        object.__setattr__(self, "n_clamped", int(np.count_nonzero(clipped != raw)))
        clipped.setflags(write=False)
        object.__setattr__(self, "values", clipped)

    def __len__(self) -> int:
        return self.values.size

    @property
    def was_clamped(self) -> bool:
        return self.n_clamped > 0

    @property
    def latent_extent(self) -> int:
        """Edge length L of the cubic latent grid."""
        ell = round(self.values.size ** (1.0 / 3.0))
        if ell ** 3 != self.values.size:
            raise ValueError(
                f"latent length {self.values.size} is not a perfect cube"
            )
        return ell


# defaults reproduce mean fractions near pore 0.40 / NMC 0.45 / CBD 0.15
# for z drawn componentwise from N(0,1); see test suite
DEFAULT_ALPHA = (0.35, 0.8, -0.5)
DEFAULT_BETA = (1.0, 1.0, 1.0)
DEFAULT_GAMMA = (0.171, 0.221, -0.391)


@dataclass(frozen=True)
class GeneratorConfig:
    """Fixed basis and channel coefficients of the procedural generator.

    Each output extent must equal 16x the corresponding latent grid
    extent.  Correlation lengths are the standard deviations, in voxels,
    of the Gaussian filters shaping the per-phase random fields.
    """

    output_dims: tuple[int, int, int] = (64, 64, 64)
    seed: int = 42
    corr_lengths: tuple[float, float, float] = (5.0, 8.0, 3.0)
    alpha: tuple[float, float, float] = DEFAULT_ALPHA
    beta: tuple[float, float, float] = DEFAULT_BETA
    gamma: tuple[float, float, float] = DEFAULT_GAMMA
    sigma_smooth: float = 2.0
    voxel_size: float = 0.4

    def __post_init__(self):
        dims = tuple(int(d) for d in self.output_dims)
        if len(dims) != 3 or any(d <= 0 for d in dims):
            raise ValueError(f"output_dims must be three positive ints, got {dims}")
        if any(d % UPSAMPLE for d in dims):
            raise ValueError(
                f"each output extent must be a multiple of {UPSAMPLE}, got {dims}"
            )
        object.__setattr__(self, "output_dims", dims)
        if any(l <= 0 for l in self.corr_lengths):
            raise ValueError("correlation lengths must be positive")
        if self.sigma_smooth < 0:
            raise ValueError("smoothing width must be non-negative")

    @property
    def latent_dims(self) -> tuple[int, int, int]:
        return tuple(d // UPSAMPLE for d in self.output_dims)

    @property
    def latent_length(self) -> int:
        lx, ly, lz = self.latent_dims
        return lx * ly * lz


def generate(z: LatentVector, cfg: GeneratorConfig | None = None) -> Microstructure:
    """Deterministic three-phase volume for latent vector `z`.

    Identical (z, cfg) pairs produce bit-identical volumes.  Raises
    ValueError when the latent length does not match cfg.output_dims.
    """
    if cfg is None:
        cfg = GeneratorConfig()
    if not isinstance(z, LatentVector):
        z = LatentVector(z)
    if len(z) != cfg.latent_length:
        raise ValueError(
            f"latent length {len(z)} does not match output dims "
            f"{cfg.output_dims} (expected {cfg.latent_length})"
        )
    u = _smoothed_latent_field(z, cfg)
    scores = np.empty((3,) + cfg.output_dims)
    for phase in Phase:
        c = int(phase)
        g = _random_field(
            cfg.seed, c, cfg.output_dims, cfg.corr_lengths[c]
        )
        scores[c] = cfg.alpha[c] * u + cfg.beta[c] * g + cfg.gamma[c]
    # argmax returns the first maximiser, which is the lowest phase code
    labels = np.argmax(scores, axis=0).astype(np.uint8)
    return Microstructure(labels=labels, voxel_size=cfg.voxel_size)


def _smoothed_latent_field(z: LatentVector, cfg: GeneratorConfig) -> np.ndarray:
    """Latent grid upsampled x16 (trilinear, cell-centred) and smoothed."""
    grid = z.values.reshape(cfg.latent_dims, order="F")
    coords = np.meshgrid(
        *[(np.arange(n) + 0.5) / UPSAMPLE - 0.5 for n in cfg.output_dims],
        indexing="ij",
    )
    up = map_coordinates(grid, coords, order=1, mode="nearest")
    if cfg.sigma_smooth == 0:
        return up
    return gaussian_filter(up, cfg.sigma_smooth, mode="nearest")


def _splitmix64(x: np.ndarray) -> np.ndarray:
    # uint64 arithmetic wraps by design
    with np.errstate(over="ignore"):
        x = (x + _SM_GAMMA).astype(np.uint64)
        x = ((x ^ (x >> np.uint64(30))) * _SM_MUL1).astype(np.uint64)
        x = ((x ^ (x >> np.uint64(27))) * _SM_MUL2).astype(np.uint64)
        return x ^ (x >> np.uint64(31))


def _white_noise(seed: int, channel: int, lo: np.ndarray, dims) -> np.ndarray:
    """Standard-normal noise indexed by global voxel coordinates.

    Pure function of (seed, channel, coordinate): any window of the
    infinite noise lattice can be materialised independently.
    """
    base = _splitmix64(
        _splitmix64(np.uint64(np.uint64(seed) & np.uint64(0xFFFFFFFFFFFFFFFF)))
        ^ np.uint64(channel)
    )
    axes = [
        (np.arange(lo[d], lo[d] + dims[d], dtype=np.int64)).astype(np.uint64)
        for d in range(3)
    ]
    h = _splitmix64(base ^ axes[0])[:, None, None]
    h = _splitmix64(h ^ axes[1][None, :, None])
    h = _splitmix64(h ^ axes[2][None, None, :])
    # top 53 bits -> open interval (0, 1) -> normal quantile
    u = ((h >> np.uint64(11)).astype(np.float64) + 0.5) * 2.0 ** -53
    return ndtri(u)


@lru_cache(maxsize=16)
def _random_field(
    seed: int, channel: int, dims: tuple[int, int, int], corr_length: float
) -> np.ndarray:
    """Zero-mean unit-variance correlated field on [0, dims) in global
    coordinates.

    White noise is materialised with a margin of one filter truncation
    radius so the filtered interior equals the infinite-lattice
    convolution; volumes of different sizes therefore agree exactly on
    shared coordinates.  Unit variance comes from dividing by the l2
    norm of the separable filter kernel.
    """
    radius = int(_TRUNCATE * corr_length + 0.5)
    lo = np.array([-radius] * 3)
    padded_dims = tuple(d + 2 * radius for d in dims)
    noise = _white_noise(seed, channel, lo, padded_dims)
    smooth = gaussian_filter(noise, corr_length, truncate=_TRUNCATE, mode="constant")
    core = smooth[radius:radius + dims[0],
                  radius:radius + dims[1],
                  radius:radius + dims[2]]

    x = np.arange(-radius, radius + 1, dtype=np.float64)
    w = np.exp(-0.5 * (x / corr_length) ** 2)
    w /= w.sum()
    norm = float(np.sum(w * w)) ** 1.5  # l2 norm of the 3-D kernel
    out = core / norm
    out.setflags(write=False)
    return out


# ---------------------------------------------------------------------------
# External generator bridge
# ---------------------------------------------------------------------------

@dataclass
class ExternalGeneratorEndpoint:
    """Executable honouring the job-directory file protocol.

    The command is invoked as `command <job-dir>` after `z.txt` has been
    written to the job directory, and must leave `volume.raw` plus
    `volume.hdr` there, exiting 0 on success.  Calls are serialised per
    endpoint unless `concurrency_safe` is set.
    """

    command: tuple[str, ...]
    timeout: float = 120.0
    concurrency_safe: bool = False
    _lock: threading.Lock = field(
        default_factory=threading.Lock, repr=False, compare=False
    )

    def __post_init__(self):
        if isinstance(self.command, (str, Path)):
            self.command = (str(self.command),)
        else:
            self.command = tuple(str(c) for c in self.command)
        if self.timeout <= 0:
            raise ValueError("timeout must be positive")


def write_latent_file(z: LatentVector, dims: tuple[int, int, int], path) -> None:
    """Latent exchange file: one real per line (x-fastest ordering of the
    latent grid), then a `dims=nx,ny,nz` line."""
    lines = [repr(float(v)) for v in z.values]
    lines.append("dims={},{},{}".format(*dims))
    Path(path).write_text("\n".join(lines) + "\n")


def read_latent_file(path) -> tuple[np.ndarray, tuple[int, int, int]]:
    """Inverse of `write_latent_file`; returns (values, dims)."""
    lines = [ln.strip() for ln in Path(path).read_text().splitlines() if ln.strip()]
    if not lines or not lines[-1].startswith("dims="):
        raise ValueError(f"{path}: missing dims line")
    try:
        dims = tuple(int(p) for p in lines[-1][5:].split(","))
        values = np.array([float(ln) for ln in lines[:-1]])
    except ValueError as exc:
        raise ValueError(f"{path}: malformed latent file ({exc})") from exc
    if len(dims) != 3:
        raise ValueError(f"{path}: dims line must carry three extents")
    return values, dims  # type: ignore[return-value]


def external_generate(
    z: LatentVector,
    endpoint: ExternalGeneratorEndpoint,
    output_dims: tuple[int, int, int] | None = None,
) -> Microstructure:
    """Delegate generation to an external process.

    Writes the latent exchange file into a fresh job directory, runs the
    endpoint on it, and ingests the volume it produced with full label
    and dimension validation.  Defaults the requested dims to the 16x
    cube implied by the latent length.
    """
    if output_dims is None:
        ell = z.latent_extent * UPSAMPLE
        output_dims = (ell, ell, ell)

    def run(job: Path) -> Microstructure:
        write_latent_file(z, output_dims, job / "z.txt")
        try:
            proc = subprocess.run(
                [*endpoint.command, str(job)],
                capture_output=True,
                text=True,
                timeout=endpoint.timeout,
            )
        except subprocess.TimeoutExpired as exc:
            raise ExternalGeneratorError(
                f"external generator timed out after {endpoint.timeout} s"
            ) from exc
        except OSError as exc:
            raise ExternalGeneratorError(
                f"external generator could not be launched: {exc}"
            ) from exc
        if proc.returncode != 0:
            raise ExternalGeneratorError(
                f"external generator exited with code {proc.returncode}",
                stderr=proc.stderr,
            )
        try:
            volume = read_volume(job / "volume.raw", fmt="raw-u8")
        except VolumeIOError as exc:
            raise ExternalGeneratorError(
                f"external generator produced a malformed volume: {exc}"
            ) from exc
        if volume.dims != tuple(output_dims):
            raise ExternalGeneratorError(
                f"external generator returned dims {volume.dims}, "
                f"requested {tuple(output_dims)}"
            )
        return volume

    with tempfile.TemporaryDirectory(prefix="genjob_") as tmp:
        if endpoint.concurrency_safe:
            return run(Path(tmp))
        with endpoint._lock:
            return run(Path(tmp))
