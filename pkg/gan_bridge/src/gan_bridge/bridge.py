"""Job parsing, checkpoint loading, and volume emission.

Checkpoint files are JSON with a `kind` field.  The shipped kind,
`tiled-threshold`, tiles each latent component over its 16^3 output
block and scores the three phases against two thresholds, so the
argmax step mirrors how a 3-channel neural generator would be decoded
without needing any tensor framework.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

CHECKPOINT_ENV = "GAN_BRIDGE_CHECKPOINT"

UPSAMPLE = 16

PHASE_CODING = "pore:0,nmc:1,cbd:2"


class ProtocolError(Exception):
    """Malformed job input (missing or bad z.txt, bad dims)."""


class CheckpointError(Exception):
    """Missing or unusable generator checkpoint."""


@dataclass(frozen=True)
class BridgeJob:
    """One parsed generation request."""

    job_dir: Path
    z: np.ndarray
    dims: tuple[int, int, int]

    @classmethod
    def from_directory(cls, job_dir) -> "BridgeJob":
        job_dir = Path(job_dir)
        z_path = job_dir / "z.txt"
        if not z_path.is_file():
            raise ProtocolError(f"{z_path}: no latent file in job directory")
        lines = [
            ln.strip() for ln in z_path.read_text().splitlines() if ln.strip()
        ]
        if not lines or not lines[-1].startswith("dims="):
            raise ProtocolError(f"{z_path}: missing dims line")
        try:
            dims = tuple(int(p) for p in lines[-1][5:].split(","))
            values = np.array([float(ln) for ln in lines[:-1]], dtype=np.float64)
        except ValueError as exc:
            raise ProtocolError(f"{z_path}: malformed latent file ({exc})") from exc
        if len(dims) != 3 or any(d <= 0 for d in dims):
            raise ProtocolError(f"{z_path}: dims must be three positive ints")
        if any(d % UPSAMPLE for d in dims):
            raise ProtocolError(
                f"{z_path}: each extent must be a multiple of {UPSAMPLE}"
            )
        expected = 1
        for d in dims:
            expected *= d // UPSAMPLE
        if values.size != expected:
            raise ProtocolError(
                f"{z_path}: latent length {values.size} does not match "
                f"dims {dims} (expected {expected})"
            )
        return cls(job_dir=job_dir, z=values, dims=dims)  # type: ignore[arg-type]


def _tiled_threshold_generator(params: dict):
    """Generator whose 3-channel scores are linear in the tiled latent.

    Each latent component is replicated over its 16^3 block.  Scores:
    pore = t_lo - u, nmc = u - t_hi, cbd = 0, so argmax labels blocks
    below t_lo as pore, above t_hi as nmc, and the band between as cbd.
    """
    try:
        t_lo = float(params["t_lo"])
        t_hi = float(params["t_hi"])
    except KeyError as exc:
        raise CheckpointError(f"tiled-threshold checkpoint missing {exc}") from exc
    if not t_lo <= t_hi:
        raise CheckpointError("tiled-threshold needs t_lo <= t_hi")

    def generate(z: np.ndarray, dims: tuple[int, int, int]) -> np.ndarray:
        lat = tuple(d // UPSAMPLE for d in dims)
        grid = z.reshape(lat, order="F")
        tiled = grid
        for axis in range(3):
            tiled = np.repeat(tiled, UPSAMPLE, axis=axis)
        scores = np.stack(
            [t_lo - tiled, tiled - t_hi, np.zeros_like(tiled)], axis=0
        )
        return scores

    return generate


_KINDS = {"tiled-threshold": _tiled_threshold_generator}


def load_generator(path):
    """Build the z -> 3-channel-score callable a checkpoint describes.

    Any tensor framework can back a new `kind`; the mapping is the only
    place the bridge touches model internals.
    """
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        payload = json.loads(path.read_text())
    except (ValueError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"{path}: unreadable checkpoint ({exc})") from exc
    kind = payload.get("kind")
    if kind not in _KINDS:
        raise CheckpointError(f"{path}: unknown checkpoint kind {kind!r}")
    return _KINDS[kind](payload)


def _checkpoint_path() -> Path:
    path = os.environ.get(CHECKPOINT_ENV, "")
    if not path:
        raise CheckpointError(
            f"set {CHECKPOINT_ENV} to the generator checkpoint path"
        )
    return Path(path)


def _write_volume(job: BridgeJob, labels: np.ndarray) -> None:
    nx, ny, nz = labels.shape
    raw = labels.astype(np.uint8).flatten(order="F").tobytes()
    (job.job_dir / "volume.raw").write_bytes(raw)
    (job.job_dir / "volume.hdr").write_text(
        f"nx={nx}\nny={ny}\nnz={nz}\nvoxel_size_um=0.4\n"
        f"phase_coding={PHASE_CODING}\n"
    )


def serve_once(job_dir) -> None:
    """Handle one job directory: z.txt in, volume.raw/volume.hdr out.

    The volume is only written after generation fully succeeds, so a
    failed job leaves no partial output behind.
    """
    generator = load_generator(_checkpoint_path())
    job = BridgeJob.from_directory(job_dir)
    scores = np.asarray(generator(job.z, job.dims), dtype=np.float64)
    if scores.shape != (3,) + job.dims:
        raise CheckpointError(
            f"generator returned shape {scores.shape}, "
            f"expected {(3,) + job.dims}"
        )
    labels = np.argmax(scores, axis=0).astype(np.uint8)
    _write_volume(job, labels)
