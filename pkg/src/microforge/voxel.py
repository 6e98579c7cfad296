"""Three-phase voxel volumes and their on-disk formats.

A volume is a dense grid of phase labels (pore / NMC particle /
carbon-binder domain) with a physical voxel pitch in micrometres.
Two formats are supported:

* ``raw-u8``: one byte per voxel, x-fastest ordering, next to a
  plain-text ``.hdr`` sidecar with ``key=value`` lines
  (nx, ny, nz, voxel_size_um, phase_coding).
* ``csv-slices``: a directory of one CSV per z-slice plus a
  ``volume_meta.txt`` with the same header keys.

Both round-trip bit-exactly.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from enum import IntEnum
from pathlib import Path

import numpy as np

from .errors import DimensionMismatchError, InvalidLabelError, VolumeIOError

PHASE_CODING = "pore:0,nmc:1,cbd:2"

AXES = {"x": 0, "y": 1, "z": 2}


class Phase(IntEnum):
    """Phase labels; the integer codes are part of the file formats."""

    PORE = 0
    NMC = 1
    CBD = 2


@dataclass(frozen=True)
class Microstructure:
    """Immutable three-phase voxel grid.

    ``labels`` has shape (nx, ny, nz) and is indexed [x, y, z]; flattening
    for serialisation uses Fortran order so x varies fastest on disk.
    """

    labels: np.ndarray
    voxel_size: float = 0.4  # µm per voxel edge

    def __post_init__(self):
        labels = np.ascontiguousarray(self.labels, dtype=np.uint8)
        if labels.ndim != 3:
            raise ValueError(f"labels must be 3-D, got shape {labels.shape}")
        if self.voxel_size <= 0:
            raise ValueError("voxel_size must be positive")
        bad = labels > 2
        if bad.any():
            offset = int(np.argmax(bad.flatten(order="F")))
            raise InvalidLabelError(
                f"label {int(labels.flatten(order='F')[offset])} at flat offset "
                f"{offset} is outside {{0,1,2}}",
                offset=offset,
            )
        labels.setflags(write=False)
        object.__setattr__(self, "labels", labels)

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.labels.shape

    @property
    def n_voxels(self) -> int:
        return int(self.labels.size)

    def phase_mask(self, phase: Phase) -> np.ndarray:
        return self.labels == int(phase)


def volume_fractions(m: Microstructure) -> dict[Phase, float]:
    """Volume fraction of each phase by voxel counting; fractions sum to 1."""
    counts = np.bincount(m.labels.ravel(), minlength=3)
    total = m.n_voxels
    return {p: counts[int(p)] / total for p in Phase}


def slice_profile(m: Microstructure, phase: Phase, axis: str) -> np.ndarray:
    """Per-plane fraction of `phase` along `axis`.

    Element j is the fraction of voxels labelled `phase` in the j-th plane
    perpendicular to the axis; the mean over planes equals the global
    volume fraction exactly.
    """
    ax = _axis_index(axis)
    mask = m.phase_mask(phase)
    other = tuple(i for i in range(3) if i != ax)
    plane_voxels = m.n_voxels // m.dims[ax]
    return mask.sum(axis=other) / plane_voxels


def _axis_index(axis) -> int:
    if isinstance(axis, int):
        if axis in (0, 1, 2):
            return axis
        raise ValueError(f"axis must be x, y or z, got {axis!r}")
    try:
        return AXES[axis]
    except KeyError:
        raise ValueError(f"axis must be x, y or z, got {axis!r}") from None


# ---------------------------------------------------------------------------
# Serialisation
# ---------------------------------------------------------------------------

FORMATS = ("raw-u8", "csv-slices")


def write_volume(m: Microstructure, path, fmt: str = "raw-u8") -> None:
    if fmt == "raw-u8":
        _write_raw(m, Path(path))
    elif fmt == "csv-slices":
        _write_csv_slices(m, Path(path))
    else:
        raise VolumeIOError(f"unknown volume format {fmt!r}")


def read_volume(path, fmt: str = "raw-u8") -> Microstructure:
    if fmt == "raw-u8":
        return _read_raw(Path(path))
    if fmt == "csv-slices":
        return _read_csv_slices(Path(path))
    raise VolumeIOError(f"unknown volume format {fmt!r}")


def header_path(raw_path) -> Path:
    return Path(raw_path).with_suffix(".hdr")


def _header_text(m: Microstructure) -> str:
    nx, ny, nz = m.dims
    return (
        f"nx={nx}\n"
        f"ny={ny}\n"
        f"nz={nz}\n"
        f"voxel_size_um={m.voxel_size!r}\n"
        f"phase_coding={PHASE_CODING}\n"
    )


def _parse_header(text: str, source: str) -> tuple[tuple[int, int, int], float]:
    entries: dict[str, str] = {}
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise VolumeIOError(f"{source}: malformed header line {line!r}")
        key, value = line.split("=", 1)
        entries[key.strip()] = value.strip()
    try:
        dims = tuple(int(entries[k]) for k in ("nx", "ny", "nz"))
        voxel_size = float(entries["voxel_size_um"])
    except (KeyError, ValueError) as exc:
        raise VolumeIOError(f"{source}: missing or invalid header key ({exc})") from exc
    if any(d <= 0 for d in dims):
        raise VolumeIOError(f"{source}: non-positive dimensions {dims}")
    coding = entries.get("phase_coding", PHASE_CODING)
    if coding != PHASE_CODING:
        raise VolumeIOError(f"{source}: unsupported phase coding {coding!r}")
    return dims, voxel_size  # type: ignore[return-value]


def _write_raw(m: Microstructure, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    header_path(path).write_text(_header_text(m))
    path.write_bytes(m.labels.flatten(order="F").tobytes())


def _read_raw(path: Path) -> Microstructure:
    path = Path(path)
    hdr = header_path(path)
    if not path.exists() or not hdr.exists():
        raise VolumeIOError(f"missing volume file or header for {path}")
    dims, voxel_size = _parse_header(hdr.read_text(), str(hdr))
    payload = np.frombuffer(path.read_bytes(), dtype=np.uint8)
    expected = dims[0] * dims[1] * dims[2]
    if payload.size != expected:
        raise DimensionMismatchError(
            f"{path}: payload has {payload.size} bytes, header declares {expected}"
        )
    bad = payload > 2
    if bad.any():
        offset = int(np.argmax(bad))
        raise InvalidLabelError(
            f"{path}: label byte {int(payload[offset])} at offset {offset} "
            "is outside {0,1,2}",
            offset=offset,
        )
    labels = payload.reshape(dims, order="F")
    return Microstructure(labels=labels, voxel_size=voxel_size)


def _write_csv_slices(m: Microstructure, directory: Path) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    (directory / "volume_meta.txt").write_text(_header_text(m))
    nx, ny, nz = m.dims
    for k in range(nz):
        with open(directory / f"slice_{k:04d}.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            # one row per y, one column per x
            for j in range(ny):
                writer.writerow(int(v) for v in m.labels[:, j, k])


def _read_csv_slices(directory: Path) -> Microstructure:
    directory = Path(directory)
    meta = directory / "volume_meta.txt"
    if not meta.exists():
        raise VolumeIOError(f"missing {meta}")
    dims, voxel_size = _parse_header(meta.read_text(), str(meta))
    nx, ny, nz = dims
    labels = np.empty(dims, dtype=np.uint8)
    for k in range(nz):
        slice_path = directory / f"slice_{k:04d}.csv"
        if not slice_path.exists():
            raise DimensionMismatchError(f"missing slice file {slice_path}")
        with open(slice_path, newline="") as fh:
            rows = list(csv.reader(fh))
        if len(rows) != ny or any(len(r) != nx for r in rows):
            raise DimensionMismatchError(
                f"{slice_path}: expected {ny} rows x {nx} cols"
            )
        for j, row in enumerate(rows):
            for i, cell in enumerate(row):
                value = int(cell)
                if value not in (0, 1, 2):
                    raise InvalidLabelError(
                        f"{slice_path}: label {value} at row {j} col {i} "
                        "is outside {0,1,2}",
                        offset=(k, j, i),
                    )
                labels[i, j, k] = value
    return Microstructure(labels=labels, voxel_size=voxel_size)
