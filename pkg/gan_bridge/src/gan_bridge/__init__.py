"""External-generator client speaking the job-directory bridge protocol.

An invocation reads `z.txt` from a job directory, maps the latent
vector through a generator checkpoint named by the
GAN_BRIDGE_CHECKPOINT environment variable, and writes `volume.raw`
plus `volume.hdr` back into the directory.  The shipped checkpoint kind
needs no tensor framework; real models plug in behind the same loader.
"""

from .bridge import (
    CHECKPOINT_ENV,
    BridgeJob,
    CheckpointError,
    ProtocolError,
    load_generator,
    serve_once,
)

__all__ = [
    "CHECKPOINT_ENV",
    "BridgeJob",
    "CheckpointError",
    "ProtocolError",
    "load_generator",
    "serve_once",
]

__version__ = "0.1.0"
