"""Process entry point: one job directory per invocation.

Exit codes follow the bridge protocol: 0 success, 2 checkpoint missing
or unusable, 3 malformed job input.
"""

from __future__ import annotations

import argparse
import sys

from .bridge import CheckpointError, ProtocolError, serve_once

EXIT_OK = 0
EXIT_CHECKPOINT = 2
EXIT_PROTOCOL = 3


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="gan-bridge",
        description="serve one volume-generation job directory",
    )
    parser.add_argument("job_dir", help="directory holding z.txt")
    args = parser.parse_args(argv)
    try:
        serve_once(args.job_dir)
    except CheckpointError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CHECKPOINT
    except ProtocolError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PROTOCOL
    return EXIT_OK


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    sys.exit(main())
