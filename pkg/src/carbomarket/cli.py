"""Console entry point; the implementation lives in cli_io."""

from __future__ import annotations

from .cli_io import main

__all__ = ["main"]

if __name__ == "__main__":
    raise SystemExit(main())
