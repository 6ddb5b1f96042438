from __future__ import annotations

import sys
from pathlib import Path


def _add_engine_to_path() -> None:
    repo_root = Path(__file__).resolve().parents[1]
    sys.path.insert(0, str(repo_root / "engine"))


def main() -> int:
    _add_engine_to_path()
    from nonmarkov_sync.cli import main as cli_main  # noqa: I001

    return cli_main()


if __name__ == "__main__":
    raise SystemExit(main())
