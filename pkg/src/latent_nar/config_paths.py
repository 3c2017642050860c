"""
Centralized Path Configuration
==============================

This module is the one place that knows how the project directory is laid
out. Import it wherever a default location is needed so that every command
reads and writes relative to the same root.

Usage:
    from latent_nar.config_paths import CONFIGS_DIR, RUNS_DIR

    out_dir = RUNS_DIR / "desk"
    config = load_config(CONFIGS_DIR / "desk.ini")
"""

from __future__ import annotations

import sys
from pathlib import Path

# ==============================================================================
# PROJECT ROOT DETECTION
# ==============================================================================

ROOT_MARKERS = ("README.md", "requirements.txt", ".git")


def find_project_root(start: Path | None = None) -> Path:
    """
    Find project root by looking for key indicators.
    Searches upward from the package location.
    """
    current = (start or Path(__file__)).resolve().parent

    for candidate in (current, *current.parents[:3]):
        for indicator in ROOT_MARKERS:
            if (candidate / indicator).exists():
                return candidate

    # Fallback: src/latent_nar/ lives two levels below the root
    return current.parent.parent


PROJECT_ROOT = find_project_root()

# ==============================================================================
# DIRECTORY PATHS
# ==============================================================================

SRC_DIR = PROJECT_ROOT / "src"

RESULTS_DIR = PROJECT_ROOT / "results"
RUNS_DIR = RESULTS_DIR / "runs"

CONFIGS_DIR = PROJECT_ROOT / "configs"


def resolve_path(path: str | Path) -> Path:
    """``path`` itself when absolute, otherwise taken relative to PROJECT_ROOT."""
    path = Path(path).expanduser()
    return path if path.is_absolute() else PROJECT_ROOT / path


# ==============================================================================
# DIRECTORY CREATION
# ==============================================================================

def ensure_directories(*extra: Path) -> None:
    """Create the runs directory and any ``extra`` ones."""
    for directory in (RUNS_DIR, *extra):
        directory.mkdir(parents=True, exist_ok=True)


# ==============================================================================
# VERIFICATION
# ==============================================================================

if __name__ == "__main__":
    from rich.console import Console
    from rich.table import Table

    roles = {
        "PROJECT_ROOT": (PROJECT_ROOT, "marker files: " + ", ".join(ROOT_MARKERS)),
        "SRC_DIR": (SRC_DIR, "the latent_nar package"),
        "CONFIGS_DIR": (CONFIGS_DIR, "INI experiment files"),
        "RESULTS_DIR": (RESULTS_DIR, "everything the pipeline writes"),
        "RUNS_DIR": (RUNS_DIR, "one directory per run (data, checkpoints, reports)"),
    }
    table = Table(title=f"latent_nar paths ({sys.platform})")
    for column in ("name", "path", "holds", "present"):
        table.add_column(column)
    for name, (path, role) in roles.items():
        table.add_row(name, str(path), role, "yes" if path.exists() else "[red]no[/red]")
    Console().print(table)
