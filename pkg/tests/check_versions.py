#!/usr/bin/env python3
"""Version synchronization checker.

This script ensures the version in pyproject.toml matches lcnet.__version__.

Exit code 0 if the versions match, 1 if a mismatch is found.
"""
import re
import sys
import tomllib
from pathlib import Path

ROOT = Path(__file__).parent.parent


def get_project_version() -> str:
    """Get version from pyproject.toml."""
    with open(ROOT / "pyproject.toml", "rb") as f:
        project = tomllib.load(f)
    return project.get("project", {}).get("version", "unknown")


def get_package_version() -> str:
    """Get version from lcnet/__init__.py."""
    content = (ROOT / "lcnet" / "__init__.py").read_text()

    # Extract: __version__ = "X.X.X"
    match = re.search(r'^__version__ = "([^"]+)"', content, re.MULTILINE)
    if match:
        return match.group(1)
    return "unknown"


def main():
    """Main version check."""
    print("Checking version synchronization...")

    project_version = get_project_version()
    package_version = get_package_version()

    print(f"pyproject.toml version: {project_version}")
    print(f"lcnet version:          {package_version}")

    if project_version != package_version:
        print("\n❌ VERSION MISMATCH DETECTED:")
        print(f"  - pyproject.toml ({project_version}) doesn't match lcnet ({package_version})")
        print("\nPlease synchronize versions before committing!")
        return 1
    print("\n✓ All versions are synchronized!")
    return 0


if __name__ == "__main__":
    sys.exit(main())
