"""Static code quality tests for the lcnet package."""

import re
import sys
import tomllib
from pathlib import Path

from lcnet import __version__
from lcnet.cli import _HANDLERS
from lcnet.const import Command

PACKAGE = Path(__file__).parent.parent / "lcnet"


def _sources():
    return sorted(PACKAGE.glob("*.py"))


def check_logger_definitions():
    """Modules that log must define the module logger."""
    errors = []
    for path in _sources():
        content = path.read_text()
        if "_LOGGER." in content and "_LOGGER = logging.getLogger(__name__)" not in content:
            errors.append(f"{path.name}: uses _LOGGER without defining it")
    return errors


def check_no_print_outside_cli():
    """Only the command-line module writes to stdout."""
    errors = []
    for path in _sources():
        if path.name == "cli.py":
            continue
        for match in re.finditer(r"^\s*print\(", path.read_text(), re.MULTILINE):
            line_num = path.read_text()[: match.start()].count("\n") + 1
            errors.append(f"{path.name}:{line_num}: print() outside cli.py, use _LOGGER")
    return errors


def check_no_bare_except():
    """Exception handlers name what they catch."""
    errors = []
    for path in _sources():
        content = path.read_text()
        for match in re.finditer(r"^\s*except\s*:", content, re.MULTILINE):
            line_num = content[: match.start()].count("\n") + 1
            errors.append(f"{path.name}:{line_num}: bare except")
    return errors


def check_module_level_imports():
    """Imports live at the top of each module."""
    errors = []
    for path in _sources():
        content = path.read_text()
        for match in re.finditer(r"^[ \t]+(import \w|from \S+ import )", content, re.MULTILINE):
            line_num = content[: match.start()].count("\n") + 1
            errors.append(f"{path.name}:{line_num}: inline import")
    return errors


def check_errors_derive_from_base():
    """Every package exception derives from LCNetError."""
    errors = []
    content = (PACKAGE / "errors.py").read_text()
    for match in re.finditer(r"^class (\w+)\((\w+)\):", content, re.MULTILINE):
        name, base = match.groups()
        if name != "LCNetError" and base in ("Exception", "BaseException"):
            errors.append(f"errors.py: {name} derives from {base} instead of LCNetError")
    return errors


def check_commands_have_handlers():
    """Every command in const.py is wired into the command line."""
    return [f"cli.py: no handler for {command}" for command in Command if command not in _HANDLERS]


def check_version_sync():
    """pyproject.toml and lcnet.__version__ carry the same version."""
    with (PACKAGE.parent / "pyproject.toml").open("rb") as handle:
        version = tomllib.load(handle)["project"]["version"]
    if version != __version__:
        return [f"pyproject.toml ({version}) doesn't match lcnet ({__version__})"]
    return []


def test_logger_definitions():
    """Test every logging module defines _LOGGER."""
    assert check_logger_definitions() == []


def test_no_print_outside_cli():
    """Test library modules do not print."""
    assert check_no_print_outside_cli() == []


def test_no_bare_except():
    """Test there are no bare except clauses."""
    assert check_no_bare_except() == []


def test_module_level_imports():
    """Test there are no inline imports."""
    assert check_module_level_imports() == []


def test_errors_derive_from_base():
    """Test the exception hierarchy has one root."""
    assert check_errors_derive_from_base() == []


def test_commands_have_handlers():
    """Test the command enum and the CLI agree."""
    assert check_commands_have_handlers() == []


def test_version_sync():
    """Test the project and package versions agree."""
    assert check_version_sync() == []


def main():
    """Run all code quality checks."""
    print("=" * 70)
    print("Static Code Quality Checks for lcnet")
    print("=" * 70)
    print()

    all_errors = []

    checks = [
        ("Logger definitions", check_logger_definitions),
        ("No print outside cli", check_no_print_outside_cli),
        ("No bare except", check_no_bare_except),
        ("Module level imports", check_module_level_imports),
        ("Exception hierarchy", check_errors_derive_from_base),
        ("Command handlers", check_commands_have_handlers),
        ("Version sync", check_version_sync),
    ]

    for check_name, check_func in checks:
        print(f"Checking {check_name}...")
        errors = check_func()
        if errors:
            all_errors.extend(errors)
            for error in errors:
                print(f"  ✗ {error}")
        else:
            print("  ✓ Passed")
        print()

    print("=" * 70)
    if all_errors:
        print(f"FAILED: {len(all_errors)} issue(s) found")
        return 1
    print("SUCCESS: All checks passed")
    return 0


if __name__ == "__main__":
    sys.exit(main())
