import os
from pathlib import Path

import pytest

from specrag import parse_spec
from specrag.openapi_model import load_spec

from synth import synthetic_bytes

FIXTURES = Path(__file__).parent / "fixtures"


@pytest.fixture
def synth_doc():
    return parse_spec(synthetic_bytes(20), "synth")


@pytest.fixture(scope="session")
def fixtures_dir():
    return FIXTURES


# ---------------------------------------------------------------- RestBench data
# Set SPECRAG_RESTBENCH_DIR to a checkout of the RestGPT repository (or any
# directory holding spotify_oas.json, tmdb_oas.json, spotify.json, tmdb.json,
# optionally under specs/ and datasets/).


def _restbench_file(*names):
    root = os.environ.get("SPECRAG_RESTBENCH_DIR")
    if not root:
        return None
    for name in names:
        for sub in ("", "specs", "datasets"):
            p = Path(root) / sub / name
            if p.is_file():
                return p
    return None


def _need(path, what):
    if path is None:
        pytest.skip(f"RestBench {what} not available (set SPECRAG_RESTBENCH_DIR)")
    return path


@pytest.fixture(scope="session")
def spotify_doc():
    return load_spec(_need(_restbench_file("spotify_oas.json", "spotify_oas.yaml"), "Spotify spec"))


@pytest.fixture(scope="session")
def tmdb_doc():
    return load_spec(_need(_restbench_file("tmdb_oas.json", "tmdb_oas.yaml"), "TMDB spec"))


@pytest.fixture(scope="session")
def spotify_bench_path():
    return _need(_restbench_file("spotify.json"), "Spotify queries")


@pytest.fixture(scope="session")
def tmdb_bench_path():
    return _need(_restbench_file("tmdb.json"), "TMDB queries")


# ---------------------------------------------------------------- acceptance summary
# Tests marked ``@pytest.mark.acceptance(n, title)`` get one PASS/FAIL/SKIP line each.

_titles = {}
_outcomes = {}


def pytest_itemcollected(item):
    mark = item.get_closest_marker("acceptance")
    if mark:
        _titles[item.nodeid] = (mark.args[0], mark.args[1])


def pytest_runtest_logreport(report):
    if report.nodeid not in _titles or _outcomes.get(report.nodeid, "").startswith("FAIL"):
        return
    if report.failed:
        _outcomes[report.nodeid] = "FAIL"
    elif report.skipped:
        reason = report.longrepr[2] if isinstance(report.longrepr, tuple) else ""
        _outcomes[report.nodeid] = f"SKIP  {reason.removeprefix('Skipped: ')}"
    elif report.when == "call":
        _outcomes[report.nodeid] = "PASS"


def pytest_terminal_summary(terminalreporter):
    if not _titles:
        return
    terminalreporter.section("acceptance criteria")
    for nodeid, (num, title) in sorted(_titles.items(), key=lambda kv: (kv[1][0], kv[0])):
        status = _outcomes.get(nodeid, "NOT RUN")
        terminalreporter.write_line(f"{num:>2}. {status.split()[0]:<4} {title} [{nodeid.split('::')[-1]}]"
                                    + (f" -- {status[6:]}" if status.startswith("SKIP") else ""))
