"""Session fixtures for the end-to-end checks and the per-criterion report.

Full-grid libraries are built once per session through the CLI (about
40 s per sensor on one core) and shared by every test that needs them.
"""
import json
import warnings
from collections import defaultdict
from pathlib import Path

import pytest

from nvlocate import cli

CONFIGS = Path(__file__).resolve().parents[1] / "configs"

_CRITERIA = {}
_OUTCOMES = defaultdict(list)


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion covered by the test")


def pytest_collection_modifyitems(items):
    for item in items:
        m = item.get_closest_marker("criterion")
        if m is not None:
            _CRITERIA[m.args[0]] = m.args[1]


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    rep = (yield).get_result()
    m = item.get_closest_marker("criterion")
    if m is None:
        return
    if rep.when == "call" or (rep.when == "setup" and not rep.passed):
        ok = rep.passed and not hasattr(rep, "wasxfail")
        _OUTCOMES[m.args[0]].append((item.name, ok, hasattr(rep, "wasxfail")))


def pytest_terminal_summary(terminalreporter):
    if not _OUTCOMES:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for n in sorted(_OUTCOMES):
        parts = _OUTCOMES[n]
        ok = all(p[1] for p in parts)
        line = f"criterion {n}: {'PASS' if ok else 'FAIL'}  {_CRITERIA.get(n, '')}"
        bad = [p[0] + (" (xfail)" if p[2] else "") for p in parts if not p[1]]
        if bad:
            line += "  [failing: " + ", ".join(bad) + "]"
        tr.write_line(line)


def _cli(*argv):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        code = cli.main([str(a) for a in argv])
    assert code == cli.EXIT_OK, argv
    return code


def _pipeline(out: Path, config: str, build: bool = True):
    cfg = CONFIGS / config
    _cli("simulate", "--config", cfg, "--out", out)
    if build:
        _cli("library", "--config", cfg, "--out", out)
    return out


@pytest.fixture(scope="session")
def fig3_dir(tmp_path_factory):
    out = _pipeline(tmp_path_factory.mktemp("fig3"), "fig3.yaml")
    _cli("locate", "--config", CONFIGS / "fig3.yaml", "--out", out)
    return out


@pytest.fixture(scope="session")
def fig4_dir(tmp_path_factory):
    out = _pipeline(tmp_path_factory.mktemp("fig4"), "fig4.yaml")
    _cli("locate", "--config", CONFIGS / "fig4.yaml", "--out", out)
    return out


@pytest.fixture(scope="session")
def read_json():
    return lambda p: json.loads(Path(p).read_text())


@pytest.fixture(scope="session")
def run_cli():
    return _cli
