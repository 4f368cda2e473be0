import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

import corpus  # noqa: E402

_criteria: dict[str, tuple[bool, str]] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or rep.when != "call" and not (rep.when == "setup" and rep.failed):
        return
    key = marker.args[0]
    ok = rep.passed
    prev = _criteria.get(key)
    if prev is not None:
        ok = ok and prev[0]
    _criteria[key] = (ok, marker.args[1])


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(_criteria, key=lambda k: int(k)):
        ok, text = _criteria[key]
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  criterion {key}: {text}")


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, text): acceptance criterion")


@pytest.fixture(scope="session")
def corpus_3d(tmp_path_factory):
    base = tmp_path_factory.mktemp("corpus3d")
    data, masks, info = corpus.build_corpus(base)
    return base, data, masks, info


@pytest.fixture(scope="session")
def runs_3d(corpus_3d):
    """The same corpus processed with one worker and with four."""
    from bodycomp.pipeline import RunConfig, run

    base, data, _, _ = corpus_3d
    out = {}
    for n in (1, 4):
        cfg = RunConfig("process_3d", data, output_root=base / f"out_w{n}", workers=n)
        out[n] = run(cfg)
    return out
