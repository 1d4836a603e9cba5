import numpy as np
import pytest

from hiddencut.encoder import ModelConfig, init_params


@pytest.fixture
def small_cfg():
    return ModelConfig(num_layers=2, hidden_dim=16, num_heads=2, ffn_dim=24, vocab_size=20,
                       max_len=12, num_classes=2)


@pytest.fixture
def small_params(small_cfg):
    return init_params(small_cfg, np.random.default_rng(42), std=0.3)


@pytest.fixture
def batch_ids():
    ids = np.array([[1, 5, 6, 7, 8, 2], [1, 9, 4, 2, 0, 0]])
    return ids, ids != 0


# acceptance reporting: one PASS/FAIL line per criterion in the terminal summary
_OUTCOMES: dict[int, list[bool]] = {}
_NOTES: dict[int, list[str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion number")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    rep = (yield).get_result()
    m = item.get_closest_marker("criterion")
    if m and (rep.when == "call" or rep.failed):
        _OUTCOMES.setdefault(m.args[0], []).append(rep.passed)


@pytest.fixture
def note(request):
    """Attach a one-line measurement to this test's criterion report."""
    m = request.node.get_closest_marker("criterion")

    def add(text: str) -> None:
        if m:
            _NOTES.setdefault(m.args[0], []).append(text)

    return add


def pytest_terminal_summary(terminalreporter):
    if not _OUTCOMES:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_OUTCOMES):
        status = "PASS" if all(_OUTCOMES[n]) else "FAIL"
        detail = "; ".join(_NOTES.get(n, []))
        terminalreporter.write_line(f"criterion {n:2d}: {status}  {detail}".rstrip())
