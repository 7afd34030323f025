import numpy as np
import pytest

from fscil.datagen import SyntheticSpec, generate
from fscil.model import ExtractorConfig

_ACCEPTANCE: dict[str, tuple[bool, str]] = {}


@pytest.fixture(scope="session")
def acceptance_log():
    """Record one verdict per acceptance criterion for the terminal summary."""

    def record(criterion: str, passed: bool, detail: str = "") -> None:
        _ACCEPTANCE[criterion] = (passed, detail)

    return record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(_ACCEPTANCE, key=lambda k: int(k.split()[0])):
        passed, detail = _ACCEPTANCE[name]
        terminalreporter.write_line(f"{'PASS' if passed else 'FAIL'}  {name}  {detail}")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_mlp_config():
    return ExtractorConfig(4, 4, 1, "mlp", [6], 5)


@pytest.fixture
def tiny_conv_config():
    return ExtractorConfig(4, 4, 1, "conv-small", [3], 4)


@pytest.fixture(scope="session")
def small_spec():
    return SyntheticSpec(n_base=6, n_way=2, k_shot=3, sessions=2, h=4, w=4, c=1, grid=2,
                         noise_sigma=0.1, queries_per_class=6, base_per_class=8, seed=3)


@pytest.fixture(scope="session")
def small_bench(small_spec):
    return generate(small_spec)
