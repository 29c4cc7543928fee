import numpy as np
import pytest

from dbnseg.data import generate_domain_dataset
from dbnseg.train import TrainConfig

TINY = dict(epochs=2, batch_size=4, base_channels=4, low_channels=4, num_fusion_blocks=1, key_channels=4,
            crop_size=12)


@pytest.fixture(scope="session")
def tiny_data(tmp_path_factory):
    """Three 16x16 domains, four training scenes each; the last domain is held out."""
    root = tmp_path_factory.mktemp("tiny_data")
    generate_domain_dataset(root, seed=1, per_domain=4, domains=3, size=16)
    return root


@pytest.fixture
def tiny_config():
    return TrainConfig(**TINY)


@pytest.fixture(autouse=True)
def _quiet_unseen_domain(recwarn):
    # held-out domains trigger UnseenDomainWarning by design; tests that care use pytest.warns
    yield


def pytest_terminal_summary(terminalreporter):
    import sys

    module = sys.modules.get("test_acceptance") or sys.modules.get("tests.test_acceptance")
    lines = getattr(module, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
