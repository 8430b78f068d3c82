import pytest

from helpers import build_synth_pipeline


@pytest.fixture(scope="session")
def synth_paths(tmp_path_factory):
    """Small synthetic dataset with delta dumps, shared read-only by tests."""
    root = tmp_path_factory.mktemp("synth")
    return build_synth_pipeline(str(root), seed=1, utts=(60, 20, 20))
