import numpy as np
import pytest

from helpers import make_corridor


@pytest.fixture(scope="session")
def corridor(tmp_path_factory):
    """Noise-free 6-view corridor shared by read-only tests."""
    d = tmp_path_factory.mktemp("corridor")
    spec, manifest, frames = make_corridor(d)
    return {"dir": d, "spec": spec, "manifest": manifest, "frames": frames}


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)
