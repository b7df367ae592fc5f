import os

os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")
os.environ.setdefault("OMP_NUM_THREADS", "1")
os.environ.setdefault("MKL_NUM_THREADS", "1")

import numpy as np
import pytest

from rotpretext.synth import SynthSpec, generate_synthetic_dataset
from rotpretext.tensor import Tensor, get_tape


@pytest.fixture(autouse=True)
def _clean_tape():
    get_tape().clear()
    yield
    get_tape().clear()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def probe(out: Tensor, weights: np.ndarray) -> Tensor:
    """Scalar ``sum(out * weights)``: a loss whose gradient w.r.t. out is ``weights``."""
    return (out * Tensor(weights, dtype=out.dtype)).sum()


@pytest.fixture(scope="session")
def small_synth(tmp_path_factory):
    root = tmp_path_factory.mktemp("synth")
    spec = SynthSpec(seed=3, clips_per_class=6, frames=12, height=40, width=40)
    train = generate_synthetic_dataset(spec, root, "train")
    test = generate_synthetic_dataset(SynthSpec(seed=3, clips_per_class=3, frames=12), root, "test")
    return train, test
