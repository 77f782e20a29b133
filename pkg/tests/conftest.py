import numpy as np
import pytest
import torch

_INITIAL_THREADS = torch.get_num_threads()


@pytest.fixture(autouse=True)
def _stable_seeds():
    torch.manual_seed(1234)
    np.random.seed(1234)


@pytest.fixture(autouse=True)
def _restore_torch_settings():
    # deterministic-mode tests flip global torch state; undo it per test
    yield
    torch.use_deterministic_algorithms(False)
    torch.set_num_threads(_INITIAL_THREADS)
