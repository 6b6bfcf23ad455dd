import pytest
import torch


@pytest.fixture(autouse=True, scope="session")
def _single_threaded_torch():
    # Bitwise-reproducibility assertions rely on single-threaded execution.
    torch.set_num_threads(1)
    yield
