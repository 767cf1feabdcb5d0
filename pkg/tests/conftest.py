import numpy as np
import pytest
import torch

torch.set_num_threads(1)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def unit_square():
    from tspimprove.tsp_core import Instance
    return Instance([[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]], "square")
