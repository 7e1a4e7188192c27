import numpy as np
import pytest
import torch

from diffhpe.skeleton import load_skeleton, standard_h36m_skeleton

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def h36m():
    return standard_h36m_skeleton()


@pytest.fixture(scope="session")
def mini5():
    return load_skeleton("mini5")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_rotation(rng):
    q, r = np.linalg.qr(rng.standard_normal((3, 3)))
    q = q @ np.diag(np.sign(np.diag(r)))
    if np.linalg.det(q) < 0:
        q[:, 0] *= -1
    return q
