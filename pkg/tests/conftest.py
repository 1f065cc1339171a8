import numpy as np
import pytest
import torch

from misrsat.registration import ShiftNet, train_shiftnet

torch.set_num_threads(1)

SHIFTNET_WIDTH = 16
SHIFTNET_MAX_SHIFT = 4.5


@pytest.fixture(scope="session")
def trained_shiftnet():
    """Reduced-width ShiftNet trained once per session on synthetic pairs."""
    net = ShiftNet(3, width=SHIFTNET_WIDTH, fc_width=4 * SHIFTNET_WIDTH)
    train_shiftnet(net, steps=1000, seed=0, size=32, max_shift=SHIFTNET_MAX_SHIFT, log_every=0)
    return net.eval()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
