"""Full-network analytic-vs-numeric gradient agreement.

Central finite differences of the total training loss, taken at a random
subsample of parameter coordinates in float64, must match autograd to a
relative error below 1e-3 on 16 x 16 inputs.
"""

import numpy as np
import pytest
import torch

from edgecollab.loss import LossConfig, total_loss_nonrecurrent, total_loss_recurrent
from edgecollab.models import (
    NonRecurrentConfig,
    NonRecurrentEdgeNet,
    RecurrentConfig,
    RecurrentEdgeNet,
)

COORDS_PER_ARRAY = 3
FD_STEP = 1e-6
REL_TOL = 1e-3


def _check_gradients(net, loss_fn, seed):
    rng = np.random.default_rng(seed)
    net = net.double()
    img = torch.tensor(rng.random((16, 16, 3)), dtype=torch.float64)
    y = (rng.random((16, 16)) < 0.3).astype(np.float64)
    y_soft = np.clip(y + rng.normal(0, 0.05, size=(16, 16)), 0.0, 1.0)
    cfg = LossConfig(lam=1.1)

    def loss_value():
        return loss_fn(net(img.numpy()), y_soft, y, cfg)

    net.zero_grad()
    loss_value().backward()

    checked = 0
    for name, param in net.named_parameters():
        grad = param.grad
        assert grad is not None, f"no gradient reached {name}"
        flat = param.data.view(-1)
        gflat = grad.view(-1)
        idx = rng.choice(flat.numel(), size=min(COORDS_PER_ARRAY, flat.numel()),
                         replace=False)
        for i in idx:
            orig = float(flat[i])
            with torch.no_grad():
                flat[i] = orig + FD_STEP
                up = float(loss_value())
                flat[i] = orig - FD_STEP
                down = float(loss_value())
                flat[i] = orig
            fd = (up - down) / (2 * FD_STEP)
            scale = max(abs(fd), abs(float(gflat[i])), 1e-6)
            rel = abs(float(gflat[i]) - fd) / scale
            assert rel < REL_TOL, f"{name}[{i}]: autograd {float(gflat[i])} vs fd {fd}"
            checked += 1
    assert checked > 0


@pytest.mark.slow
def test_recurrent_gradients_match_finite_differences():
    net = RecurrentEdgeNet(RecurrentConfig())
    net.init_parameters(0)
    _check_gradients(net, total_loss_recurrent, seed=0)


@pytest.mark.slow
def test_nonrecurrent_gradients_match_finite_differences():
    net = NonRecurrentEdgeNet(NonRecurrentConfig())
    net.init_parameters(0)
    _check_gradients(net, total_loss_nonrecurrent, seed=1)


def test_small_recurrent_gradients_match_finite_differences():
    net = RecurrentEdgeNet(
        RecurrentConfig(steps=3, encoder_channels=8, recurrent_channels=12,
                        decoder_channels=6)
    )
    net.init_parameters(2)
    _check_gradients(net, total_loss_recurrent, seed=2)


def test_small_nonrecurrent_gradients_match_finite_differences():
    net = NonRecurrentEdgeNet(
        NonRecurrentConfig(stage_channels=(6, 8, 10, 12), decoder_channels=6)
    )
    net.init_parameters(3)
    _check_gradients(net, total_loss_nonrecurrent, seed=3)
