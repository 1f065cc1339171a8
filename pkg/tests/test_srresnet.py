import datetime as dt
import itertools

import numpy as np
import pytest
import torch
import torch.nn as nn
from hypothesis import given, settings, strategies as st

from gradcheck_util import check, seeded
from misrsat.data import Raster, Revisit, Scene
from misrsat.metrics import ssim_loss
from misrsat.srresnet import SRResNet, SRResNetConfig, pixel_shuffle, select_input


def _brute_shuffle(x: np.ndarray, r: int) -> np.ndarray:
    C4, h, w = x.shape
    C = C4 // (r * r)
    out = np.empty((C, r * h, r * w), x.dtype)
    for c, i, j, di, dj in itertools.product(range(C), range(h), range(w), range(r), range(r)):
        out[c, r * i + di, r * j + dj] = x[c * r * r + di * r + dj, i, j]
    return out


def _scene(fractions, dates=None):
    revs = []
    for k, f in enumerate(fractions):
        m = np.zeros((4, 5), bool)
        m.flat[: int(round(f * 20))] = True
        d = dates[k] if dates else dt.date(2020, 3, 1 + k)
        revs.append(Revisit(Raster(np.full((1, 4, 5), k, np.float32), 10.0), d, m))
    return Scene("x", tuple(revs), Raster(np.zeros((1, 8, 10)), 5.0))


def test_forward_shape():
    torch.manual_seed(0)
    net = SRResNet(SRResNetConfig(in_bands=3, hidden=16, residual_blocks=2, sr_factor=2))
    out = net(torch.rand(3, 32, 32))
    assert out.shape == (3, 64, 64) and torch.isfinite(out).all()


@pytest.mark.parametrize("s", [3, 4])
def test_other_factors(s):
    net = SRResNet(SRResNetConfig(in_bands=1, hidden=4, residual_blocks=1, sr_factor=s))
    assert net(torch.rand(2, 1, 5, 6)).shape == (2, 1, 5 * s, 6 * s)


def test_config_validation():
    for bad in (dict(sr_factor=5), dict(sr_factor=6), dict(hidden=0), dict(residual_blocks=0)):
        with pytest.raises(ValueError):
            SRResNetConfig(**bad)


def test_band_mismatch():
    with pytest.raises(ValueError):
        SRResNet(SRResNetConfig(in_bands=3, hidden=4, residual_blocks=1))(torch.rand(1, 8, 8))


def test_pixel_shuffle_index_oracle():
    x = np.arange(16, dtype=np.float32).reshape(1 * 4, 2, 2)
    np.testing.assert_array_equal(pixel_shuffle(torch.from_numpy(x), 2).numpy(), _brute_shuffle(x, 2))


@settings(max_examples=30, deadline=None)
@given(C=st.integers(1, 3), r=st.sampled_from([2, 3]), h=st.integers(1, 4), w=st.integers(1, 4), seed=st.integers(0, 1000))
def test_pixel_shuffle_is_bijection(C, r, h, w, seed):
    x = np.random.default_rng(seed).random((C * r * r, h, w))
    y = pixel_shuffle(torch.from_numpy(x), r).numpy()
    np.testing.assert_array_equal(y, _brute_shuffle(x, r))
    np.testing.assert_array_equal(np.sort(y.ravel()), np.sort(x.ravel()))


def test_zero_residual_branches_make_trunk_identity():
    net = SRResNet(SRResNetConfig(in_bands=1, hidden=4, residual_blocks=3))
    for blk in net.trunk:
        for m in blk.body:
            if isinstance(m, nn.Conv2d):
                nn.init.zeros_(m.weight)
                nn.init.zeros_(m.bias)
    x = torch.rand(2, 4, 6, 6)
    assert torch.equal(net.trunk(x), x)


def test_overfit_one_batch():
    torch.manual_seed(0)
    net = SRResNet(SRResNetConfig(in_bands=1, hidden=16, residual_blocks=2))
    lr = torch.rand(4, 1, 12, 12)
    hr = torch.nn.functional.interpolate(lr, scale_factor=2, mode="bilinear")
    opt = torch.optim.Adam(net.parameters(), lr=1e-3)
    losses = []
    for _ in range(200):
        loss = ssim_loss(net(lr), hr)
        opt.zero_grad()
        loss.backward()
        opt.step()
        losses.append(loss.item())
    assert losses[-1] <= 0.5 * losses[0]


def test_stem_weight_gradient_check():
    torch.manual_seed(0)
    net = SRResNet(SRResNetConfig(in_bands=1, hidden=2, residual_blocks=1)).double()
    lr = seeded(1, 1, 4, 4, seed=1)
    hr = seeded(1, 1, 8, 8, seed=2)
    w = net.stem[0].weight
    assert check(lambda: ssim_loss(net(lr), hr, window=7), w) < 1e-4


def test_select_input_examples():
    s = _scene([0.2, 0.0])
    assert select_input(s) is s.revisits[1]
    tie = _scene([0.1, 0.1], dates=[dt.date(2020, 5, 2), dt.date(2020, 5, 1)])
    assert select_input(tie) is tie.revisits[1]
    one = _scene([0.9])
    assert select_input(one) is one.revisits[0]
