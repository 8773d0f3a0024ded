import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from uwdiff.data import ConfigError
from uwdiff.losses import (IdentityExtractor, LossWeights, build_extractor, contra_loss, hist_loss,
                           perc_loss, soft_histogram, total_loss)
from oracles import central_difference, max_rel_error


def _img(seed, shape=(2, 3, 8, 8), dtype=torch.float64):
    g = torch.Generator().manual_seed(seed)
    return torch.rand(shape, generator=g, dtype=dtype)


def test_soft_histogram_is_distribution():
    h = soft_histogram(_img(0))
    assert h.shape == (2, 3, 32)
    assert torch.allclose(h.sum(-1), torch.ones(2, 3, dtype=torch.float64))
    assert float(h.min()) >= 0


def test_soft_histogram_hard_limit():
    # far below the bin spacing the soft histogram is the hard one
    x = torch.tensor([[[[0.01, 0.02], [0.51, 0.99]]]], dtype=torch.float64)
    h = soft_histogram(x, bins=4, bandwidth=1e-3)[0, 0]
    assert h.tolist() == pytest.approx([0.5, 0.0, 0.25, 0.25], abs=1e-9)


def test_hist_identity_and_positivity():
    a = _img(1)
    assert float(hist_loss(a, a)) == pytest.approx(0.0, abs=1e-8)
    assert float(hist_loss(a, a.flip(0) * 0.3)) > 0.1


def test_hist_is_per_channel_sum():
    a, b = _img(2), _img(3)
    per = [hist_loss(a[:, c:c + 1], b[:, c:c + 1], reduction="none") for c in range(3)]
    assert torch.allclose(hist_loss(a, b, reduction="none"), sum(per))


def test_hist_rejects_bad_params():
    with pytest.raises(ConfigError):
        soft_histogram(_img(0), bins=1)
    with pytest.raises(ConfigError):
        soft_histogram(_img(0), bandwidth=0.0)


def test_identity_extractor_perc_is_l1():
    a, b = _img(4), _img(5)
    assert float(perc_loss(a, b, IdentityExtractor())) == pytest.approx(float((a - b).abs().mean()))


def test_contra_hand_values():
    ex = IdentityExtractor()
    a = torch.tensor([[[[1.0, 0.0]]]], dtype=torch.float64)
    b = torch.tensor([[[[0.0, 1.0]]]], dtype=torch.float64)
    assert float(contra_loss(a, b, ex)) == pytest.approx(1.0)
    assert float(contra_loss(a, -a, ex)) == pytest.approx(2.0)
    assert float(contra_loss(a, 3 * a, ex)) == pytest.approx(0.0, abs=1e-12)


def test_contra_zero_norm_warns():
    z = torch.zeros(1, 3, 2, 2)
    with pytest.warns(RuntimeWarning):
        v = contra_loss(z, torch.ones_like(z), IdentityExtractor())
    assert math.isfinite(float(v))


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000))
def test_contra_range(seed):
    g = torch.Generator().manual_seed(seed)
    a = torch.randn(4, 3, 4, 4, generator=g)
    b = torch.randn(4, 3, 4, 4, generator=g)
    v = contra_loss(a, b, IdentityExtractor(), reduction="none")
    assert bool(((v >= 0) & (v <= 2)).all())


def test_shape_mismatch():
    with pytest.raises(ValueError):
        hist_loss(_img(0), _img(0, (2, 3, 4, 4)))


def test_total_is_weighted_sum():
    a, b = _img(6), _img(7)
    w = LossWeights(0.7, 0.2, 1.3)
    rep = total_loss(a, b, w, IdentityExtractor(0.5))
    assert float(rep.total) == float(0.7 * rep.perc + 0.2 * rep.hist + 1.3 * rep.contra)


def test_total_zero_weights_not_in_graph():
    a = _img(8).requires_grad_(True)
    rep = total_loss(a, _img(9), LossWeights(0.0, 1.0, 0.0), IdentityExtractor(0.5))
    assert rep.perc.grad_fn is None and rep.contra.grad_fn is None
    assert rep.hist.grad_fn is not None


def test_weights_validation():
    with pytest.raises(ConfigError):
        LossWeights(-1, 1, 1)
    with pytest.raises(ConfigError):
        LossWeights(0, 0, 0)


def test_random_extractor_is_seeded_and_frozen():
    a = build_extractor("random", seed=3)
    b = build_extractor("random", seed=3)
    x = _img(0, (1, 3, 16, 16), torch.float32)
    assert torch.equal(a(x), b(x))
    assert not any(p.requires_grad for p in a.parameters())
    a.train()
    assert not a.training
    assert a(x).shape == (1, 256, 4, 4)


def test_vgg_mode_without_weights(monkeypatch, tmp_path):
    monkeypatch.setenv("UWDIFF_CACHE", str(tmp_path))
    monkeypatch.setattr(torch.hub, "get_dir", lambda: str(tmp_path))
    with pytest.raises(EnvironmentError):
        build_extractor("vgg16")
    with pytest.warns(RuntimeWarning):
        ex = build_extractor("auto")
    assert ex.kind == "random"
    with pytest.raises(ConfigError):
        build_extractor("resnet")


@pytest.mark.parametrize("name", ["hist", "perc", "contra"])
def test_finite_difference(name):
    ex = IdentityExtractor(0.5)
    fns = {"hist": lambda p, r: hist_loss(p, r, bandwidth=0.1),
           "perc": lambda p, r: perc_loss(p, r, ex),
           "contra": lambda p, r: contra_loss(p, r, ex)}
    f = fns[name]
    pred, ref = _img(10, (1, 3, 8, 8)), _img(11, (1, 3, 8, 8))
    x = pred.clone().requires_grad_(True)
    f(x, ref).backward()
    idx = list(range(0, 192, 17))
    numeric = [central_difference(lambda z: f(z, ref), pred, i) for i in idx]
    assert max_rel_error(x.grad.view(-1)[idx].numpy(), np.array(numeric)) <= 1e-3
