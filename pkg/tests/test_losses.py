import math

import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from d24fad.errors import ConfigError, NumericError, PreconditionError, ShapeError
from d24fad.losses import (LossConfig, cosine_sim, pairwise_dissimilarity, ssd_loss, total_loss,
                           tsd_loss)
from d24fad.student import SupportFeatureBank
from d24fad.teacher import FeaturePyramid

from conftest import rand_pyramid
from oracles import ssd_oracle, tsd_oracle


def test_cosine_examples():
    assert float(cosine_sim(torch.tensor([1.0, 0.0]), torch.tensor([1.0, 0.0]))) == pytest.approx(1.0)
    assert float(cosine_sim(torch.tensor([1.0, 0.0]), torch.tensor([0.0, 1.0]))) == 0.0
    assert float(cosine_sim(torch.tensor([1.0, 0.0]), torch.tensor([-2.0, 0.0]))) == pytest.approx(-1.0)


def test_cosine_zero_vector_is_zero():
    assert float(cosine_sim(torch.zeros(3), torch.ones(3))) == 0.0


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-10, 10), min_size=3, max_size=3), st.lists(st.floats(-10, 10), min_size=3, max_size=3),
       st.floats(0.01, 100))
def test_cosine_symmetric_and_scale_invariant(a, b, c):
    a = torch.tensor(a, dtype=torch.float64)
    b = torch.tensor(b, dtype=torch.float64)
    s = float(cosine_sim(a, b))
    assert -1 - 1e-9 <= s <= 1 + 1e-9
    assert float(cosine_sim(b, a)) == pytest.approx(s, abs=1e-12)
    if a.norm() > 1e-3 and b.norm() > 1e-3:
        assert float(cosine_sim(c * a, b)) == pytest.approx(s, abs=1e-6)


def test_tsd_identity_is_zero():
    g = torch.Generator().manual_seed(0)
    p = rand_pyramid([(4, 3, 3), (8, 2, 2)], g)
    assert float(tsd_loss(p, [t.clone() for t in p])) < 1e-6


def test_tsd_orthogonal_single_location():
    x = [torch.tensor([1.0, 0.0]).reshape(2, 1, 1)]
    z = [torch.tensor([0.0, 1.0]).reshape(2, 1, 1)]
    assert float(tsd_loss(x, z)) == pytest.approx(1.0)


def test_tsd_matches_oracle_random():
    g = torch.Generator().manual_seed(1)
    shapes = [(3, 4, 4), (5, 2, 2), (6, 1, 1)]
    x, z = rand_pyramid(shapes, g), rand_pyramid(shapes, g)
    assert abs(float(tsd_loss(x, z)) - tsd_oracle([t.tolist() for t in x], [t.tolist() for t in z])) < 1e-10


def test_tsd_accepts_feature_pyramids():
    g = torch.Generator().manual_seed(2)
    x = FeaturePyramid(rand_pyramid([(3, 2, 2)], g), ["a"], "teacher")
    z = FeaturePyramid(rand_pyramid([(3, 2, 2)], g), ["a"], "student")
    assert float(tsd_loss(x, z)) == pytest.approx(tsd_oracle([x.levels[0].tolist()], [z.levels[0].tolist()]),
                                                  abs=1e-12)


def test_tsd_no_gradient_to_teacher():
    g = torch.Generator().manual_seed(3)
    x = [t.requires_grad_() for t in rand_pyramid([(3, 2, 2)], g)]
    z = [t.requires_grad_() for t in rand_pyramid([(3, 2, 2)], g)]
    tsd_loss(x, z).backward()
    assert x[0].grad is None
    assert z[0].grad is not None and z[0].grad.abs().sum() > 0


def test_tsd_shape_mismatch():
    with pytest.raises(ShapeError):
        tsd_loss([torch.zeros(2, 2, 2)], [torch.zeros(2, 3, 3)])
    with pytest.raises(ShapeError):
        tsd_loss([torch.zeros(2, 2, 2)], [torch.zeros(2, 2, 2), torch.zeros(2, 1, 1)])


def test_tsd_range_bound():
    g = torch.Generator().manual_seed(4)
    x = rand_pyramid([(2, 3, 3), (2, 1, 1)], g)
    # antiparallel everywhere: the maximum 2 per level
    assert float(tsd_loss(x, [-t for t in x])) == pytest.approx(4.0)


def test_ssd_examples():
    q = [torch.tensor([1.0, 0.0]).reshape(2, 1, 1)]
    bank = SupportFeatureBank([torch.stack([q[0], torch.tensor([0.0, 1.0]).reshape(2, 1, 1)])], ["a", "b"])
    assert float(ssd_loss(bank, q)) == pytest.approx(0.5)
    same = SupportFeatureBank([torch.stack([q[0], q[0], q[0]])], ["a", "b", "c"])
    assert float(ssd_loss(same, q)) == pytest.approx(0.0, abs=1e-7)


def test_ssd_matches_oracle_random():
    g = torch.Generator().manual_seed(5)
    shapes = [(3, 3, 3), (4, 2, 2)]
    sup = rand_pyramid(shapes, g, batch=3)
    q = rand_pyramid(shapes, g)
    ref = ssd_oracle([[lv[k].tolist() for lv in sup] for k in range(3)], [t.tolist() for t in q])
    assert abs(float(ssd_loss(sup, q)) - ref) < 1e-10


def test_ssd_gradient_reaches_both_sides():
    g = torch.Generator().manual_seed(6)
    sup = [t.requires_grad_() for t in rand_pyramid([(3, 2, 2)], g, batch=2)]
    q = [t.requires_grad_() for t in rand_pyramid([(3, 2, 2)], g)]
    ssd_loss(sup, q).backward()
    assert sup[0].grad.abs().sum() > 0 and q[0].grad.abs().sum() > 0


def test_ssd_stop_support_grad_option():
    g = torch.Generator().manual_seed(6)
    sup = [t.requires_grad_() for t in rand_pyramid([(3, 2, 2)], g, batch=2)]
    q = [t.requires_grad_() for t in rand_pyramid([(3, 2, 2)], g)]
    ssd_loss(sup, q, stop_support_grad=True).backward()
    assert sup[0].grad is None


def test_ssd_empty_bank():
    with pytest.raises(PreconditionError):
        ssd_loss([torch.zeros(0, 2, 1, 1)], [torch.zeros(2, 1, 1)])


def test_pairwise_dissimilarity_shape():
    d = pairwise_dissimilarity(torch.randn(3, 4, 5, 5), torch.randn(2, 4, 5, 5))
    assert d.shape == (2, 3, 5, 5)


def test_total_loss_examples():
    cfg = LossConfig(lambda_weight=0.1)
    assert float(total_loss(cfg, torch.tensor(2.0), torch.tensor(1.0))) == pytest.approx(1.2)
    assert float(total_loss(LossConfig(lambda_weight=0.0), torch.tensor(5.0), torch.tensor(1.0))) == 1.0
    assert float(total_loss(LossConfig(lambda_weight=1.0), torch.tensor(0.0), torch.tensor(0.0))) == 0.0


def test_total_loss_names_bad_term():
    with pytest.raises(NumericError) as e:
        total_loss(LossConfig(), torch.tensor(float("nan")), torch.tensor(1.0))
    assert e.value.term == "tsd"
    with pytest.raises(NumericError) as e:
        total_loss(LossConfig(use_l2w=False), torch.tensor(1.0), torch.tensor(float("inf")))
    assert e.value.term == "ssd"
    with pytest.raises(NumericError) as e:
        total_loss(LossConfig(), torch.tensor(1.0), torch.tensor(float("inf")))
    assert e.value.term == "ssd_l2w"


@pytest.mark.parametrize("kw", [{"lambda_weight": -1}, {"lambda_weight": math.inf}, {"epsilon": 0},
                                {"l2w_variant": "nope"}])
def test_loss_config_validation(kw):
    with pytest.raises(ConfigError):
        LossConfig(**kw)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.01, 50))
def test_location_scale_invariance(seed, scale):
    g = torch.Generator().manual_seed(seed)
    x = rand_pyramid([(3, 2, 2)], g)
    z = rand_pyramid([(3, 2, 2)], g)
    z2 = [z[0].clone()]
    z2[0][:, 1, 0] *= scale
    assert float(tsd_loss(x, z2)) == pytest.approx(float(tsd_loss(x, z)), abs=1e-6)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 4))
def test_ranges(seed, k):
    g = torch.Generator().manual_seed(seed)
    shapes = [(2, 2, 2), (3, 1, 1)]
    x, z = rand_pyramid(shapes, g), rand_pyramid(shapes, g)
    assert 0 <= float(tsd_loss(x, z)) <= 2 * len(shapes)
    assert 0 <= float(ssd_loss(rand_pyramid(shapes, g, batch=k), z)) <= 2 * len(shapes)
