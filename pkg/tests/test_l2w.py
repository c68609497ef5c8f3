import json

import pytest
import torch

from d24fad.errors import ConfigError, NumericError, PreconditionError
from d24fad.l2w import (L2WParams, SupportWeights, compute_weights, export_weights, read_weights,
                        ssd_l2w_loss, weighted_support)
from d24fad.losses import ssd_loss

from conftest import rand_pyramid
from oracles import l2w_weights_oracle, ssd_l2w_oracle

SHAPES = [(3, 3, 3), (4, 2, 2), (5, 1, 1)]
VARIANTS = ["scaled_dot", "gaussian", "embedded_gaussian", "concatenation"]


def params(variant="scaled_dot", noise=0.0, shapes=SHAPES, seed=0):
    return L2WParams(shapes, variant, seed=seed, init_noise=noise, dtype=torch.float64)


def small(shapes, gen, batch=None, scale=0.3):
    return [t * scale for t in rand_pyramid(shapes, gen, batch)]


@pytest.mark.parametrize("variant", VARIANTS)
def test_identical_supports_give_uniform_weights(variant):
    g = torch.Generator().manual_seed(0)
    q = small(SHAPES, g)
    s = small(SHAPES, g, batch=1)
    bank = [torch.cat([lv, lv]) for lv in s]
    for w in compute_weights(params(variant, 0.01), q, bank).per_level:
        assert w.tolist() == [[0.5, 0.5]]


@pytest.mark.parametrize("variant", VARIANTS)
def test_single_support_weight_one(variant):
    g = torch.Generator().manual_seed(1)
    for w in compute_weights(params(variant, 0.01), small(SHAPES, g), small(SHAPES, g, 1)).per_level:
        assert w.tolist() == [[1.0]]


def test_scaled_dot_matches_oracle():
    g = torch.Generator().manual_seed(2)
    q, s = rand_pyramid(SHAPES, g), rand_pyramid(SHAPES, g, batch=3)
    p = params("scaled_dot", 0.05)
    got = compute_weights(p, q, s).per_level
    for i in range(len(SHAPES)):
        phi = p.phi[i].weight[:, :, 0, 0].tolist()
        ref = l2w_weights_oracle(q[i].tolist(), [s[i][k].tolist() for k in range(3)], phi)
        assert max(abs(a - b) for a, b in zip(got[i][0].tolist(), ref)) < 1e-10


def test_ssd_l2w_matches_oracle():
    g = torch.Generator().manual_seed(3)
    q, s = small(SHAPES, g), small(SHAPES, g, batch=2)
    p = params("scaled_dot", 0.05)
    phis = [p.phi[i].weight[:, :, 0, 0].tolist() for i in range(len(SHAPES))]
    ref = ssd_l2w_oracle([[lv[k].tolist() for lv in s] for k in range(2)], [t.tolist() for t in q], phis)
    assert abs(float(ssd_l2w_loss(p, q, s).detach()) - ref) < 1e-10


@pytest.mark.parametrize("variant", VARIANTS)
def test_weights_normalized_and_permutation_equivariant(variant):
    g = torch.Generator().manual_seed(4)
    p = params(variant, 0.05)
    q, s = small(SHAPES, g, batch=2), small(SHAPES, g, batch=4)
    w = compute_weights(p, q, s).per_level
    perm = torch.tensor([2, 0, 3, 1])
    wp = compute_weights(p, q, [lv[perm] for lv in s]).per_level
    for a, b in zip(w, wp):
        assert (a >= 0).all()
        assert torch.allclose(a.sum(dim=1), torch.ones(2, dtype=torch.float64), atol=1e-6)
        assert torch.allclose(a[:, perm], b, atol=1e-8)
    loss = ssd_l2w_loss(p, q, s)
    assert abs(float(loss) - float(ssd_l2w_loss(p, q, [lv[perm] for lv in s]))) < 1e-8


@pytest.mark.parametrize("variant", VARIANTS)
def test_k1_equals_unweighted(variant):
    g = torch.Generator().manual_seed(5)
    q, s = small(SHAPES, g), small(SHAPES, g, batch=1)
    assert abs(float(ssd_l2w_loss(params(variant, 0.05), q, s)) - float(ssd_loss(s, q))) < 1e-8


def test_supports_equal_query_give_zero_loss():
    g = torch.Generator().manual_seed(6)
    q = rand_pyramid(SHAPES, g)
    bank = [torch.stack([lv, lv, lv]) for lv in q]
    assert float(ssd_l2w_loss(params("scaled_dot", 0.1), q, bank)) < 1e-7


def test_relevance_monotonicity():
    hits = 0
    for seed in range(200):
        g = torch.Generator().manual_seed(seed)
        q = rand_pyramid(SHAPES, g)
        noise = rand_pyramid(SHAPES, g)
        bank = [torch.stack([a, b]) for a, b in zip(q, noise)]
        w = compute_weights(params("scaled_dot", 0.0), q, bank).per_level
        hits += all(float(lv[0, 0]) > float(lv[0, 1]) for lv in w)
    assert hits / 200 >= 0.95


def test_variant_order_consistency():
    agree = total = 0
    for seed in range(50):
        g = torch.Generator().manual_seed(seed)
        q, s = small(SHAPES, g, scale=0.2), small(SHAPES, g, batch=3, scale=0.2)
        a = compute_weights(params("scaled_dot"), q, s).per_level
        b = compute_weights(params("embedded_gaussian"), q, s).per_level
        for x, y in zip(a, b):
            total += 1
            agree += torch.equal(torch.argsort(x[0]), torch.argsort(y[0]))
    assert agree == total


def test_gaussian_clamps_large_logits():
    g = torch.Generator().manual_seed(7)
    q, s = rand_pyramid(SHAPES, g), rand_pyramid(SHAPES, g, batch=3)
    w = compute_weights(params("gaussian"), [t * 1e3 for t in q], [t * 1e3 for t in s]).per_level
    for lv in w:
        assert torch.isfinite(lv).all()


def test_nonfinite_logits_raise():
    g = torch.Generator().manual_seed(8)
    q, s = rand_pyramid(SHAPES, g), rand_pyramid(SHAPES, g, batch=2)
    q[0][0, 0, 0] = float("nan")
    with pytest.raises(NumericError):
        compute_weights(params(), q, s)


def test_empty_bank_raises():
    g = torch.Generator().manual_seed(9)
    with pytest.raises(PreconditionError):
        compute_weights(params(), rand_pyramid(SHAPES, g), [torch.zeros(0, *s, dtype=torch.float64) for s in SHAPES])


def test_parameter_layout():
    assert params("scaled_dot").theta is None and params("scaled_dot").concat_weight_vector is None
    assert params("embedded_gaussian").theta is not None
    p = params("concatenation")
    assert [v.numel() for v in p.concat_weight_vector] == [2 * c * h * w for c, h, w in SHAPES]
    for conv, (c, h, w) in zip(p.phi, SHAPES):
        assert conv(torch.zeros(1, c, h, w, dtype=torch.float64)).shape == (1, c, h, w)
    with pytest.raises(ConfigError):
        L2WParams(SHAPES, "softmaxish")


def test_weighted_support_is_convex_combination():
    g = torch.Generator().manual_seed(10)
    s = rand_pyramid([(2, 2, 2)], g, batch=3)
    w = SupportWeights([torch.tensor([[0.2, 0.3, 0.5]], dtype=torch.float64)])
    ref = 0.2 * s[0][0] + 0.3 * s[0][1] + 0.5 * s[0][2]
    assert torch.allclose(weighted_support(w, s)[0][0], ref, atol=1e-12)


def test_gradients_flow_to_all_parts():
    g = torch.Generator().manual_seed(11)
    p = params("embedded_gaussian", 0.05)
    q = [t.requires_grad_() for t in small(SHAPES, g)]
    s = [t.requires_grad_() for t in small(SHAPES, g, batch=3)]
    ssd_l2w_loss(p, q, s).backward()
    assert q[0].grad.abs().sum() > 0 and s[0].grad.abs().sum() > 0
    assert p.phi[0].weight.grad.abs().sum() > 0 and p.theta[0].weight.grad.abs().sum() > 0


def test_export_roundtrip(tmp_path):
    w = SupportWeights([torch.tensor([[0.5, 0.5]], dtype=torch.float64)] * 3)
    path = export_weights(w, "ep0", tmp_path / "w.jsonl", ["a.png", "b.png"])
    lines = path.read_text().splitlines()
    assert len(lines) == 3
    for i, line in enumerate(lines):
        rec = json.loads(line)
        assert rec == {"episode_id": "ep0", "level_index": i, "support_ids": ["a.png", "b.png"],
                       "weights": [0.5, 0.5]}
    g = torch.Generator().manual_seed(12)
    w2 = compute_weights(params("scaled_dot", 0.05), small(SHAPES, g), small(SHAPES, g, batch=4))
    export_weights(w2, "ep1", tmp_path / "w2.jsonl", list("abcd"))
    back, _ = read_weights(tmp_path / "w2.jsonl")
    for a, b in zip(w2.per_level, back.per_level):
        assert torch.allclose(a, b, atol=1e-9)


def test_export_unwritable(tmp_path):
    w = SupportWeights([torch.tensor([[1.0]])])
    with pytest.raises(OSError):
        export_weights(w, "e", tmp_path / "missing_dir" / "w.jsonl", ["a"])
