import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import analytic_gradient, central_difference, relative_error, toy_setup
from vprg.errors import InvalidArgumentError
from vprg.global_align import (TokenFusion, aggregate_grounded_global, check_cmff_weights, cmff_fuse,
                               fuse_class_tokens, global_loss, grrm_mse)
from vprg.retrieval import ClassTokenAggregator, aggregate_global


def test_cmff_examples():
    v = torch.randn(5)
    assert torch.allclose(cmff_fuse(v.expand(3, 5)), v)
    assert cmff_fuse(torch.eye(3)).tolist() == pytest.approx([0.4, 0.3, 0.3])
    feats = torch.randn(3, 4)
    assert torch.equal(cmff_fuse(feats, (1.0, 0.0, 0.0)), feats[0])


def test_cmff_weight_validation():
    with pytest.raises(InvalidArgumentError):
        cmff_fuse(torch.randn(2, 4))
    with pytest.raises(InvalidArgumentError):
        check_cmff_weights((0.5, 0.6, -0.1))
    with pytest.raises(InvalidArgumentError):
        check_cmff_weights((0.5, 0.3, 0.3))


@settings(max_examples=50)
@given(st.lists(st.floats(0, 1), min_size=3, max_size=3).filter(lambda w: sum(w) > 0.1),
       st.integers(0, 10_000))
def test_cmff_stays_in_convex_hull(raw, seed):
    w = np.array(raw) / sum(raw)
    feats = torch.as_tensor(np.random.default_rng(seed).standard_normal((3, 4)))
    out = cmff_fuse(feats, tuple(w))
    assert torch.all(out <= feats.max(0).values + 1e-12)
    assert torch.all(out >= feats.min(0).values - 1e-12)


@pytest.fixture
def e1():
    torch.manual_seed(0)
    return ClassTokenAggregator(8, depth=1, heads=2).eval()


def test_grounded_aggregate_shares_e1(e1):
    seed = torch.randn(8)
    feats = torch.randn(1, 8)
    base = aggregate_grounded_global(feats, e1, seed)
    assert base.shape == (8,)
    with torch.no_grad():
        e1.encoder.layers[0].linear1.weight.add_(torch.randn(16, 8))
    assert not torch.allclose(aggregate_grounded_global(feats, e1, seed), base)


def test_grounded_aggregate_ignores_e2(e1):
    torch.manual_seed(1)
    e2 = ClassTokenAggregator(8, depth=1, heads=2).eval()
    seed, feats = torch.randn(8), torch.randn(3, 8)
    base = aggregate_grounded_global(feats, e1, seed)
    with torch.no_grad():
        for p in e2.parameters():
            p.add_(1.0)
    assert torch.equal(aggregate_grounded_global(feats, e1, seed), base)


def test_grounded_seed_differs_from_video_seed(e1):
    feats = torch.randn(4, 8)
    assert not torch.allclose(aggregate_grounded_global(feats, e1, torch.randn(8)), aggregate_global(feats, e1))


def test_token_fusion_examples():
    fusion = TokenFusion(3)
    u, v = torch.randn(3), torch.randn(3)
    with torch.no_grad():
        fusion.linear.bias.zero_()
        fusion.linear.weight.copy_(torch.cat([torch.eye(3), torch.zeros(3, 3)], dim=1))
    assert torch.allclose(fuse_class_tokens(u, v, fusion), u)
    with torch.no_grad():
        fusion.linear.weight.copy_(torch.cat([torch.eye(3), torch.eye(3)], dim=1))
    assert torch.allclose(fuse_class_tokens(u, v, fusion), u + v)
    assert torch.all(fuse_class_tokens(torch.zeros(3), torch.zeros(3), fusion) == 0)
    with pytest.raises(InvalidArgumentError):
        fuse_class_tokens(torch.zeros(3), torch.zeros(4), fusion)


def test_global_loss_reuses_retrieval_oracles():
    s = torch.tensor([[1.0, -1.0], [-1.0, 1.0]])
    total, parts = global_loss(s, 1.0, 0.2, 0.04)
    assert float(parts["nce"]) == pytest.approx(0.25386, abs=1e-4)
    assert float(parts["trip"]) == 0.0
    trip = torch.tensor([[0.5, 0.6], [0.3, 0.7]])
    only, _ = global_loss(trip, 1.0, 0.2, 0.0)
    assert float(only) == pytest.approx(0.2, abs=1e-6)
    _, single = global_loss(torch.tensor([[0.3]]), 10.0)
    assert float(single["nce"]) == 0.0


def test_grrm_cases():
    a = torch.tensor([[1.0, 0.0], [0.0, 1.0]])
    assert float(grrm_mse(a, a)) == 0.0
    assert float(grrm_mse(a, torch.tensor([[1.0, -1.0], [-1.0, 1.0]]))) == 0.5
    assert float(grrm_mse(a + 0.3, a)) == pytest.approx(0.09, abs=1e-7)
    assert float(grrm_mse(a, torch.tensor([[1.0, -1.0], [-1.0, 1.0]]), positives_only=True)) == 0.0
    with pytest.raises(InvalidArgumentError):
        grrm_mse(torch.zeros(2, 2), torch.zeros(3, 3))


@settings(max_examples=40)
@given(st.integers(1, 5), st.floats(-2, 2), st.integers(0, 10_000))
def test_grrm_constant_offset(b, c, seed):
    s = torch.as_tensor(np.random.default_rng(seed).uniform(-1, 1, (b, b)))
    assert float(grrm_mse(s + c, s)) == pytest.approx(c * c, rel=1e-9, abs=1e-12)


def test_grrm_stop_gradient():
    sr = torch.randn(3, 3, requires_grad=True)
    sg = torch.randn(3, 3, requires_grad=True)
    grrm_mse(sr, sg).backward()
    assert sg.grad is None and sr.grad is not None
    sg2 = sg.detach().clone().requires_grad_(True)
    grrm_mse(sr, sg2, detach_target=False).backward()
    assert sg2.grad is not None


def test_grrm_gradient_matches_finite_differences(rng):
    sg = torch.tensor(rng.uniform(-1, 1, (4, 4)))
    sr = torch.tensor(rng.uniform(-1, 1, (4, 4)))
    fn = lambda x: grrm_mse(x, sg)  # noqa: E731
    assert relative_error(analytic_gradient(fn, sr), central_difference(fn, sr)) < 1e-3


def test_mse_gives_no_gradient_to_grounding_only_parameters():
    model, batch, _ = toy_setup()
    model.losses(batch)["mse"].backward()
    for name in ("grounded_seed", "token_fusion.linear.weight", "token_fusion.linear.bias", "log_scale_g"):
        p = model.get_parameter(name)
        assert p.grad is None or torch.count_nonzero(p.grad) == 0, name
    assert model.text_aggregator.seed.grad is not None


def test_single_step_moves_both_e1_readouts():
    model, batch, _ = toy_setup()
    model.eval()
    seg = model.video_segments(batch.segments)
    probe = torch.randn(2, seg.shape[1], seg.shape[2])
    before_v = model.video_aggregator(probe).detach()
    before_g = model.video_aggregator(probe, seed=model.grounded_seed).detach()
    opt = torch.optim.SGD([p for n, p in model.named_parameters() if n.startswith("video_aggregator.encoder")],
                          lr=0.1)
    model.losses(batch)["global"].backward()
    opt.step()
    assert not torch.allclose(model.video_aggregator(probe), before_v)
    assert not torch.allclose(model.video_aggregator(probe, seed=model.grounded_seed), before_g)
