import math

import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import analytic_gradient, central_difference, relative_error
from vprg.errors import InvalidArgumentError
from vprg.local import (MomentFusion, PredictionHead, Reconstructor, TemporalAdjacentNet, feature_map,
                        fuse_sentence_moment, local_loss, map_mask, rank_loss, reconstruct_masked,
                        reconstruction_loss, reward_schedule, select_top_q, top_q_cells)
from vprg.moments import build_feature_map


def _fusion(ds=3, dv=4, d=5, seed=0):
    torch.manual_seed(seed)
    return MomentFusion(ds, dv, d).double()


def test_feature_map_matches_numpy_builder():
    seg = torch.randn(6, 4, dtype=torch.float64)
    assert torch.equal(feature_map(seg[None])[0], torch.as_tensor(build_feature_map(seg.numpy())))


def test_fusion_identity_and_annihilator():
    fusion = _fusion()
    fmap = feature_map(torch.randn(1, 4, 4, dtype=torch.float64))[0]
    with torch.no_grad():
        fusion.text_proj.weight.zero_()
        fusion.text_proj.weight[:, 0] = 1.0
    h = torch.tensor([1.0, 0.0, 0.0], dtype=torch.float64)
    out = fuse_sentence_moment(h, fmap, fusion)
    assert torch.allclose(out, fusion.video_proj(fmap) * map_mask(4)[..., None])
    assert torch.all(fuse_sentence_moment(torch.zeros(3, dtype=torch.float64), fmap, fusion) == 0)


def test_fusion_scalar_product():
    fusion = MomentFusion(1, 1, 1).double()
    with torch.no_grad():
        fusion.text_proj.weight.fill_(2.0)
        fusion.video_proj.weight.fill_(3.0)
    out = fuse_sentence_moment(torch.ones(1, dtype=torch.float64), torch.ones(1, 1, 1, dtype=torch.float64), fusion)
    assert out.item() == 6.0


def test_fusion_width_mismatch():
    fusion = _fusion()
    with pytest.raises(InvalidArgumentError):
        fuse_sentence_moment(torch.ones(2, dtype=torch.float64), torch.ones(3, 3, 4, dtype=torch.float64), fusion)
    with pytest.raises(InvalidArgumentError):
        fuse_sentence_moment(torch.ones(3, dtype=torch.float64), torch.ones(3, 3, 2, dtype=torch.float64), fusion)


def test_fusion_zero_off_valid_region():
    fusion = _fusion()
    out = fusion(torch.randn(2, 3, dtype=torch.float64), torch.randn(2, 5, 5, 4, dtype=torch.float64))
    assert torch.all(out[:, ~map_mask(5)] == 0)


def test_tan_shape_and_zero_input():
    torch.manual_seed(0)
    tan = TemporalAdjacentNet(6)
    x = torch.randn(2, 7, 7, 6)
    assert tan(x).shape == x.shape
    assert torch.all(tan(x)[:, ~map_mask(7)] == 0)
    with torch.no_grad():
        for conv in tan.convs:
            conv.bias.zero_()
    assert torch.all(tan(torch.zeros(1, 7, 7, 6)) == 0)


def test_tan_locality():
    torch.manual_seed(1)
    tan = TemporalAdjacentNet(4).double()
    k, cell = 14, (3, 9)
    a = torch.randn(1, k, k, 4, dtype=torch.float64) * map_mask(k)[None, ..., None]
    b = a.clone()
    b[0, cell[0], cell[1]] += 1.0
    diff = (tan(a) - tan(b)).abs().amax(-1)[0]
    for i in range(k):
        for j in range(k):
            if max(abs(i - cell[0]), abs(j - cell[1])) > 4:
                assert diff[i, j] == 0
    assert diff[cell] > 0


def test_prediction_head_contract():
    head = PredictionHead(3)
    with torch.no_grad():
        head.fc.weight.zero_()
        head.fc.bias.zero_()
    p = head(torch.zeros(4, 4, 3))
    assert torch.all(p[map_mask(4)] == 0.5) and torch.all(p[~map_mask(4)] == 0)
    with torch.no_grad():
        head.fc.bias.fill_(40.0)
    assert torch.allclose(head(torch.zeros(4, 4, 3))[map_mask(4)], torch.ones(10))


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 10), st.integers(0, 10_000))
def test_scores_in_open_interval_on_valid_cells(k, seed):
    torch.manual_seed(seed)
    head = PredictionHead(4).double()
    p = head(torch.randn(k, k, 4, dtype=torch.float64) * 3)
    valid = map_mask(k)
    assert torch.all((p[valid] > 0) & (p[valid] < 1))
    assert torch.all(p[~valid] == 0)


def test_select_top_q_examples():
    s = torch.full((3, 3), 0.1)
    s[0, 1], s[1, 2], s[0, 0] = 0.9, 0.8, 0.7
    assert [c for c, _ in select_top_q(s, 3)] == [(0, 1), (1, 2), (0, 0)]
    assert [c for c, _ in select_top_q(torch.full((2, 2), 0.5), 2)] == [(0, 0), (0, 1)]
    with pytest.raises(InvalidArgumentError):
        select_top_q(torch.ones(1, 1), 2)


@settings(max_examples=50)
@given(st.integers(2, 8), st.integers(0, 10_000))
def test_top_q_ordering_and_batch_agreement(k, seed):
    g = torch.Generator().manual_seed(seed)
    # coarse values force ties
    s = torch.randint(0, 4, (k, k), generator=g).float() * map_mask(k)
    q = min(3, k * (k + 1) // 2)
    picked = select_top_q(s, q)
    vals = [v for _, v in picked]
    assert vals == sorted(vals, reverse=True)
    assert picked == select_top_q(s, q)
    cells = top_q_cells(s[None], q)[0].tolist()
    assert cells == [[c.start, c.end] for c, _ in picked]


def test_reconstructor_rows_are_distributions():
    torch.manual_seed(0)
    rec = Reconstructor(8, 11, heads=2)
    dist = reconstruct_masked(torch.randn(5, 8), torch.randn(3, 8), rec)
    assert dist.shape == (5, 11)
    assert torch.all(dist >= 0)
    assert torch.allclose(dist.sum(-1), torch.ones(5), atol=1e-6)
    with pytest.raises(InvalidArgumentError):
        reconstruct_masked(torch.randn(5, 8), torch.zeros(0, 8), rec)


def _overfit(steps):
    torch.manual_seed(3)
    rec = Reconstructor(16, 12, heads=2)
    states = torch.randn(1, 6, 16)
    span = torch.randn(1, 3, 16)
    targets = torch.tensor([[4, 7, 2, 9, 11, 5]])
    opt = torch.optim.Adam(rec.parameters(), lr=1e-3)
    losses = []
    for _ in range(steps):
        opt.zero_grad()
        loss = reconstruction_loss(rec(states, span)[:, None], targets)
        loss.backward()
        opt.step()
        losses.append(loss.item())
    return rec, states, span, targets, losses


def test_reconstructor_memorizes_single_pair():
    rec, states, span, targets, _ = _overfit(500)
    assert torch.equal(rec(states, span).argmax(-1), targets)


def test_reconstruction_loss_decreases_while_overfitting():
    losses = _overfit(200)[-1]
    rises = sum(b > a for a, b in zip(losses, losses[1:]))
    assert rises <= 0.05 * (len(losses) - 1)
    assert losses[-1] < 0.1 * losses[0]


def test_reconstruction_loss_cases():
    one_hot = torch.zeros(1, 1, 1, 4)
    one_hot[..., 2] = 1
    assert float(reconstruction_loss(one_hot, [[2]])) == pytest.approx(0.0, abs=1e-9)
    uniform = torch.full((1, 1, 1, 4), 0.25, dtype=torch.float64)
    assert float(reconstruction_loss(uniform, [[0]])) == pytest.approx(math.log(4), abs=1e-12)
    assert float(reconstruction_loss(uniform, [[0]])) == pytest.approx(1.3863, abs=1e-4)
    two = torch.full((1, 1, 2, 4), 0.25, dtype=torch.float64)
    assert float(reconstruction_loss(two, [[0, 3]])) == pytest.approx(2 * math.log(4), abs=1e-12)
    with pytest.raises(InvalidArgumentError):
        reconstruction_loss(uniform, [[4]])


def test_reconstruction_weights_drop_positions():
    uniform = torch.full((1, 1, 2, 4), 0.25, dtype=torch.float64)
    w = torch.tensor([[1.0, 0.0]], dtype=torch.float64)
    assert float(reconstruction_loss(uniform, [[0, 1]], w)) == pytest.approx(math.log(4), abs=1e-12)


def test_reward_schedule():
    assert reward_schedule(3).tolist() == [1.0, 0.5, 0.0]
    assert reward_schedule(1).tolist() == [1.0]
    r = reward_schedule(5)
    assert r[0] == 1 and r[-1] == 0
    assert torch.allclose(r[:-1] - r[1:], torch.full((4,), 0.25))
    with pytest.raises(InvalidArgumentError):
        reward_schedule(0)


def _rank_oracle(p, r):
    z = sum(math.exp(x) for x in p)
    return -sum(ri * math.log(math.exp(pi) / z) for pi, ri in zip(p, r)) / len(p)


def test_rank_loss_cases():
    r = reward_schedule(3)
    assert float(rank_loss(torch.tensor([[0.9, 0.8, 0.7]]), r)) == pytest.approx(0.5177, abs=1e-3)
    assert float(rank_loss(torch.tensor([[0.9, 0.8, 0.7]], dtype=torch.float64), r)) == pytest.approx(
        _rank_oracle([0.9, 0.8, 0.7], [1, 0.5, 0]), abs=1e-12)
    assert float(rank_loss(torch.full((1, 3), 0.4), r)) == pytest.approx(0.5 * math.log(3), abs=1e-6)
    assert float(rank_loss(torch.rand(2, 3), torch.zeros(3))) == 0.0


def test_rank_loss_averages_over_sentences():
    s = torch.tensor([[0.9, 0.8, 0.7], [0.1, 0.5, 0.2]], dtype=torch.float64)
    r = reward_schedule(3)
    expected = (_rank_oracle(s[0].tolist(), r.tolist()) + _rank_oracle(s[1].tolist(), r.tolist())) / 2
    assert float(rank_loss(s, r)) == pytest.approx(expected, abs=1e-12)


def test_local_loss_sum():
    assert local_loss(0.0, 0.0) == 0.0
    assert local_loss(1.3863, 0.5177) == pytest.approx(1.9040, abs=1e-9)
    assert local_loss(0.5177, 1.3863) == local_loss(1.3863, 0.5177)


def test_fusion_and_head_gradients(rng):
    torch.manual_seed(0)
    k, d = 8, 8
    fusion = MomentFusion(d, d, d).double()
    head = PredictionHead(d).double()
    seg = torch.tensor(rng.standard_normal((1, k, d)))
    fmap = feature_map(seg)
    h = torch.tensor(rng.standard_normal((1, d)))
    w = torch.tensor(rng.uniform(size=(k, k)))
    fn_h = lambda x: (head(fusion(x, fmap)) * w).sum()  # noqa: E731
    fn_f = lambda x: (head(fusion(h, x)) * w).sum()  # noqa: E731
    assert relative_error(analytic_gradient(fn_h, h), central_difference(fn_h, h)) < 1e-3
    assert relative_error(analytic_gradient(fn_f, fmap), central_difference(fn_f, fmap)) < 1e-3


def test_local_loss_gradients(rng):
    logits = torch.tensor(rng.standard_normal((2, 3, 4, 6)))
    targets = torch.tensor(rng.integers(0, 6, (2, 4)))
    fn_rec = lambda x: reconstruction_loss(torch.softmax(x, -1), targets)  # noqa: E731
    assert relative_error(analytic_gradient(fn_rec, logits), central_difference(fn_rec, logits)) < 1e-3
    scores = torch.tensor(rng.uniform(size=(2, 3)))
    fn_rank = lambda x: rank_loss(x, reward_schedule(3))  # noqa: E731
    assert relative_error(analytic_gradient(fn_rank, scores), central_difference(fn_rank, scores)) < 1e-3
