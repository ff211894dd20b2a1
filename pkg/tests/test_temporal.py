import math

import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from tedio import temporal
from tedio.config import ModelConfig, ScheduleConfig, TedioConfig
from tedio.diffusion import NoiseSchedule, sample
from tedio.errors import DimensionError, RefinementError, UsageError
from tedio.model import AttentionCapture, init_params
from tedio.oracles import micro_config, naive_temporal_attention, tedio_gradient_error
from tedio.tensor import tape
from tedio.temporal import (
    extract_band,
    latent_refine,
    regroup,
    tedio_loss,
    tedio_objective,
    temporal_attention,
    variability_score,
)

EXAMPLE = torch.tensor([[0.6, 0.3, 0.1], [0.2, 0.5, 0.3], [0.1, 0.2, 0.7]], dtype=torch.float64)


def _latent(cfg, seed=0):
    return torch.randn((1,) + cfg.video_shape, generator=torch.Generator().manual_seed(seed), dtype=torch.float64)


def test_two_frame_map_example():
    cfg = micro_config()
    cfg = type(cfg)(**{**cfg.__dict__, "frames": 2, "height": 1, "width": 1, "n_heads": 1, "head_dim": 1,
                       "d_model": 1})
    q = torch.tensor([[[1.0], [0.0]]], dtype=torch.float64)
    A = temporal_attention(AttentionCapture(1, q, q.clone()), cfg)[0, 0]
    e = math.e / (math.e + 1)
    assert torch.allclose(A, torch.tensor([[e, 1 - e], [0.5, 0.5]], dtype=torch.float64), atol=1e-12)
    assert abs(A[0, 0].item() - 0.7311) < 1e-4
    assert abs(variability_score(A, (-1, 0, 1)).item() - 0.0534) < 1e-4


def test_band_examples():
    eye = torch.eye(3)
    assert extract_band(eye, 0).tolist() == [1, 1, 1]
    assert extract_band(eye, 1).tolist() == [0, 0]
    assert torch.allclose(extract_band(EXAMPLE, -1), torch.tensor([0.2, 0.2], dtype=torch.float64))
    assert torch.allclose(extract_band(EXAMPLE, 1), torch.tensor([0.3, 0.3], dtype=torch.float64))
    with pytest.raises(UsageError):
        extract_band(eye, 3)


def test_score_examples():
    assert variability_score(torch.full((5, 5), 0.2), (-1, 0, 1)).item() == 0.0
    assert abs(variability_score(EXAMPLE, (-1, 0, 1)).item() - 0.05) < 1e-12
    with pytest.raises(UsageError):
        variability_score(EXAMPLE, (3,))


@settings(max_examples=50, deadline=None)
@given(st.integers(3, 8), st.integers(0, 2**31 - 1), st.data())
def test_adding_bands_never_decreases_score(F, seed, data):
    maps = torch.softmax(torch.randn(F, F, generator=torch.Generator().manual_seed(seed)), -1)
    offsets = list(range(-(F - 2), F - 1))
    base = data.draw(st.lists(st.sampled_from(offsets), min_size=1, unique=True))
    extra = data.draw(st.sampled_from(offsets))
    s0 = variability_score(maps, base)
    assert s0 >= 0
    assert variability_score(maps, base + [extra]) >= s0


def test_loss_examples():
    s = torch.tensor([0.5, 0.1, 0.9])
    assert tedio_loss(s, 1).item() == pytest.approx(0.9)
    assert tedio_loss(s, 3).item() == pytest.approx(0.5)
    loss, idx = tedio_loss(torch.tensor([0.5, 0.5, 0.1]), 1, return_index=True)
    assert loss.item() == 0.5 and idx.tolist() == [0]
    with pytest.raises(UsageError):
        tedio_loss(s, 0)
    with pytest.raises(UsageError):
        tedio_loss(s, 4)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(0, 10), min_size=2, max_size=12), st.data())
def test_loss_monotone_under_inflation(values, data):
    s = torch.tensor(values, dtype=torch.float64)
    k = data.draw(st.integers(1, len(values)))
    loss, idx = tedio_loss(s, k, return_index=True)
    selected = set(idx.tolist())
    p = data.draw(st.integers(0, len(values) - 1))
    bumped = s.clone()
    if p in selected:
        bumped[p] += 1.0
        assert tedio_loss(bumped, k) > loss
    else:
        threshold = min(s[i].item() for i in selected)
        bumped[p] = (s[p] + threshold) / 2 if s[p] < threshold else s[p]
        assert tedio_loss(bumped, k) == loss


def test_gradient_flows_only_through_selection():
    with tape():
        s = torch.tensor([0.2, 0.9, 0.4], requires_grad=True)
        (g,) = torch.autograd.grad(tedio_loss(s, 2), [s])
    assert g.tolist() == [0.0, 0.5, 0.5]


def test_regroup_layout(micro):
    Nh, HW, F_ = micro.n_heads, micro.height * micro.width, micro.frames
    x = torch.zeros(1, Nh, F_ * HW, 3)
    for head in range(Nh):
        for f in range(F_):
            for cell in range(HW):
                x[0, head, f * HW + cell] = torch.tensor([head, f, cell], dtype=torch.float32)
    out = regroup(x, micro)
    for p in range(HW * Nh):
        cell, head = divmod(p, Nh)
        for f in range(F_):
            assert out[0, p, f].tolist() == [head, f, cell]
    with pytest.raises(DimensionError):
        regroup(torch.zeros(1, Nh, F_ * HW + 1, 3), micro)


def test_reshape_path_matches_naive_oracle(micro):
    gen = torch.Generator().manual_seed(0)
    for _ in range(10):
        q = torch.randn(micro.n_heads, micro.n_tokens, 4, generator=gen)
        k = torch.randn(micro.n_heads, micro.n_tokens, 4, generator=gen)
        fast = temporal_attention(AttentionCapture(1, q[None], k[None]), micro)[0]
        assert (fast - naive_temporal_attention(q, k, micro)).abs().max() < 1e-6
        assert torch.allclose(fast.sum(-1), torch.ones(fast.shape[:-1]), atol=1e-6)
        assert fast.min() >= 0 and fast.max() <= 1


def test_frame_constant_latent_gives_uniform_maps(micro_model, micro):
    frame = torch.randn(micro.video_shape[1:], generator=torch.Generator().manual_seed(1), dtype=torch.float64)
    z = frame.expand(micro.video_shape)
    _, cap = micro_model(z, 1, 300, capture_block=1, truncate_at=1)
    maps = temporal_attention(cap, micro)
    assert (maps - 1 / micro.frames).abs().max() < 1e-6
    assert variability_score(maps).max() <= 1e-10


def test_frame_permutation_equivariance(micro_model, micro):
    z = _latent(micro, 2)
    perm = torch.tensor([2, 0, 3, 1])
    _, cap = micro_model(z, 0, 500, capture_block=1, truncate_at=1)
    _, cap_p = micro_model(z[:, perm], 0, 500, capture_block=1, truncate_at=1)
    A = temporal_attention(cap, micro)
    Ap = temporal_attention(cap_p, micro)
    assert torch.allclose(Ap, A[:, :, perm][:, :, :, perm], atol=1e-12)
    ident = torch.arange(micro.frames)
    _, cap_i = micro_model(z[:, ident], 0, 500, capture_block=1, truncate_at=1)
    assert torch.equal(variability_score(temporal_attention(cap_i, micro)), variability_score(A))


@pytest.mark.parametrize("k", [1, 3])
def test_gradient_locality_at_block_one(micro_model, micro, k):
    cfg = TedioConfig(block=1, bands=(0,), k=k)
    with tape():
        z = _latent(micro, 4).requires_grad_(True)
        loss, idx = tedio_objective(micro_model, z, 0, 400, cfg, return_index=True)
        (g,) = torch.autograd.grad(loss, [z])
    cells = {p // micro.n_heads for p in idx.reshape(-1).tolist()}
    for cell in range(micro.height * micro.width):
        h, w = divmod(cell, micro.width)
        nonzero = bool(g[0, :, :, h, w].abs().sum() > 0)
        assert nonzero == (cell in cells)


def test_gradient_matches_finite_differences():
    for seed in range(3):
        assert tedio_gradient_error(seed) < 1e-4


def test_refine_with_zero_eta_keeps_latent(micro_model, micro):
    z = _latent(micro, 5)
    out, log = latent_refine(micro_model, z, 0, 900, TedioConfig(eta=0.0, n_iters=3), t=45)
    assert torch.equal(out, z)
    assert len(log.losses) == 3 and len(set(log.losses)) == 1 and log.t == 45
    assert not out.requires_grad


def test_update_rule_on_scalar_quadratic(monkeypatch):
    def fake_objective(model, z, cond, pos, cfg, return_index=False, conditioning=None):
        return (z**2).sum(), torch.zeros(1, dtype=torch.long)

    class Stub:
        counter = init_params(micro_config()).counter

        def condition(self, cond, t, batch=1):
            return None

    monkeypatch.setattr(temporal, "tedio_objective", fake_objective)
    z, log = latent_refine(Stub(), torch.tensor([1.0], dtype=torch.float64), 0, 1, TedioConfig(eta=0.1, n_iters=1))
    assert z.item() == pytest.approx(0.8)
    assert log.losses == [1.0]


def test_non_finite_loss_raises(monkeypatch):
    def bad_objective(model, z, cond, pos, cfg, return_index=False, conditioning=None):
        return (z * float("nan")).sum(), torch.zeros(1, dtype=torch.long)

    class Stub:
        counter = init_params(micro_config()).counter

        def condition(self, cond, t, batch=1):
            return None

    monkeypatch.setattr(temporal, "tedio_objective", bad_objective)
    with pytest.raises(RefinementError) as info:
        latent_refine(Stub(), torch.ones(2), 0, 1, TedioConfig(), t=37)
    assert info.value.t == 37 and info.value.iteration == 0


def test_block_counters(toy_model):
    schedule = NoiseSchedule.from_config(ScheduleConfig())
    toy_model.counter.reset()
    sample(toy_model, schedule, 0, seed=0)
    assert toy_model.counter.snapshot() == {"forward": {"baseline": 200}, "backward": {}}
    toy_model.counter.reset()
    sample(toy_model, schedule, 0, seed=0, tedio=TedioConfig())
    snap = toy_model.counter.snapshot()
    assert snap["forward"] == {"baseline": 200, "tedio": 72}
    assert snap["backward"] == {"tedio": 72}
    assert temporal.expected_extra_blocks(TedioConfig(), 50) == 72


@pytest.mark.parametrize("block", [1, 2, 3])
@pytest.mark.parametrize("k", [1, 5, 64])
def test_sparse_objective_matches_dense(block, k):
    cfg = ModelConfig(frames=4, height=4, width=4, d_model=16, n_blocks=3, n_heads=4, head_dim=4)
    model = init_params(cfg, seed=1, dtype=torch.float64)
    model.requires_grad_(False)
    tcfg = TedioConfig(block=block, k=k)
    z = _latent(cfg, seed=block)
    results = []
    for sparse in (True, False):
        model.counter.reset()
        with tape(), model.counter.tagged("tedio"):
            zt = z.clone().requires_grad_(True)
            loss, idx = tedio_objective(model, zt, 1, 300.0, tcfg, return_index=True, sparse=sparse)
            loss.backward()
        results.append((loss.item(), idx, zt.grad, model.counter.snapshot()))
    (ls, i_s, gs, cs), (ld, i_d, gd, cd) = results
    assert ls == pytest.approx(ld, rel=1e-12)
    assert torch.equal(i_s, i_d)
    assert torch.allclose(gs, gd, rtol=1e-10, atol=1e-14)
    assert cs == cd == {"forward": {"tedio": block}, "backward": {"tedio": block}}
