import numpy as np
import pytest
import torch

from edgecollab.models import (
    NonRecurrentConfig,
    NonRecurrentEdgeNet,
    RecurrentConfig,
    RecurrentEdgeNet,
    StructuralMismatchError,
    build_nonrecurrent,
    build_recurrent,
    forward_nonrecurrent,
    forward_recurrent,
    net_from_params,
    nonrecurrent_from_params,
)


def expected_recurrent_count(cfg: RecurrentConfig) -> int:
    """Independent parameter arithmetic: convs are k*k*cin*cout + cout."""
    enc, rec, dec = cfg.encoder_channels, cfg.recurrent_channels, cfg.decoder_channels
    total = 9 * 3 * enc + enc                      # stem
    total += 2 * (2 * (9 * enc * enc + enc))       # two residual blocks
    total += enc * rec + rec                       # 1x1 widening
    total += 2 * (9 * rec * rec + rec)             # shared recurrent block
    total += 2 * (9 * rec * dec + dec + dec + 1)   # two decode branches
    total += 3                                     # tied fusion (w_f, w_c, b)
    return total


def expected_nonrecurrent_count(cfg: NonRecurrentConfig) -> int:
    dec = cfg.decoder_channels
    chans = cfg.stage_channels
    ins = (3,) + chans[:-1]
    total = 0
    for cin, cout in zip(ins, chans):
        total += 9 * cin * cout + cout + 9 * cout * cout + cout
        if cin != cout:
            total += cin * cout + cout             # projection skip
        total += 2 * (9 * cout * dec + dec + dec + 1)
    total += 2 * 4 + 1                             # 1x1 fusion over 8 maps
    return total


def _image(size=64, seed=0):
    return np.random.default_rng(seed).random((size, size, 3)).astype(np.float32)


class TestBuildDeterminism:
    def test_recurrent_bitwise_identical(self):
        a = build_recurrent(seed=123)
        b = build_recurrent(seed=123)
        assert a.fingerprint == b.fingerprint
        for (n1, t1), (n2, t2) in zip(a.items(), b.items()):
            assert n1 == n2
            assert torch.equal(t1, t2)

    def test_nonrecurrent_bitwise_identical(self):
        a = build_nonrecurrent(seed=9)
        b = build_nonrecurrent(seed=9)
        for (_, t1), (_, t2) in zip(a.items(), b.items()):
            assert torch.equal(t1, t2)

    def test_different_seeds_differ(self):
        a = build_recurrent(seed=0)
        b = build_recurrent(seed=1)
        assert any(not torch.equal(t1, t2) for (_, t1), (_, t2) in zip(a.items(), b.items()))


class TestParameterBudgets:
    def test_recurrent_count_independent_of_step_count(self):
        counts = {
            t: build_recurrent(RecurrentConfig(steps=t), seed=0).n_parameters()
            for t in (2, 3, 5, 8)
        }
        assert len(set(counts.values())) == 1

    def test_recurrent_count_matches_arithmetic(self):
        cfg = RecurrentConfig()
        params = build_recurrent(cfg, seed=0)
        assert params.n_parameters() == expected_recurrent_count(cfg)

    def test_nonrecurrent_count_matches_arithmetic(self):
        cfg = NonRecurrentConfig()
        params = build_nonrecurrent(cfg, seed=0)
        assert params.n_parameters() == expected_nonrecurrent_count(cfg)

    def test_nonrecurrent_default_hits_size_budget(self):
        n = build_nonrecurrent(seed=0).n_parameters()
        assert abs(n - 183_500) / 183_500 < 0.15

    def test_nonrecurrent_stage_counts_nondecreasing(self):
        net = NonRecurrentEdgeNet()
        counts = net.stage_parameter_counts()
        assert all(b >= a for a, b in zip(counts, counts[1:]))
        assert counts[-1] > counts[0]

    def test_recurrent_wider_than_every_nonrecurrent_stage(self):
        rec = RecurrentConfig()
        nonrec = NonRecurrentConfig()
        assert rec.recurrent_channels > max(nonrec.stage_channels)

    def test_large_preset_is_larger(self):
        base = build_nonrecurrent(seed=0).n_parameters()
        large = build_nonrecurrent(NonRecurrentConfig.large(), seed=0).n_parameters()
        assert large > base


class TestForwardContracts:
    def test_recurrent_shapes(self):
        out = forward_recurrent(build_recurrent(seed=0), _image(64))
        assert len(out.f2c) == 5 and len(out.c2f) == 5
        assert all(tuple(m.shape) == (64, 64) for m in out.f2c + out.c2f)
        assert tuple(out.fused.shape) == (64, 64)

    def test_recurrent_fused_in_unit_interval(self):
        out = forward_recurrent(build_recurrent(seed=4), _image(32, seed=2))
        assert float(out.fused.min()) >= 0.0
        assert float(out.fused.max()) <= 1.0

    def test_recurrent_feature_sizes_halve(self):
        out = forward_recurrent(build_recurrent(seed=0), _image(64))
        assert out.feature_sizes == [(64, 64), (32, 32), (16, 16), (8, 8), (4, 4)]

    def test_odd_sizes_reconcile(self):
        img = np.random.default_rng(3).random((37, 53, 3)).astype(np.float32)
        out = forward_recurrent(build_recurrent(seed=0), img)
        assert tuple(out.fused.shape) == (37, 53)
        assert out.feature_sizes[0] == (37, 53)
        assert out.feature_sizes[1] == (19, 27)  # ceil-mode halving
        out2 = forward_nonrecurrent(build_nonrecurrent(seed=0), img)
        assert tuple(out2.fused.shape) == (37, 53)

    def test_nonrecurrent_shapes(self):
        out = forward_nonrecurrent(build_nonrecurrent(seed=0), _image(64))
        assert len(out.f2c) == 4 and len(out.c2f) == 4
        assert all(tuple(m.shape) == (64, 64) for m in out.f2c + out.c2f)
        assert float(out.fused.min()) >= 0.0 and float(out.fused.max()) <= 1.0

    def test_forward_is_deterministic(self):
        params = build_recurrent(seed=0)
        img = _image(32, seed=7)
        a = forward_recurrent(params, img)
        b = forward_recurrent(params, img)
        assert torch.equal(a.fused, b.fused)

    def test_extreme_parameters_keep_fused_in_range(self):
        params = build_nonrecurrent(seed=0)
        for _, t in params.items():
            t.mul_(100.0)
        out = forward_nonrecurrent(params, _image(32, seed=1))
        assert float(out.fused.min()) >= 0.0
        assert float(out.fused.max()) <= 1.0

    def test_structural_mismatch_raises(self):
        params = build_recurrent(RecurrentConfig(recurrent_channels=40), seed=0)
        bad = params.clone()
        bad.config["recurrent_channels"] = 48
        with pytest.raises(StructuralMismatchError):
            net_from_params(bad)


class TestParameterSharingAndIsolation:
    def test_recurrent_perturbation_touches_all_steps(self):
        net = RecurrentEdgeNet()
        net.init_parameters(0)
        img = _image(32, seed=5)
        with torch.no_grad():
            before = [f.clone() for f in net(img).features]
            net.recurrent.conv1.weight[0, 0, 0, 0] += 0.5
            after = net(img).features
        for t, (b, a) in enumerate(zip(before, after)):
            assert not torch.equal(b, a), f"step {t} unaffected by shared weights"

    def test_nonrecurrent_stage_isolation(self):
        net = NonRecurrentEdgeNet()
        net.init_parameters(0)
        img = _image(32, seed=6)
        with torch.no_grad():
            before = [f.clone() for f in net(img).features]
            net.stages[2].conv1.weight[0, 0, 0, 0] += 0.5
            after = net(img).features
        assert torch.equal(before[0], after[0])
        assert torch.equal(before[1], after[1])
        assert not torch.equal(before[2], after[2])
        assert not torch.equal(before[3], after[3])


class TestConfigValidation:
    def test_recurrent_rejects_tiny_step_count(self):
        with pytest.raises(ValueError):
            RecurrentConfig(steps=1)

    def test_nonrecurrent_rejects_wrong_stage_count(self):
        with pytest.raises(ValueError):
            NonRecurrentConfig(stage_channels=(8, 16, 32))

    def test_nonrecurrent_rejects_decreasing_widths(self):
        with pytest.raises(ValueError):
            NonRecurrentConfig(stage_channels=(32, 24, 48, 64))

    def test_nonrecurrent_rejects_constant_widths(self):
        with pytest.raises(ValueError):
            NonRecurrentConfig(stage_channels=(32, 32, 32, 32))

    def test_roundtrip_through_params(self):
        cfg = NonRecurrentConfig(stage_channels=(8, 12, 16, 24), decoder_channels=8)
        params = build_nonrecurrent(cfg, seed=1)
        net = nonrecurrent_from_params(params)
        assert net.config == cfg
