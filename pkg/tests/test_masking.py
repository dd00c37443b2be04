import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from revmask.masking import (
    InferenceMode,
    Mask,
    Policy,
    RegConfig,
    Sampler,
    ScalePair,
    apply_reverse_mask,
    bipartition_mask,
    dropblock_apply,
    inference_split,
    maybe_regularize,
    random_erase_input,
    reverse_mask,
    sample_mask,
    sample_mask_field,
    sample_scale_pair,
    scaling_dropblock_apply,
    split_by_mask,
)
from revmask.tensor import Tensor


def feats(rng, shape=(2, 3, 4, 8, 6)):
    return Tensor(rng.standard_normal(shape).astype(np.float32))


class TestSamplers:
    def test_band_zero_rows(self):
        rng = np.random.default_rng(0)
        cfg = RegConfig(mask_ratio=0.25, sampler=Sampler.BAND)
        for _ in range(50):
            m = sample_mask(cfg, 16, 5, rng)
            zero_rows = np.flatnonzero(m.bits.sum(1) == 0)
            assert len(zero_rows) == 4
            assert np.all(np.diff(zero_rows) == 1)
            assert m.bits.sum() == (16 - 4) * 5

    def test_band_degenerate(self):
        with pytest.raises(ValueError):
            sample_mask(RegConfig(mask_ratio=0.1, sampler=Sampler.BAND), 2, 4, np.random.default_rng(0))

    def test_bipartition(self):
        m = bipartition_mask(5, 3)
        assert m.bits[:3].all() and not m.bits[3:].any()
        assert sample_mask(RegConfig(sampler=Sampler.FIXED_BIPARTITION), 5, 3, np.random.default_rng(0)) == m

    def test_iid_zero_fraction(self):
        rng = np.random.default_rng(1)
        cfg = RegConfig(mask_ratio=0.3, sampler=Sampler.IID_UNIT)
        zeros = np.mean([1 - sample_mask(cfg, 8, 8, rng).bits.mean() for _ in range(2000)])
        assert abs(zeros - 0.3) < 0.01

    def test_config_validation(self):
        for bad in (dict(prob=1.5), dict(mask_ratio=0.0), dict(mask_ratio=1.0), dict(share_over=(True, True, False))):
            with pytest.raises(ValueError):
                RegConfig(**bad)

    def test_mask_validation(self):
        with pytest.raises(ValueError):
            Mask(np.array([[0, 2]]))
        with pytest.raises(ValueError):
            Mask(np.zeros(3))

    def test_field_sharing(self):
        rng = np.random.default_rng(2)
        shared = sample_mask_field(RegConfig(sampler=Sampler.IID_UNIT), 3, 4, 6, 5, rng)
        assert shared.shape == (1, 1, 1, 6, 5)
        per_frame = sample_mask_field(RegConfig(sampler=Sampler.IID_UNIT, share_over=(True, False, True)), 3, 4, 6, 5, rng)
        assert per_frame.shape == (1, 4, 1, 6, 5)

    def test_same_seed_same_stream(self):
        cfg = RegConfig(sampler=Sampler.IID_UNIT)
        a = [sample_mask(cfg, 6, 6, r).bits for r in [np.random.default_rng(9)] * 3]
        b = [sample_mask(cfg, 6, 6, r).bits for r in [np.random.default_rng(9)] * 3]
        assert all(np.array_equal(x, y) for x, y in zip(a, b))


class TestScales:
    def test_policies(self):
        rng = np.random.default_rng(3)
        assert sample_scale_pair(Policy.DROPPING, rng) == ScalePair(1.0, 0.0, Policy.DROPPING)
        sp = sample_scale_pair(Policy.SCALING, rng)
        assert 0 <= sp.alpha < 1 and 0 <= sp.beta < 1
        assert sample_scale_pair(ScalePair(0.2, 0.7), rng) == ScalePair(0.2, 0.7, Policy.FIXED)
        with pytest.raises(ValueError):
            sample_scale_pair(ScalePair(1.2, 0.0), rng)
        with pytest.raises(ValueError):
            sample_scale_pair(Policy.FIXED, rng)

    def test_uniform_moments(self):
        rng = np.random.default_rng(4)
        draws = np.array([[sp.alpha, sp.beta] for sp in (sample_scale_pair(Policy.SCALING, rng) for _ in range(20000))])
        assert abs(draws.mean(0) - 0.5).max() < 0.01
        assert abs(np.corrcoef(draws.T)[0, 1]) < 0.03


class TestReverseMask:
    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**31), st.floats(0, 1), st.floats(0, 1))
    def test_pair_reconstructs_input(self, seed, alpha, beta):
        rng = np.random.default_rng(seed)
        x = feats(rng)
        m = sample_mask(RegConfig(sampler=Sampler.IID_UNIT), 8, 6, rng)
        pf = apply_reverse_mask(x, m, ScalePair(alpha, beta))
        assert np.abs(pf.masked_out.data + pf.paired_out.data - x.data).max() <= 1e-6

    def test_dropping_is_masked_copy(self):
        rng = np.random.default_rng(5)
        x = feats(rng)
        m = sample_mask(RegConfig(), 8, 6, rng)
        pf = apply_reverse_mask(x, m, ScalePair(1.0, 0.0))
        xm, xr = split_by_mask(x, m)
        assert np.array_equal(pf.masked_out.data, xm.data)
        assert np.array_equal(pf.paired_out.data, xr.data)

    def test_fixed_half(self):
        rng = np.random.default_rng(6)
        x = feats(rng)
        pf = apply_reverse_mask(x, sample_mask(RegConfig(sampler=Sampler.IID_UNIT), 8, 6, rng), ScalePair(0.5, 0.5))
        np.testing.assert_array_equal(pf.masked_out.data, x.data / 2)
        np.testing.assert_array_equal(pf.paired_out.data, x.data / 2)

    def test_reverse_twice(self):
        m = sample_mask(RegConfig(sampler=Sampler.IID_UNIT), 7, 5, np.random.default_rng(7))
        assert reverse_mask(reverse_mask(m)) == m
        assert not np.any(reverse_mask(m).bits & m.bits)

    def test_mask_dims_checked(self):
        with pytest.raises(ValueError):
            apply_reverse_mask(feats(np.random.default_rng(0)), bipartition_mask(4, 6), ScalePair(1, 0))

    def test_gradient_flows_through_both_halves(self):
        rng = np.random.default_rng(8)
        x = Tensor(rng.standard_normal((1, 1, 1, 4, 4)), requires_grad=True)
        pf = apply_reverse_mask(x, bipartition_mask(4, 4), ScalePair(0.3, 0.9))
        (pf.masked_out.sum() + pf.paired_out.sum()).backward()
        np.testing.assert_allclose(x.grad, 1.0)


class TestRegularize:
    def test_prob_zero_is_identity(self):
        rng = np.random.default_rng(9)
        x = feats(rng)
        pf = maybe_regularize(x, RegConfig(prob=0.0), Policy.SCALING, rng)
        assert pf.masked_out is x and not pf.paired_out.data.any()

    def test_one_draw_per_call(self):
        cfg = RegConfig(prob=0.5)
        rng = np.random.default_rng(10)
        fired = 0
        for _ in range(2000):
            pf = maybe_regularize(feats(rng, (1, 1, 1, 8, 4)), cfg, Policy.DROPPING, rng)
            fired += bool(pf.paired_out.data.any())
        assert abs(fired / 2000 - 0.5) < 0.05

    def test_batch_and_frames_share_one_mask(self):
        rng = np.random.default_rng(11)
        x = Tensor(np.ones((3, 4, 2, 8, 6), np.float32))
        pf = maybe_regularize(x, RegConfig(sampler=Sampler.IID_UNIT), Policy.DROPPING, rng)
        ref = pf.masked_out.data[0, 0, 0]
        assert np.all(pf.masked_out.data == ref)

    def test_inference_is_deterministic(self):
        x = feats(np.random.default_rng(12))
        cfg_a, cfg_b = RegConfig(seed=1), RegConfig(seed=99)
        for policy in (Policy.DROPPING, Policy.SCALING):
            a, b = inference_split(x, cfg_a, policy), inference_split(x, cfg_b, policy)
            assert np.array_equal(a.masked_out.data, b.masked_out.data)
        half = inference_split(x, cfg_a, Policy.SCALING)
        np.testing.assert_array_equal(half.masked_out.data, x.data / 2)
        drop = inference_split(x, cfg_a, Policy.DROPPING)
        assert not drop.masked_out.data[..., 4:, :].any()
        ident = inference_split(x, RegConfig(inference_mode=InferenceMode.IDENTITY), Policy.DROPPING)
        assert ident.masked_out is x


class TestBaselines:
    def test_dropblock_equals_dropping_masked_half(self):
        x = feats(np.random.default_rng(13))
        cfg = RegConfig(prob=1.0)
        db = dropblock_apply(x, cfg, np.random.default_rng(5))
        pf = maybe_regularize(x, cfg, Policy.DROPPING, np.random.default_rng(5))
        assert np.array_equal(db.data, pf.masked_out.data)

    def test_scaling_dropblock_discards_pair(self):
        x = feats(np.random.default_rng(14))
        cfg = RegConfig(prob=1.0)
        sd = scaling_dropblock_apply(x, cfg, np.random.default_rng(6))
        pf = maybe_regularize(x, cfg, Policy.SCALING, np.random.default_rng(6))
        assert np.array_equal(sd.data, pf.masked_out.data)

    def test_eval_scaling(self):
        x = feats(np.random.default_rng(15))
        np.testing.assert_allclose(dropblock_apply(x, RegConfig(prob=1.0), None, train=False).data, x.data * 0.5)
        np.testing.assert_allclose(scaling_dropblock_apply(x, RegConfig(prob=0.5), None, train=False).data, x.data * 0.75)

    def test_random_erase_same_rectangle_every_frame(self):
        frames = np.ones((5, 64, 44), np.float32)
        out = random_erase_input(frames, 1.0, np.random.default_rng(16))
        assert (out == 0).any()
        for f in out[1:]:
            assert np.array_equal(f, out[0])
        area = (out[0] == 0).mean()
        assert 0.02 * 0.5 <= area <= 0.2 * 1.5
        assert np.array_equal(random_erase_input(frames, 0.0, np.random.default_rng(16)), frames)
