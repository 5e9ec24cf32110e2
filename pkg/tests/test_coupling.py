import numpy as np
import pytest

from mdet3d import tensor as T
from mdet3d.coupling import (
    CRParams,
    attention_mask,
    couple,
    couple_recouple,
    infer_copy,
    infer_mask,
    recouple,
    se_gate,
)
from mdet3d.errors import ConfigError, DimensionError, RegistryError

from gradcheck import max_rel_error


def make_params(n=2, channels=4, seed=0, **kw):
    return CRParams.create(n, channels, np.random.default_rng(seed), **kw)


def rand_maps(n=2, channels=4, h=2, w=2, seed=1):
    rng = np.random.default_rng(seed)
    return [T.Tensor(rng.normal(size=(channels, h, w)), requires_grad=True) for _ in range(n)]


class TestAttentionMask:
    def test_sums_to_one_everywhere(self):
        p = make_params(n=3)
        f = rand_maps(n=3, h=5, w=7)
        a = attention_mask(T.concat_channels(f), p).data
        np.testing.assert_allclose(a.sum(axis=0), 1.0, atol=1e-12)

    def test_single_dataset_mask_is_one(self):
        p = make_params(n=1)
        f = rand_maps(n=1)
        a = attention_mask(T.concat_channels(f), p).data
        np.testing.assert_allclose(a, 1.0, atol=1e-12)


class TestCoupleHandFormula:
    def test_grid_1x1x1_matches_hand_computation(self):
        # one channel, one cell: everything reduces to scalars
        p = make_params(n=2, channels=1, seed=3, reduction=1)
        x0, x1 = 0.7, -1.3
        f = [T.Tensor(np.array([[[x0]]])), T.Tensor(np.array([[[x1]]]))]
        k = p.mask_conv_k.data.reshape(2, 2)
        logits = k @ np.array([x0, x1]) + p.mask_conv_b.data
        attn = np.exp(logits - logits.max())
        attn /= attn.sum()
        m_shared = max(x0, x1)
        expect = attn[0] * m_shared * x0 + attn[1] * m_shared * x1
        got = couple(f, p).data
        np.testing.assert_allclose(got, [[[expect]]], atol=1e-12)

    def test_recouple_1x1x1_matches_hand_computation(self):
        p = make_params(n=2, channels=1, seed=4, reduction=1)
        shared = T.Tensor(np.array([[[0.9]]]))
        f0 = T.Tensor(np.array([[[-0.4]]]))
        blk = p.se_blocks[0]
        h = np.maximum(blk.w1.data.T @ np.array([0.9]) + blk.b1.data, 0.0)
        g = 1.0 / (1.0 + np.exp(-(blk.w2.data.T @ h + blk.b2.data)))
        expect = g[0] * 0.9 + (-0.4)
        got = recouple(shared, f0, 0, p).data
        np.testing.assert_allclose(got, [[[expect]]], atol=1e-12)

    def test_attention_off_is_mean(self):
        p = make_params(attention_enabled=False)
        f = rand_maps()
        expect = 0.5 * (f[0].data + f[1].data)
        np.testing.assert_allclose(couple(f, p).data, expect, atol=1e-12)

    def test_se_off_is_plain_residual(self):
        p = make_params(se_enabled=False)
        f = rand_maps()
        shared = couple(f, p)
        np.testing.assert_array_equal(recouple(shared, f[0], 0, p).data, shared.data + f[0].data)

    def test_se_zero_weights_give_half_gate(self):
        p = make_params()
        for blk in p.se_blocks:
            blk.w1.data[:] = 0
            blk.w2.data[:] = 0
            blk.b1.data[:] = 0
            blk.b2.data[:] = 0
        f = rand_maps()
        shared = couple(f, p)
        out = recouple(shared, f[1], 1, p).data
        np.testing.assert_allclose(out, 0.5 * shared.data + f[1].data, atol=1e-12)

    def test_both_off_single_branch_doubles(self):
        p = make_params(n=1, attention_enabled=False, se_enabled=False)
        f = rand_maps(n=1)
        out = couple_recouple(f, p)[0].data
        np.testing.assert_array_equal(out, 2.0 * f[0].data)


class TestInferenceModes:
    def test_copy_mode_bitwise_matches_training_path(self):
        p = make_params(n=3)
        x = rand_maps(n=1, seed=7)[0]
        train_out = couple_recouple([x, x, x], p)
        for i in range(3):
            np.testing.assert_array_equal(infer_copy(x, i, p).data, train_out[i].data)

    def test_copy_and_mask_differ(self):
        p = make_params()
        x = rand_maps(n=1, seed=8)[0]
        assert not np.array_equal(infer_copy(x, 0, p).data, infer_mask(x, 0, p).data)

    def test_mask_mode_zero_branches(self):
        p = make_params(n=2)
        x = rand_maps(n=1, seed=9)[0]
        zero = T.zeros(x.shape)
        expect = couple_recouple([x, zero], p)[0].data
        np.testing.assert_array_equal(infer_mask(x, 0, p).data, expect)


class TestValidation:
    def test_wrong_branch_count(self):
        with pytest.raises(RegistryError):
            couple(rand_maps(n=3), make_params(n=2))

    def test_mismatched_shapes(self):
        f = rand_maps()
        f[1] = T.Tensor(np.zeros((4, 3, 2)))
        with pytest.raises(DimensionError):
            couple(f, make_params())

    def test_wrong_channel_count(self):
        with pytest.raises(DimensionError):
            couple(rand_maps(channels=8), make_params(channels=4))

    def test_bad_reduction(self):
        with pytest.raises(ConfigError):
            make_params(channels=6, reduction=4)

    def test_recouple_index_out_of_range(self):
        p = make_params()
        f = rand_maps()
        with pytest.raises(RegistryError):
            recouple(couple(f, p), f[0], 2, p)


class TestNamedParams:
    def test_toggles_change_parameter_count(self):
        full = make_params()
        no_attn = make_params(attention_enabled=False)
        no_se = make_params(se_enabled=False)
        assert len(full.named()) == 2 + 4 * 2
        assert len(no_attn.named()) == 4 * 2
        assert len(no_se.named()) == 2


class TestGradients:
    def test_full_module_gradient(self):
        rng = np.random.default_rng(11)
        p = make_params(seed=12)
        f = rand_maps(seed=13)
        w = [T.Tensor(rng.normal(size=m.shape)) for m in f]

        def build():
            outs = couple_recouple(f, p)
            total = None
            for o, wi in zip(outs, w):
                term = T.tsum(T.mul(o, wi))
                total = term if total is None else T.add(total, term)
            return total

        params = list(f) + list(make_lookup(p))
        err = max_rel_error(build, params, rng, n_samples=20)
        assert err < 1e-4

    def test_se_gate_gradient(self):
        rng = np.random.default_rng(14)
        p = make_params(seed=15)
        x = T.Tensor(rng.normal(size=(4, 2, 2)), requires_grad=True)

        def build():
            return T.tsum(se_gate(x, p.se_blocks[0]))

        blk = p.se_blocks[0]
        err = max_rel_error(build, [x, blk.w1, blk.b1, blk.w2, blk.b2], rng, n_samples=20)
        assert err < 1e-4


def make_lookup(p: CRParams):
    return list(p.named().values())
