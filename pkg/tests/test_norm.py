import numpy as np
import pytest

from mdet3d import tensor as T
from mdet3d.errors import ContractError, RegistryError, StateError
from mdet3d.norm import POOLED_ID, DatasetNormState, dsnorm_forward, dsnorm_update_running

from gradcheck import max_rel_error


def make_state(channels=3, **kw):
    state = DatasetNormState(channels, **kw)
    state.register_dataset(0)
    state.register_dataset(1)
    state.register_dataset(POOLED_ID)
    return state


def batch(mean, channels=3, n=4, hw=6, seed=0, scale=2.0):
    rng = np.random.default_rng(seed)
    return T.Tensor(rng.normal(mean, scale, size=(n, channels, hw, hw)))


class TestTrainMode:
    def test_output_zero_mean_unit_var(self):
        state = make_state()
        out = dsnorm_forward(batch(5.0), 0, state).data
        for c in range(3):
            assert abs(out[:, c].mean()) < 1e-6
            assert abs(out[:, c].var() - 1.0) < 1e-5

    def test_shared_affine_restores_scale(self):
        state = make_state()
        state.gamma.data[:] = 2.0
        state.beta.data[:] = 3.0
        out = dsnorm_forward(batch(0.0), 0, state).data
        for c in range(3):
            assert out[:, c].mean() == pytest.approx(3.0, abs=1e-5)
            assert out[:, c].std() == pytest.approx(2.0, abs=1e-4)

    def test_removes_inter_dataset_mean_gap(self):
        state = make_state()
        a = dsnorm_forward(batch(5.0, seed=1, scale=1.0), 0, state).data
        b = dsnorm_forward(batch(-5.0, seed=2, scale=1.0), 1, state).data
        assert abs(a.mean()) < 1e-6 and abs(b.mean()) < 1e-6

    def test_pooled_stats_leave_residual_offset(self):
        # the statistics-shared baseline cannot zero both datasets' means
        state = make_state()
        xa, xb = batch(5.0, seed=3, scale=1.0), batch(-5.0, seed=4, scale=1.0)
        joint = T.stack([xa, xb])
        flat = T.reshape(joint, (8, 3, 6, 6))
        pooled = dsnorm_forward(flat, POOLED_ID, state).data
        res_a, res_b = pooled[:4].mean(), pooled[4:].mean()
        assert abs(res_a) > 0.5 and abs(res_b) > 0.5

    def test_unknown_dataset(self):
        with pytest.raises(RegistryError):
            dsnorm_forward(batch(0.0), 9, make_state())

    def test_single_sample_rejected(self):
        state = make_state(channels=2)
        x = T.Tensor(np.zeros((2, 1, 1)))
        with pytest.raises(ContractError):
            dsnorm_forward(x, 0, state)


class TestRunningStats:
    def test_momentum_one_copies_batch(self):
        state = make_state(momentum=1.0)
        dsnorm_update_running(state, 0, np.array([1.0, 2.0, 3.0]), np.array([4.0, 5.0, 6.0]))
        np.testing.assert_allclose(state.running_mean[0], [1, 2, 3])
        np.testing.assert_allclose(state.running_var[0], [4, 5, 6])

    def test_momentum_zero_keeps_running(self):
        state = make_state(momentum=0.0)
        before = state.running_mean[0].copy()
        dsnorm_update_running(state, 0, np.array([9.0, 9.0, 9.0]), np.ones(3))
        np.testing.assert_array_equal(state.running_mean[0], before)

    def test_two_updates_match_hand_ema(self):
        state = make_state(momentum=0.5)
        m1, v1 = np.array([2.0, 2, 2]), np.array([1.0, 1, 1])
        m2, v2 = np.array([4.0, 4, 4]), np.array([3.0, 3, 3])
        dsnorm_update_running(state, 0, m1, v1)
        dsnorm_update_running(state, 0, m2, v2)
        np.testing.assert_allclose(state.running_mean[0], 0.5 * (0.5 * 0 + 0.5 * 2) + 0.5 * 4, atol=1e-12)
        np.testing.assert_allclose(state.running_var[0], 0.5 * (0.5 * 1 + 0.5 * 1) + 0.5 * 3, atol=1e-12)

    def test_eval_mode_rejected(self):
        state = make_state()
        state.training = False
        with pytest.raises(StateError):
            dsnorm_update_running(state, 0, np.zeros(3), np.ones(3))


class TestEvalMode:
    def test_eval_is_deterministic_affine(self):
        state = make_state()
        dsnorm_forward(batch(3.0, seed=5), 0, state)  # populate running stats
        state.training = False
        x = batch(3.0, seed=6)
        a = dsnorm_forward(x, 0, state).data
        b = dsnorm_forward(x, 0, state).data
        np.testing.assert_array_equal(a, b)
        # affine: f(2x) - f(0) == 2 (f(x) - f(0))
        zero = dsnorm_forward(T.Tensor(np.zeros_like(x.data)), 0, state).data
        two = dsnorm_forward(T.Tensor(2.0 * x.data), 0, state).data
        np.testing.assert_allclose(two - zero, 2.0 * (a - zero), atol=1e-9)


class TestGradients:
    def test_train_mode_gradient(self):
        rng = np.random.default_rng(8)
        state = make_state(channels=2)
        x = T.Tensor(rng.uniform(-2, 2, size=(2, 2, 3, 3)), requires_grad=True)
        w = T.Tensor(rng.uniform(-1, 1, size=(2, 2, 3, 3)))

        def build():
            return T.tsum(T.mul(dsnorm_forward(x, 0, state), w))

        err = max_rel_error(build, [x, state.gamma, state.beta], rng, n_samples=20)
        assert err < 1e-4

    def test_gamma_beta_accumulate_over_datasets(self):
        state = make_state(channels=2)
        xa = T.Tensor(np.random.default_rng(1).normal(2, 1, size=(2, 2, 2, 2)))
        xb = T.Tensor(np.random.default_rng(2).normal(-2, 1, size=(2, 2, 2, 2)))
        loss = T.add(T.tsum(dsnorm_forward(xa, 0, state)), T.tsum(dsnorm_forward(xb, 1, state)))
        loss.backward()
        # beta grad = total element count across both dataset branches
        np.testing.assert_allclose(state.beta.grad, [16.0, 16.0])
        assert state.gamma.grad is not None
