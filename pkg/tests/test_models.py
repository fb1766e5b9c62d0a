import numpy as np
import pytest

from geoflow.errors import DimensionMismatchError
from geoflow.models import (
    BilinearToy,
    Dataset,
    LinearToy,
    MlpMuP,
    eval_jacobian,
    eval_outputs,
    eval_vjp,
    mup_init,
    sine_dataset,
    singleton_dataset,
)


def fd_jacobian(model, theta, data):
    """Central finite differences with per-coordinate step 1e-5*(1+|theta_j|)."""
    g0 = eval_outputs(model, theta, data)
    J = np.zeros((g0.shape[0], theta.shape[0]))
    for j in range(theta.shape[0]):
        h = 1e-5 * (1.0 + abs(theta[j]))
        hi = theta.copy(); hi[j] += h
        lo = theta.copy(); lo[j] -= h
        J[:, j] = (eval_outputs(model, hi, data) - eval_outputs(model, lo, data)) / (2 * h)
    return J


def max_rel_err(a, b):
    scale = 1.0 + np.max(np.abs(a))
    return np.max(np.abs(a - b)) / scale


class TestDataset:
    def test_rejects_duplicate_inputs(self):
        with pytest.raises(ValueError, match="identical"):
            Dataset(inputs=[[1.0], [1.0]], targets=[0.0, 1.0])

    def test_rejects_length_mismatch(self):
        with pytest.raises(ValueError, match="targets length"):
            Dataset(inputs=[[1.0], [2.0]], targets=[0.0])

    def test_rejects_empty(self):
        with pytest.raises(ValueError):
            Dataset(inputs=np.empty((0, 1)), targets=np.empty(0))


class TestToyOutputs:
    def test_bilinear_direct_product(self):
        g = eval_outputs(BilinearToy(), np.array([2.0, 0.1]), singleton_dataset())
        np.testing.assert_allclose(g, [0.2], atol=1e-15)

    def test_linear_zero_params(self):
        g = eval_outputs(LinearToy(), np.array([0.0, 0.0]), singleton_dataset())
        np.testing.assert_allclose(g, [0.0], atol=0)

    def test_mlp_zero_parameters_zero_outputs(self):
        spec = MlpMuP(widths=(8, 8))
        g = eval_outputs(spec, np.zeros(spec.num_params), sine_dataset(5))
        np.testing.assert_allclose(g, np.zeros(5), atol=0)

    def test_dimension_mismatch_names_sizes(self):
        with pytest.raises(DimensionMismatchError) as err:
            eval_outputs(BilinearToy(), np.array([1.0, 2.0, 3.0]), singleton_dataset())
        assert err.value.expected == 2 and err.value.actual == 3


class TestToyJacobians:
    def test_bilinear_analytic(self):
        J = eval_jacobian(BilinearToy(), np.array([2.0, 0.1]), singleton_dataset())
        np.testing.assert_allclose(J, [[0.1, 2.0]], atol=1e-15)

    def test_linear_constant_jacobian(self):
        data = singleton_dataset()
        for theta in ([0.0, 0.0], [3.0, -7.0], [0.5, 0.5]):
            J = eval_jacobian(LinearToy(), np.array(theta), data)
            np.testing.assert_allclose(J, [[1.0, 1.0]], atol=0)


class TestMlp:
    def test_jacobian_matches_finite_differences(self):
        spec = MlpMuP(widths=(6, 5), activation="tanh")
        data = sine_dataset(4)
        theta = mup_init(spec, seed=7)
        J = eval_jacobian(spec, theta, data)
        assert max_rel_err(J, fd_jacobian(spec, theta, data)) < 1e-6

    def test_gelu_jacobian_matches_finite_differences(self):
        spec = MlpMuP(widths=(5, 4), activation="gelu")
        data = sine_dataset(3, noise_std=0.1, seed=1)
        theta = mup_init(spec, seed=3)
        J = eval_jacobian(spec, theta, data)
        assert max_rel_err(J, fd_jacobian(spec, theta, data)) < 1e-6

    def test_vjp_matches_explicit_jacobian(self):
        spec = MlpMuP(widths=(6, 6))
        data = sine_dataset(5)
        theta = mup_init(spec, seed=11)
        rng = np.random.default_rng(0)
        w = rng.standard_normal(5)
        np.testing.assert_allclose(eval_vjp(spec, theta, data, w),
                                   eval_jacobian(spec, theta, data).T @ w,
                                   rtol=1e-12, atol=1e-14)

    def test_layer_scales_rescale_blocks(self):
        base = MlpMuP(widths=(4, 4))
        scaled = MlpMuP(widths=(4, 4), layer_scales=(2.0, 1.0, 1.0, 1.0, 1.0))
        theta = mup_init(base, seed=5)
        data = sine_dataset(3)
        doubled = theta.copy()
        doubled[:4] *= 2.0  # W1 block occupies the first w1*d entries
        np.testing.assert_allclose(eval_outputs(scaled, theta, data),
                                   eval_outputs(base, doubled, data), rtol=1e-12)


class TestMupInit:
    def test_same_seed_identical(self):
        spec = MlpMuP(widths=(16, 16))
        np.testing.assert_array_equal(mup_init(spec, 42), mup_init(spec, 42))

    def test_different_seeds_differ(self):
        spec = MlpMuP(widths=(16, 16))
        assert np.any(mup_init(spec, 0) != mup_init(spec, 1))

    def test_width_doubling_scales_hidden_std(self):
        # second-layer weight std follows 1/sqrt(fan_in): doubling width gives 1/sqrt(2)
        def hidden_block_std(width, seed):
            spec = MlpMuP(widths=(width, width))
            theta = mup_init(spec, seed)
            start = width * spec.input_dim + width
            block = theta[start:start + width * width]
            assert block.size >= 10 ** 4
            return np.std(block)

        ratio = hidden_block_std(256, 0) / hidden_block_std(128, 0)
        assert abs(ratio - 1.0 / np.sqrt(2.0)) < 0.05 / np.sqrt(2.0)

    def test_rejects_non_mlp(self):
        with pytest.raises(TypeError, match="MlpMuP"):
            mup_init(BilinearToy(), 0)


class TestJacobianAgreementSweep:
    @pytest.mark.parametrize("model_seed", range(3))
    def test_twenty_random_probes(self, model_seed):
        rng = np.random.default_rng(100 + model_seed)
        models = [BilinearToy(), LinearToy(), MlpMuP(widths=(5, 4))]
        model = models[model_seed % 3]
        for probe in range(20):
            n = int(rng.integers(1, 5))
            x = np.sort(rng.standard_normal(n))
            while len(np.unique(x)) < n:
                x = np.sort(rng.standard_normal(n))
            data = Dataset(inputs=x[:, None], targets=rng.standard_normal(n))
            theta = rng.standard_normal(model.num_params)
            J = eval_jacobian(model, theta, data)
            assert max_rel_err(J, fd_jacobian(model, theta, data)) < 1e-6
