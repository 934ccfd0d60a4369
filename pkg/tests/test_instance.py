import numpy as np
import pytest

from decunroll.errors import ParameterError, ParseError, ValidationError
from decunroll.instance import (
    InstanceConfig,
    LassoInstance,
    derive_seed,
    local_gradient,
    namse,
    noise_sigma_from_snr,
    read_dataset,
    sample_dataset,
    sample_instance,
    sample_sparse_signal,
    stack,
    write_dataset,
)
from decunroll.topology import CommGraph


class TestSignal:
    def test_dense(self, rng):
        x = sample_sparse_signal(100, 100, rng)
        assert np.count_nonzero(x) == 100

    def test_mean_support(self):
        rng = np.random.default_rng(5)
        counts = [np.count_nonzero(sample_sparse_signal(100, 8, rng)) for _ in range(10_000)]
        assert 7.5 <= np.mean(counts) <= 8.5

    def test_default_sparsity(self):
        assert InstanceConfig(m_total=300, n_nodes=5).p_s == 30

    @pytest.mark.parametrize("p_s", [0, -1, 101])
    def test_bad_sparsity(self, p_s):
        with pytest.raises(ParameterError):
            sample_sparse_signal(100, p_s)


class TestNoise:
    @pytest.mark.parametrize("snr,power,sigma", [
        (0, 1, 1.0),
        (30, 8, np.sqrt(8 / 1000)),
        (50, 30, np.sqrt(30e-5)),
    ])
    def test_sigma(self, snr, power, sigma):
        assert noise_sigma_from_snr(snr, power) == pytest.approx(sigma, rel=1e-12)

    def test_rounded_values(self):
        assert round(noise_sigma_from_snr(30, 8), 5) == 0.08944
        assert round(noise_sigma_from_snr(50, 30), 5) == 0.01732


class TestSampling:
    def test_large_setting_shapes(self):
        inst = sample_instance(InstanceConfig(5, 6, 100, 300, 50, 30, seed=1))
        assert inst.A.shape == (5, 60, 100) and inst.y.shape == (5, 60)
        assert inst.graph.n_edges == 6

    def test_noiseless(self):
        inst = sample_instance(InstanceConfig(3, 2, 10, 9, sigma_override=0.0, p_s=3, seed=2))
        np.testing.assert_array_equal(inst.y, np.einsum("nmd,d->nm", inst.A, inst.x_star))

    def test_deterministic(self, small_cfg):
        a, b = sample_instance(small_cfg), sample_instance(small_cfg)
        np.testing.assert_array_equal(a.A, b.A)
        np.testing.assert_array_equal(a.y, b.y)
        assert a.graph.edges == b.graph.edges

    def test_entry_variance(self):
        inst = sample_instance(InstanceConfig(5, 6, 200, 600, 50, 10, seed=9))
        assert inst.A.size >= 10**5
        assert 0.95 <= inst.A.var() <= 1.05

    def test_indivisible_m(self):
        with pytest.raises(ParameterError):
            InstanceConfig(n_nodes=5, m_total=52)

    def test_seed_splitting_distinct(self):
        assert len({derive_seed(0, 0, k) for k in range(100)}) == 100
        assert derive_seed(0, 0, 1) != derive_seed(0, 1, 0)

    def test_noiseless_least_squares_recovery(self):
        inst = sample_instance(InstanceConfig(3, 3, 12, 30, sigma_override=0.0, p_s=4, seed=4))
        A = inst.A.reshape(-1, inst.d)
        x, *_ = np.linalg.lstsq(A, inst.y.ravel(), rcond=None)
        np.testing.assert_allclose(x, inst.x_star, atol=1e-10)

    def test_shape_validation(self):
        g = CommGraph(2, [(0, 1)])
        with pytest.raises(ValidationError):
            LassoInstance(g, np.zeros((3, 2, 4)), np.zeros((3, 2)), np.zeros(4))


class TestNamse:
    def test_exact_is_neg_inf(self):
        xs = np.array([1.0, 0.0, -2.0])
        assert namse(stack(xs, 4), xs) == float("-inf")

    def test_zero_estimate(self):
        xs = np.array([1.0, 0.5, -2.0])
        assert abs(namse(np.zeros((5, 3)), xs) - (-10 * np.log10(5))) <= 1e-12
        assert round(namse(np.zeros((5, 3)), xs), 5) == -6.98970

    def test_unit_ratio(self):
        xs = np.array([3.0, 4.0])
        assert namse(np.array([[6.0, 8.0]]), xs) == pytest.approx(0.0, abs=1e-12)

    def test_zero_truth(self):
        with pytest.raises(ParameterError):
            namse(np.ones((2, 3)), np.zeros(3))

    def test_batch_averages_before_log(self):
        xs = np.array([[1.0, 0.0], [0.0, 2.0]])
        x = np.zeros((2, 1, 2))
        x[0, 0] = [0.0, 0.0]
        x[1, 0] = [0.0, 2.0]
        # errors 1 and 0, references 1 and 4
        assert namse(x, xs) == pytest.approx(10 * np.log10(0.5 / 2.5))

    def test_monotone_in_perturbation(self, rng):
        xs = rng.standard_normal(6)
        p = rng.standard_normal((3, 6))
        vals = [namse(stack(xs, 3) + c * p, xs) for c in (0.01, 0.1, 1.0, 10.0)]
        assert np.all(np.diff(vals) > 0)


class TestLocalGradient:
    def test_consistent_point(self, small_inst):
        x = np.linalg.lstsq(small_inst.A[0], small_inst.y[0], rcond=None)[0]
        # underdetermined block: least squares hits y exactly
        np.testing.assert_allclose(local_gradient(small_inst, 0, x), 0, atol=1e-9)

    def test_identity_block(self):
        g = CommGraph(1, [])
        inst = LassoInstance(g, np.eye(3)[None], np.zeros((1, 3)), np.ones(3))
        v = np.array([1.0, -2.0, 3.0])
        np.testing.assert_allclose(local_gradient(inst, 0, v), v)

    def test_finite_differences(self, small_inst, rng):
        A, y = small_inst.A[2], small_inst.y[2]
        x = rng.standard_normal(small_inst.d)

        def f(z):
            return 0.5 * np.sum((A @ z - y) ** 2)

        h = 1e-6
        fd = np.array([(f(x + h * e) - f(x - h * e)) / (2 * h) for e in np.eye(len(x))])
        g = local_gradient(small_inst, 2, x)
        assert np.linalg.norm(fd - g) <= 1e-6 * np.linalg.norm(g)

    def test_shape_mismatch(self, small_inst):
        with pytest.raises(ValidationError):
            local_gradient(small_inst, 0, np.zeros(3))


class TestDatasetFiles:
    def test_round_trip(self, tmp_path, small_cfg):
        samples = sample_dataset(small_cfg, 10)
        path = tmp_path / "d.txt"
        write_dataset(path, samples)
        back = read_dataset(path)
        assert len(back) == 10
        for a, b in zip(samples, back):
            np.testing.assert_array_equal(a.A, b.A)
            np.testing.assert_array_equal(a.y, b.y)
            np.testing.assert_array_equal(a.x_star, b.x_star)
            assert a.graph.edges == b.graph.edges
            assert a.seed == b.seed

    def test_empty(self, tmp_path):
        path = tmp_path / "e.txt"
        write_dataset(path, [])
        assert read_dataset(path) == []

    @pytest.mark.parametrize("keep", [0.1, 0.5, 0.97])
    def test_truncated(self, tmp_path, small_cfg, keep):
        path = tmp_path / "d.txt"
        write_dataset(path, sample_dataset(small_cfg, 2))
        lines = path.read_text().splitlines()
        path.write_text("\n".join(lines[: int(len(lines) * keep)]) + "\n")
        with pytest.raises(ParseError) as err:
            read_dataset(path)
        assert "line" in str(err.value)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "x.txt"
        path.write_text("hello\n")
        with pytest.raises(ParseError):
            read_dataset(path)
