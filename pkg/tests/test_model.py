import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from oracles import fd_gradient, fd_jacobian

from ihaudit import model as M
from ihaudit.errors import DimensionMismatch, EmptyDataset, FormatError, HessianTooLarge
from ihaudit.model import ModelSpec, Record

LIN2 = ModelSpec.linear(2)


def rec(x, y):
    return Record(np.asarray(x, dtype=float), y)


def mlp_instance(activation="tanh", loss_kind=M.CROSS_ENTROPY, seed=0, n=7):
    rng = np.random.default_rng(seed)
    out = 3 if loss_kind == M.CROSS_ENTROPY else 2
    spec = ModelSpec.mlp(4, (5,), out, loss_kind=loss_kind, activation=activation)
    w = rng.normal(scale=0.7, size=spec.num_params)
    X = rng.normal(size=(n, 4))
    y = rng.integers(0, out, size=n)
    return spec, w, X, y


class TestSpec:
    def test_cross_entropy_needs_two_outputs(self):
        with pytest.raises(ValueError):
            ModelSpec.mlp(3, (4,), 1, loss_kind=M.CROSS_ENTROPY)

    def test_param_count_and_layout(self):
        spec = ModelSpec.mlp(3, (4,), 2)
        assert spec.num_params == 3 * 4 + 4 + 4 * 2 + 2
        w = np.arange(spec.num_params, dtype=float)
        (W1, b1), (W2, b2) = M.unpack(spec, w)
        # forward order, weights row-major before biases
        np.testing.assert_array_equal(W1.ravel(), np.arange(12))
        np.testing.assert_array_equal(b1, np.arange(12, 16))
        np.testing.assert_array_equal(W2.ravel(), np.arange(16, 24))
        np.testing.assert_array_equal(M.pack(spec, M.unpack(spec, w)), w)

    def test_dict_round_trip(self):
        spec = ModelSpec.mlp(3, (4, 5), 2, activation="softplus")
        assert ModelSpec.from_dict(spec.to_dict()) == spec
        assert spec.digest() != ModelSpec.mlp(3, (4, 5), 2).digest()


class TestLoss:
    def test_exact_fit(self):
        assert M.loss(LIN2, np.array([1.0, 1.0]), rec([1, 2], 3.0)) == 0.0

    def test_arithmetic(self):
        assert M.loss(LIN2, np.array([1.0, 1.0]), rec([1, 2], 0.0)) == 9.0

    def test_uniform_logits(self):
        spec = ModelSpec.mlp(4, (3,), 10)
        assert M.loss(spec, np.zeros(spec.num_params), rec(np.ones(4), 7)) == pytest.approx(np.log(10), abs=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(DimensionMismatch):
            M.loss(LIN2, np.ones(2), rec([1, 2, 3], 0.0))
        with pytest.raises(DimensionMismatch):
            M.loss(LIN2, np.ones(3), rec([1, 2], 0.0))

    def test_cross_entropy_stable_for_large_logits(self):
        spec = ModelSpec.mlp(1, (1,), 2, activation="relu")
        w = np.array([1000.0, 0.0, 1.0, -1.0, 0.0, 0.0])
        assert np.isfinite(M.loss(spec, w, rec([1.0], 1)))


class TestGrad:
    def test_analytic(self):
        np.testing.assert_allclose(M.grad(LIN2, np.array([1.0, 1.0]), rec([1, 2], 0.0)), [6.0, 12.0])

    def test_zero_at_exact_fit(self):
        np.testing.assert_array_equal(M.grad(LIN2, np.array([1.0, 1.0]), rec([1, 2], 3.0)), [0.0, 0.0])

    @pytest.mark.parametrize("activation", ["tanh", "softplus", "relu"])
    @pytest.mark.parametrize("loss_kind", [M.CROSS_ENTROPY, M.SQUARED])
    def test_finite_differences(self, activation, loss_kind):
        spec, w, X, y = mlp_instance(activation, loss_kind)
        z = rec(X[0], y[0])
        g = M.grad(spec, w, z)
        ref = fd_gradient(lambda v: M.loss(spec, v, z), w, 1e-5)
        assert np.linalg.norm(g - ref) <= 1e-5 * np.linalg.norm(ref)

    def test_per_example_rows(self):
        spec, w, X, y = mlp_instance()
        G = M.per_example_grads(spec, w, X, y)
        for i in range(len(y)):
            np.testing.assert_allclose(G[i], M.grad(spec, w, rec(X[i], y[i])), rtol=1e-12, atol=1e-15)


class TestDatasetLossGrad:
    def test_single_record(self):
        spec, w, X, y = mlp_instance(n=1)
        z = rec(X[0], y[0])
        L, g = M.dataset_loss_grad(spec, w, [z])
        assert L == pytest.approx(M.loss(spec, w, z), rel=1e-14)
        np.testing.assert_allclose(g, M.grad(spec, w, z), rtol=1e-14)

    def test_opposite_gradients_cancel(self):
        w = np.array([1.0, 1.0])
        # residuals +3 and -3 at the same features give gradients g and -g
        L, g = M.dataset_loss_grad(LIN2, w, [rec([1, 2], 0.0), rec([1, 2], 6.0)])
        np.testing.assert_allclose(g, 0.0, atol=1e-15)
        assert L == 9.0

    def test_naive_mean(self, rng):
        spec, w, X, y = mlp_instance(n=100, seed=3)
        recs = M.records_from_arrays(X, y)
        L, g = M.dataset_loss_grad(spec, w, recs)
        naive_L = sum(M.loss(spec, w, z) for z in recs) / 100
        naive_g = sum(M.grad(spec, w, z) for z in recs) / 100
        assert L == pytest.approx(naive_L, rel=1e-12)
        np.testing.assert_allclose(g, naive_g, rtol=1e-12, atol=1e-14)

    def test_empty(self):
        with pytest.raises(EmptyDataset):
            M.dataset_loss_grad(LIN2, np.ones(2), [])

    def test_fast_path_agrees(self):
        spec, w, X, y = mlp_instance(n=20)
        np.testing.assert_array_equal(M.mean_grad(spec, w, X, y), M.mean_loss_grad(spec, w, X, y)[1])


class TestHessian:
    def test_linear_analytic_hvp(self):
        out = M.hvp(LIN2, np.zeros(2), [rec([1, 2], 0.0)], np.array([1.0, 0.0]))
        np.testing.assert_allclose(out, [2.0, 4.0])

    def test_zero_vector(self):
        spec, w, X, y = mlp_instance()
        np.testing.assert_array_equal(M.hvp(spec, w, (X, y), np.zeros(spec.num_params)), 0.0)

    def test_linear_exact(self):
        H = M.exact_hessian(LIN2, np.array([0.3, -2.0]), [rec([1, 2], 0.0)])
        np.testing.assert_allclose(H, [[2, 4], [4, 8]])

    def test_symmetric_pair(self):
        one = M.exact_hessian(LIN2, np.zeros(2), [rec([1, 2], 1.0)])
        two = M.exact_hessian(LIN2, np.zeros(2), [rec([1, 2], 1.0), rec([-1, -2], 0.5)])
        np.testing.assert_allclose(two, one)

    def test_linear_hessian_independent_of_w(self, rng):
        X = rng.normal(size=(30, 3))
        y = rng.normal(size=30)
        spec = ModelSpec.linear(3)
        H1 = M.exact_hessian(spec, rng.normal(size=3), (X, y))
        H2 = M.exact_hessian(spec, rng.normal(size=3), (X, y))
        np.testing.assert_allclose(H1, H2, atol=1e-13)
        np.testing.assert_allclose(H1, 2 * X.T @ X / 30, rtol=1e-12)

    @pytest.mark.parametrize("activation", ["tanh", "softplus", "relu"])
    @pytest.mark.parametrize("loss_kind", [M.CROSS_ENTROPY, M.SQUARED])
    def test_hvp_finite_differences(self, activation, loss_kind):
        spec, w, X, y = mlp_instance(activation, loss_kind, seed=2)
        v = np.random.default_rng(9).normal(size=spec.num_params)
        h = 1e-4
        fd = (M.mean_grad(spec, w + h * v, X, y) - M.mean_grad(spec, w - h * v, X, y)) / (2 * h)
        out = M.hvp(spec, w, (X, y), v)
        assert np.linalg.norm(out - fd) <= 1e-4 * np.linalg.norm(fd)

    @pytest.mark.parametrize("activation", ["tanh", "softplus"])
    def test_exact_hessian_finite_differences(self, activation):
        spec, w, X, y = mlp_instance(activation, seed=4)
        H = M.exact_hessian(spec, w, (X, y))
        fd = fd_jacobian(lambda v: M.mean_grad(spec, v, X, y), w)
        assert np.linalg.norm(H - fd) <= 1e-4 * np.linalg.norm(fd)

    def test_exactly_symmetric_and_columns_match_hvp(self):
        spec, w, X, y = mlp_instance("softplus", seed=5)
        H = M.exact_hessian(spec, w, (X, y))
        assert np.max(np.abs(H - H.T)) == 0.0
        for j in range(spec.num_params):
            e = np.zeros(spec.num_params)
            e[j] = 1.0
            np.testing.assert_allclose(M.hvp(spec, w, (X, y), e), H[:, j], atol=1e-8)

    def test_budget(self):
        spec, w, X, y = mlp_instance()
        with pytest.raises(HessianTooLarge):
            M.exact_hessian(spec, w, (X, y), budget_bytes=8 * spec.num_params**2 - 1)

    @settings(max_examples=15, deadline=None)
    @given(st.integers(0, 2**31))
    def test_hvp_is_linear(self, seed):
        spec, w, X, y = mlp_instance("tanh", seed=seed % 1000)
        rng = np.random.default_rng(seed)
        u, v = rng.normal(size=(2, spec.num_params))
        lhs = M.hvp(spec, w, (X, y), 2 * u - 3 * v)
        rhs = 2 * M.hvp(spec, w, (X, y), u) - 3 * M.hvp(spec, w, (X, y), v)
        np.testing.assert_allclose(lhs, rhs, rtol=1e-9, atol=1e-10)


class TestPersistence:
    def test_round_trip(self, tmp_path):
        spec, w, _, _ = mlp_instance()
        p = tmp_path / "w.params"
        M.save_parameters(p, spec, w)
        raw = p.read_bytes()
        assert raw[:7] == b"IHAPAR1" and raw[7:39] == spec.digest()
        assert int.from_bytes(raw[39:47], "little") == spec.num_params
        np.testing.assert_array_equal(M.load_parameters(p, spec), w)

    def test_spec_mismatch(self, tmp_path):
        spec, w, _, _ = mlp_instance()
        p = tmp_path / "w.params"
        M.save_parameters(p, spec, w)
        other = ModelSpec.mlp(4, (5,), 3, activation="relu")
        with pytest.raises(FormatError):
            M.load_parameters(p, other)

    def test_truncated(self, tmp_path):
        spec, w, _, _ = mlp_instance()
        p = tmp_path / "w.params"
        M.save_parameters(p, spec, w)
        p.write_bytes(p.read_bytes()[:-3])
        with pytest.raises(FormatError):
            M.load_parameters(p, spec)


def test_accuracy_single_output_thresholds_at_half():
    w = np.array([1.0, 0.0])
    X = np.array([[0.7, 0.0], [0.2, 0.0]])
    assert M.accuracy(LIN2, w, X, np.array([1.0, 0.0])) == 1.0
