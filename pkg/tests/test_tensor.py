import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cpae.tensor import (
    MLP,
    Adam,
    AdamState,
    BatchNorm,
    DimensionError,
    Linear,
    NonFiniteError,
    Tensor,
    TrainingDivergedError,
    adam_step,
    concat_latent,
    gradcheck,
    linear,
    load_checkpoint,
    maxpool_points,
    mlp_forward,
    relu,
    save_checkpoint,
    tanh,
)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def _away_from_zero(rng, shape, margin=0.1):
    x = rng.standard_normal(shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-12) * margin + x, x)


class TestConstruction:
    def test_values_and_shape(self):
        t = Tensor([[1, 2, 3], [4, 5, 6]])
        assert t.shape == (2, 3)
        assert t.dtype == np.float32
        assert t.data.size == 6

    def test_nan_rejected(self):
        with pytest.raises(NonFiniteError):
            Tensor([1.0, np.nan])

    def test_inf_rejected(self):
        with pytest.raises(NonFiniteError):
            Tensor([np.inf])

    def test_float64_kept(self):
        assert Tensor(np.zeros(3)).dtype == np.float64


class TestMlpForward:
    def test_identity_layer(self):
        layer = Linear(3, 3, np.random.default_rng(0))
        layer.weight.data[:] = np.eye(3)
        layer.bias.data[:] = 0
        x = np.array([[1.0, -2.0, 3.5], [0.25, 0.0, -1.0]], dtype=np.float32)
        np.testing.assert_array_equal(mlp_forward(Tensor(x), [layer]).data, x)

    def test_zero_weight_gives_bias_rows(self):
        layer = Linear(3, 3, np.random.default_rng(0))
        layer.weight.data[:] = 0
        layer.bias.data[:] = [1, 2, 3]
        out = mlp_forward(Tensor(np.random.default_rng(1).standard_normal((4, 3))), [layer])
        np.testing.assert_array_equal(out.data, np.tile([1, 2, 3], (4, 1)))

    def test_two_layer_relu_by_hand(self):
        # x = (1, -1)
        # hidden pre-activation = x @ [[1, -1], [-1, 2]] + (0.5, -0.5) = (2.5, -3.5)
        # relu -> (2.5, 0); output = 2.5 * 1 + 0 * (-2) + 0.25 = 2.75
        mlp = MLP(2, [(2, "relu", False), (1, None, False)], np.random.default_rng(0), dtype=np.float64)
        first, second = [l for l in mlp.layers if isinstance(l, Linear)]
        first.weight.data[:] = [[1, -1], [-1, 2]]
        first.bias.data[:] = [0.5, -0.5]
        second.weight.data[:] = [[1], [-2]]
        second.bias.data[:] = [0.25]
        out = mlp(Tensor(np.array([[1.0, -1.0]])))
        assert out.data[0, 0] == pytest.approx(2.75, abs=1e-15)

    def test_shape_mismatch(self):
        mlp = MLP(3, [(4, "relu", False)], np.random.default_rng(0))
        with pytest.raises(DimensionError):
            mlp(Tensor(np.zeros((5, 2))))

    def test_rows_are_independent_in_eval(self, rng):
        mlp = MLP(5, [(16, "relu", True), (8, "relu", True), (3, "tanh", False)], rng)
        mlp.train()
        mlp(Tensor(rng.standard_normal((64, 5)).astype(np.float32)))  # populate running stats
        mlp.eval()
        x = rng.standard_normal((20, 5)).astype(np.float32)
        full = mlp(Tensor(x)).data
        for i in range(len(x)):
            np.testing.assert_array_equal(mlp(Tensor(x[i : i + 1])).data[0], full[i])


class TestMaxpool:
    def test_example(self):
        np.testing.assert_array_equal(maxpool_points(Tensor([[1, 5], [3, 2]])).data, [3, 5])

    def test_backward_routes_to_argmax(self):
        x = Tensor(np.array([[1.0, 5.0], [3.0, 2.0]]), requires_grad=True)
        maxpool_points(x).sum().backward()
        np.testing.assert_array_equal(x.grad, [[0, 1], [1, 0]])
        # finite differences agree
        assert gradcheck(lambda t: maxpool_points(t).sum(), [x.data]) < 1e-8

    def test_tie_goes_to_lowest_index(self):
        x = Tensor(np.array([[2.0], [2.0], [1.0]]), requires_grad=True)
        maxpool_points(x).sum().backward()
        np.testing.assert_array_equal(x.grad[:, 0], [1, 0, 0])

    def test_empty_point_axis(self):
        with pytest.raises(ValueError):
            maxpool_points(Tensor(np.zeros((0, 3))))

    @given(st.integers(1, 30), st.integers(1, 6), st.integers(0, 2**31 - 1))
    @settings(max_examples=40, deadline=None)
    def test_permutation_invariant(self, k, d, seed):
        r = np.random.default_rng(seed)
        x = r.standard_normal((k, d))
        perm = r.permutation(k)
        np.testing.assert_array_equal(maxpool_points(Tensor(x)).data, maxpool_points(Tensor(x[perm])).data)

    def test_batched(self, rng):
        x = rng.standard_normal((4, 7, 3))
        np.testing.assert_array_equal(maxpool_points(Tensor(x)).data, x.max(axis=1))


class TestBackward:
    def test_non_scalar_loss(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(ValueError):
            (x * 2.0).backward()

    def test_squared_norm(self):
        x = Tensor(np.array([3.0, 4.0]), requires_grad=True)
        (x**2).sum().backward()
        np.testing.assert_allclose(x.grad, [6.0, 8.0])

    def test_constant_parameter_has_zero_grad(self):
        w = Tensor(np.ones((2, 2)), requires_grad=True)
        x = Tensor(np.ones(2), requires_grad=True)
        loss = (x * 3.0).sum() + (w * 0.0).sum()
        loss.backward()
        np.testing.assert_array_equal(w.grad, np.zeros((2, 2)))

    def test_linear_weight_grad_is_outer_product(self, rng):
        x = rng.standard_normal((1, 4))
        w = Tensor(rng.standard_normal((4, 3)), requires_grad=True)
        linear(Tensor(x), w).sum().backward()
        np.testing.assert_allclose(w.grad, np.outer(x[0], np.ones(3)))
        err = gradcheck(lambda wt: linear(Tensor(x), wt).sum(), [w.data])
        assert err < 1e-4

    def test_accumulates(self):
        x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
        (x * 2.0).sum().backward()
        (x * 2.0).sum().backward()
        np.testing.assert_array_equal(x.grad, [4.0, 4.0])
        x.zero_grad()
        assert x.grad is None

    def test_shared_subexpression(self):
        x = Tensor(np.array([2.0]), requires_grad=True)
        y = x * x
        (y + y).sum().backward()
        np.testing.assert_allclose(x.grad, [8.0])


class TestGradcheck:
    """Central differences in float64, h = 1e-4, rel. error < 1e-4 for every layer type."""

    def test_linear(self, rng):
        x, w, b = rng.standard_normal((5, 4)), rng.standard_normal((4, 3)), rng.standard_normal(3)
        assert gradcheck(lambda a, c, d: (linear(a, c, d) ** 2).sum(), [x, w, b]) < 1e-4

    def test_relu(self, rng):
        x = _away_from_zero(rng, (6, 4))
        assert gradcheck(lambda a: (relu(a) ** 2).sum(), [x]) < 1e-4

    def test_tanh(self, rng):
        x = rng.standard_normal((6, 4))
        assert gradcheck(lambda a: (tanh(a) * np.arange(4.0)).sum(), [x]) < 1e-4

    def test_batchnorm_training(self, rng):
        bn = BatchNorm(3, dtype=np.float64)
        x = rng.standard_normal((8, 3))
        w = rng.standard_normal((8, 3))
        gamma = rng.uniform(0.5, 2, 3)
        beta = rng.standard_normal(3)

        def f(a, g, b):
            bn.gamma, bn.beta = g, b
            return (bn(a) * w).sum()

        assert gradcheck(f, [x, gamma, beta]) < 1e-4

    def test_batchnorm_eval(self, rng):
        bn = BatchNorm(3, dtype=np.float64).eval()
        bn.running_mean = rng.standard_normal(3)
        bn.running_var = rng.uniform(0.5, 2, 3)
        x, w = rng.standard_normal((5, 3)), rng.standard_normal((5, 3))

        def f(a, g, b):
            bn.gamma, bn.beta = g, b
            return (bn(a) * w).sum()

        assert gradcheck(f, [x, rng.uniform(0.5, 2, 3), rng.standard_normal(3)]) < 1e-4

    def test_maxpool(self, rng):
        x = rng.permutation(40).reshape(2, 5, 4).astype(np.float64)  # distinct entries, no ties
        assert gradcheck(lambda a: (maxpool_points(a) ** 2).sum(), [x]) < 1e-4

    def test_concat_latent(self, rng):
        p, z = rng.standard_normal((2, 4, 3)), rng.standard_normal((2, 5))
        w = rng.standard_normal((2, 4, 8))
        assert gradcheck(lambda a, b: (concat_latent(a, b) * w).sum(), [p, z]) < 1e-4

    def test_elementwise_ops(self, rng):
        a, b = rng.standard_normal((3, 2)), rng.standard_normal((3, 2))
        assert gradcheck(lambda x, y: ((x - y) * (x + 2.0) / 3.0).mean(), [a, b]) < 1e-4
        assert gradcheck(lambda x: (x**3).sum(), [a]) < 1e-4

    def test_mlp_with_batchnorm(self, rng):
        mlp = MLP(4, [(6, "relu", True), (3, "tanh", False)], rng, dtype=np.float64)
        params = mlp.named_parameters()
        names = list(params)
        x = rng.standard_normal((10, 4))

        def f(inp, *ps):
            for name, p in zip(names, ps):
                owner, attr = mlp._resolve(name)
                setattr(owner, attr, p)
            return (mlp(inp) ** 2).sum()

        assert gradcheck(f, [x] + [params[n].data for n in names]) < 1e-4


class TestBatchNorm:
    def test_training_output_statistics(self, rng):
        bn = BatchNorm(4, dtype=np.float64)
        bn.gamma = Tensor(np.array([0.5, 1.0, 2.0, 3.0]), requires_grad=True)
        bn.beta = Tensor(np.array([-1.0, 0.0, 1.0, 2.0]), requires_grad=True)
        x = rng.standard_normal((500, 4)) * 3.0 + 7.0
        y = bn(Tensor(x)).data
        np.testing.assert_allclose(y.mean(axis=0), bn.beta.data, atol=1e-5)
        np.testing.assert_allclose(y.var(axis=0), bn.gamma.data**2, atol=1e-5)

    def test_eval_is_affine_and_deterministic(self, rng):
        bn = BatchNorm(3)
        for _ in range(5):
            bn(Tensor(rng.standard_normal((32, 3)).astype(np.float32)))
        assert (bn.running_var > 0).all()
        bn.eval()
        x = rng.standard_normal((10, 3)).astype(np.float32)
        y1, y2 = bn(Tensor(x)).data, bn(Tensor(x)).data
        np.testing.assert_array_equal(y1, y2)
        # affine: f(a x + (1 - a) y) = a f(x) + (1 - a) f(y)
        xb = rng.standard_normal((10, 3)).astype(np.float32)
        mix = bn(Tensor(0.3 * x + 0.7 * xb)).data
        np.testing.assert_allclose(mix, 0.3 * y1 + 0.7 * bn(Tensor(xb)).data, atol=1e-5)

    def test_eval_single_row(self, rng):
        bn = BatchNorm(3).eval()
        out = bn(Tensor(np.ones((1, 3), dtype=np.float32)))
        assert np.isfinite(out.data).all()


class TestAdam:
    def test_zero_gradient_leaves_params(self):
        p = {"w": np.array([1.0, -2.0])}
        state = AdamState()
        for _ in range(10):
            adam_step(p, {"w": np.zeros(2)}, state)
        np.testing.assert_array_equal(p["w"], [1.0, -2.0])
        assert state.step == 10

    def test_first_step_by_hand(self):
        # m = 0.1 * g, v = 0.001 * g^2; bias-corrected m_hat = g, v_hat = g^2
        # update = lr * g / (|g| + eps)
        g, lr, eps = 0.5, 1e-4, 1e-8
        p = {"w": np.array([0.0])}
        adam_step(p, {"w": np.array([g])}, AdamState(learning_rate=lr, epsilon=eps))
        assert p["w"][0] == pytest.approx(-lr * g / (g + eps), rel=1e-9)
        assert p["w"][0] == pytest.approx(-lr, rel=1e-6)

    def test_constant_gradient_monotone(self):
        p = {"w": np.array([0.0])}
        state = AdamState()
        values = []
        for _ in range(100):
            adam_step(p, {"w": np.array([1.0])}, state)
            values.append(p["w"][0])
        assert all(b < a for a, b in zip(values, values[1:]))

    def test_nan_gradient_names_tensor(self):
        with pytest.raises(TrainingDivergedError, match="enc.w"):
            adam_step({"enc.w": np.zeros(2)}, {"enc.w": np.array([np.nan, 0.0])}, AdamState())

    def test_optimizer_minimises_quadratic(self):
        w = Tensor(np.array([3.0, -2.0]), requires_grad=True)
        opt = Adam({"w": w}, lr=0.1)
        for _ in range(300):
            opt.zero_grad()
            (w**2).sum().backward()
            opt.step()
        assert np.abs(w.data).max() < 0.05

    def test_moments_match_param_shapes(self):
        state = AdamState()
        p = {"a": np.zeros((2, 3)), "b": np.zeros(4)}
        adam_step(p, {"a": np.ones((2, 3)), "b": None}, state)
        assert state.m["a"].shape == (2, 3) and state.v["b"].shape == (4,)


class TestCheckpoint:
    def test_round_trip(self, tmp_path, rng):
        tensors = {"enc.weight": rng.standard_normal((3, 4)).astype(np.float32), "b": np.arange(5, dtype=np.float32)}
        save_checkpoint(tmp_path / "m.cpae", tensors)
        back = load_checkpoint(tmp_path / "m.cpae")
        assert set(back) == set(tensors)
        for name in tensors:
            np.testing.assert_array_equal(back[name], tensors[name])

    def test_layout(self, tmp_path):
        save_checkpoint(tmp_path / "m.cpae", {"ab": np.array([[1.0, 2.0]], dtype=np.float32)})
        raw = (tmp_path / "m.cpae").read_bytes()
        assert raw[:4] == b"CPAE"
        assert int.from_bytes(raw[4:8], "little") == 1  # version
        assert int.from_bytes(raw[8:12], "little") == 1  # tensor count
        assert int.from_bytes(raw[12:16], "little") == 2 and raw[16:18] == b"ab"
        assert int.from_bytes(raw[18:22], "little") == 2  # ndim
        assert np.frombuffer(raw[30:], dtype="<f4").tolist() == [1.0, 2.0]

    def test_bad_magic(self, tmp_path):
        (tmp_path / "x.cpae").write_bytes(b"NOPE")
        with pytest.raises(ValueError):
            load_checkpoint(tmp_path / "x.cpae")
