import numpy as np
import pytest

from locsens.nn import (
    AdamState,
    CheckpointError,
    Dense,
    GroupNorm,
    TrainingDivergence,
    adam_step,
    clip_grad_norm,
    default_group_count,
    dense_backward,
    dense_forward,
    gradcheck,
    group_norm_backward,
    group_norm_forward,
    l2_normalize,
    l2norm_backward,
    l2norm_forward,
    load_params,
    relu_backward,
    relu_forward,
    save_params,
)
from locsens.nn.precision import default_dtype, set_default_dtype


class TestDense:
    def test_identity_map(self):
        layer = Dense(np.eye(3), np.zeros(3))
        y, _ = dense_forward(layer, np.array([1.0, -2.0, 3.0]))
        np.testing.assert_array_equal(y, [1.0, -2.0, 3.0])

    def test_hand_matrix_product(self):
        layer = Dense(np.array([[1.0, 1.0], [1.0, -1.0]]), np.zeros(2))
        y, _ = dense_forward(layer, np.array([1.0, 2.0]))
        np.testing.assert_array_equal(y, [3.0, -1.0])

    def test_shape_mismatch(self):
        layer = Dense(np.eye(3), np.zeros(3))
        with pytest.raises(ValueError):
            dense_forward(layer, np.zeros(4))

    def test_gradients_match_finite_differences(self):
        rng = np.random.default_rng(0)
        layer = Dense.init(6, 4, rng, np.float64)
        x = rng.normal(size=(3, 6))
        c = rng.normal(size=(3, 4))

        def fn(params):
            y, cache = dense_forward(Dense(params["w"], params["b"]), params["x"])
            dx, dw, db = dense_backward(c, cache)
            return float((y * c).sum()), {"w": dw, "b": db, "x": dx}

        report = gradcheck(fn, {"w": layer.weight, "b": layer.bias, "x": x}, tolerance=1e-6)
        assert report.passed, report.lines()


class TestRelu:
    def test_elementwise_max(self):
        y, _ = relu_forward(np.array([-1.0, 2.0]))
        np.testing.assert_array_equal(y, [0.0, 2.0])

    def test_all_negative(self):
        y, _ = relu_forward(np.array([-3.0, -0.5]))
        np.testing.assert_array_equal(y, [0.0, 0.0])

    def test_gradient_is_mask(self):
        _, cache = relu_forward(np.array([-1.0, 2.0]))
        dx = relu_backward(np.ones(2), cache)
        np.testing.assert_array_equal(dx, [0.0, 1.0])

    def test_gradient_zero_at_exactly_zero(self):
        _, cache = relu_forward(np.array([0.0, 1.0]))
        dx = relu_backward(np.ones(2), cache)
        np.testing.assert_array_equal(dx, [0.0, 1.0])


class TestL2Normalize:
    def test_three_four_five(self):
        y, _ = l2norm_forward(np.array([3.0, 4.0]))
        np.testing.assert_allclose(y, [0.6, 0.8], rtol=0, atol=1e-15)

    def test_unit_vector_unchanged(self):
        v = np.array([1.0, 0.0, 0.0])
        np.testing.assert_allclose(l2_normalize(v), v, atol=1e-15)

    def test_zero_vector_rejected(self):
        with pytest.raises(ValueError):
            l2norm_forward(np.zeros(4))

    def test_output_norm_is_one(self):
        rng = np.random.default_rng(1)
        x = rng.normal(size=(200, 17))
        y = l2_normalize(x)
        np.testing.assert_allclose(np.linalg.norm(y, axis=1), 1.0, rtol=0, atol=1e-9)

    def test_backward_matches_finite_differences(self):
        rng = np.random.default_rng(2)
        c = rng.normal(size=(2, 5))

        def fn(params):
            y, cache = l2norm_forward(params["x"])
            return float((y * c).sum()), {"x": l2norm_backward(c, cache)}

        report = gradcheck(fn, {"x": rng.normal(size=(2, 5)) + 0.3}, tolerance=1e-6)
        assert report.passed, report.lines()


class TestGroupNorm:
    def test_constant_input_maps_to_zero(self):
        layer = GroupNorm.init(4, num_groups=2, dtype=np.float64)
        y, _ = group_norm_forward(layer, np.full((2, 4), 3.7))
        assert np.abs(y).max() <= np.sqrt(layer.eps)

    def test_two_channel_example(self):
        layer = GroupNorm(1, np.ones(2), np.zeros(2), eps=1e-5)
        y, _ = group_norm_forward(layer, np.array([1.0, 3.0]))
        np.testing.assert_allclose(y, [-1.0, 1.0], atol=1e-4)

    def test_batch_independence(self):
        layer = GroupNorm.init(6, num_groups=3, dtype=np.float64)
        rng = np.random.default_rng(0)
        sample = rng.normal(size=6)
        batch_a = np.stack([sample, rng.normal(size=6)])
        batch_b = np.stack([sample, rng.normal(size=6) * 50.0])
        ya, _ = group_norm_forward(layer, batch_a)
        yb, _ = group_norm_forward(layer, batch_b)
        np.testing.assert_array_equal(ya[0], yb[0])

    def test_divisibility_enforced(self):
        with pytest.raises(ValueError):
            GroupNorm(3, np.ones(4), np.zeros(4))

    def test_normalization_statistics(self):
        # gamma=1, beta=0 and input variance > 0.1: per (sample, group)
        # mean ~ 0 and population variance ~ 1.
        layer = GroupNorm.init(32, num_groups=4, dtype=np.float64)
        rng = np.random.default_rng(5)
        x = rng.normal(size=(8, 32)) * 2.0 + 1.0
        y, _ = group_norm_forward(layer, x)
        grouped = y.reshape(8, 4, 8)
        assert np.abs(grouped.mean(axis=2)).max() < 1e-6
        assert np.abs(grouped.var(axis=2) - 1.0).max() < 1e-4

    def test_default_group_count(self):
        assert default_group_count(2048) == 32
        assert default_group_count(48) == 24
        assert default_group_count(7) == 7
        assert default_group_count(30) == 30

    def test_backward_matches_finite_differences(self):
        rng = np.random.default_rng(3)
        c = rng.normal(size=(3, 8))

        def fn(params):
            layer = GroupNorm(2, params["gamma"], params["beta"])
            y, cache = group_norm_forward(layer, params["x"])
            dx, dgamma, dbeta = group_norm_backward(c, cache)
            return float((y * c).sum()), {"gamma": dgamma, "beta": dbeta, "x": dx}

        params = {
            "gamma": 1.0 + 0.1 * rng.normal(size=8),
            "beta": 0.1 * rng.normal(size=8),
            "x": rng.normal(size=(3, 8)) * 1.5,
        }
        report = gradcheck(fn, params, tolerance=1e-6)
        assert report.passed, report.lines()


class TestAdam:
    def test_zero_gradients_leave_parameters_unchanged(self):
        state = AdamState(lr=0.1)
        params = {"w": np.array([1.0, -2.0])}
        adam_step(state, params, {"w": np.zeros(2)})
        np.testing.assert_array_equal(params["w"], [1.0, -2.0])

    def test_first_step_magnitude_equals_lr(self):
        # minimizing w^2 from w=1 with lr=0.1: bias-corrected first step is
        # exactly lr (up to eps), so w becomes 0.9
        state = AdamState(lr=0.1)
        params = {"w": np.array([1.0])}
        adam_step(state, params, {"w": np.array([2.0])})
        np.testing.assert_allclose(params["w"], [0.9], atol=1e-8)

    def test_deterministic(self):
        def run():
            state = AdamState(lr=0.01)
            params = {"w": np.linspace(-1, 1, 10)}
            for i in range(5):
                adam_step(state, params, {"w": np.sin(params["w"] + i)})
            return params["w"]

        np.testing.assert_array_equal(run(), run())

    def test_non_finite_gradient_rejected(self):
        state = AdamState()
        with pytest.raises(TrainingDivergence):
            adam_step(state, {"w": np.ones(2)}, {"w": np.array([1.0, np.nan])})

    def test_shape_mismatch_rejected(self):
        state = AdamState()
        with pytest.raises(ValueError):
            adam_step(state, {"w": np.ones(2)}, {"w": np.ones(3)})

    def test_clip_grad_norm(self):
        grads = {"a": np.array([3.0]), "b": np.array([4.0])}
        norm = clip_grad_norm(grads, 1.0)
        assert norm == pytest.approx(5.0)
        assert np.hypot(grads["a"][0], grads["b"][0]) == pytest.approx(1.0)


class TestGradcheck:
    def test_quadratic_passes(self):
        def fn(params):
            x = params["x"]
            return float((x**2).sum()), {"x": 2 * x}

        report = gradcheck(fn, {"x": np.array([0.3, -0.7])}, tolerance=1e-6)
        assert report.passed

    def test_corrupted_gradient_detected(self):
        def fn(params):
            x = params["x"]
            return float((x**2).sum()), {"x": 2 * x * 1.01}

        report = gradcheck(fn, {"x": np.array([0.5, 1.5])}, tolerance=1e-4)
        assert not report.passed
        # a x1.01 corruption shows up as |a-n|/max(|a|,|n|) = 0.01/1.01
        assert report.global_max == pytest.approx(0.01 / 1.01, rel=1e-3)

    def test_global_max_is_max_of_params(self):
        def fn(params):
            return (
                float((params["a"] ** 2).sum() + (params["b"] ** 2).sum()),
                {"a": 2 * params["a"], "b": 2 * params["b"] * 1.05},
            )

        report = gradcheck(fn, {"a": np.ones(2), "b": np.ones(2)}, tolerance=1e-4)
        assert report.global_max == max(report.per_param.values())
        assert set(report.per_param) == {"a", "b"}

    def test_float32_rejected(self):
        def fn(params):
            return 0.0, {"x": np.zeros(2, dtype=np.float32)}

        with pytest.raises(ValueError):
            gradcheck(fn, {"x": np.zeros(2, dtype=np.float32)})


class TestCheckpoint:
    def test_round_trip_bit_exact(self, tmp_path):
        rng = np.random.default_rng(4)
        params = {
            "layer.weight": rng.normal(size=(5, 3)),
            "layer.bias": rng.normal(size=5),
            "scalar": np.array([0.25]),
        }
        path = tmp_path / "model.lsnn"
        save_params(path, params)
        loaded = load_params(path)
        assert list(loaded) == list(params)
        for name in params:
            assert loaded[name].tobytes() == params[name].tobytes()
        save_params(tmp_path / "again.lsnn", loaded)
        assert (tmp_path / "again.lsnn").read_bytes() == path.read_bytes()

    def test_truncated_file(self, tmp_path):
        path = tmp_path / "model.lsnn"
        save_params(path, {"w": np.ones((4, 4))})
        data = path.read_bytes()
        path.write_bytes(data[:-8])
        with pytest.raises(CheckpointError, match="truncated"):
            load_params(path)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "model.lsnn"
        path.write_bytes(b"NOPE" + b"\x00" * 32)
        with pytest.raises(CheckpointError, match="magic"):
            load_params(path)

    def test_version_mismatch(self, tmp_path):
        path = tmp_path / "model.lsnn"
        save_params(path, {"w": np.ones(2)})
        data = bytearray(path.read_bytes())
        data[4] = 99
        path.write_bytes(bytes(data))
        with pytest.raises(CheckpointError, match="version"):
            load_params(path)

    def test_trailing_bytes_rejected(self, tmp_path):
        path = tmp_path / "model.lsnn"
        save_params(path, {"w": np.ones(2)})
        path.write_bytes(path.read_bytes() + b"xx")
        with pytest.raises(CheckpointError, match="trailing"):
            load_params(path)

    def test_empty_params_rejected(self, tmp_path):
        with pytest.raises(CheckpointError):
            save_params(tmp_path / "model.lsnn", {})


class TestPrecision:
    def test_set_and_get(self):
        set_default_dtype("float32")
        assert default_dtype() == np.float32
        set_default_dtype("float64")
        assert default_dtype() == np.float64

    def test_invalid_dtype_rejected(self):
        with pytest.raises(ValueError):
            set_default_dtype("float16")
