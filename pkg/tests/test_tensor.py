"""Tensor container, elementwise ops, and the reference convolution."""

import numpy as np
import pytest

from picoseg.errors import DTypeError, ShapeError
from picoseg.tensor import (
    Tensor,
    add,
    clamp,
    conv2d_reference,
    conv_out_size,
    elementwise,
    log,
    mul,
    relu,
    resize_nearest_x2,
    scalar_mul,
    stable_sigmoid,
)


class TestTensorConstruction:
    def test_from_list(self):
        t = Tensor([[1.0, 2.0], [3.0, 4.0]])
        assert t.shape == (2, 2)
        assert t.dtype == "float64"

    def test_int_list_coerces_to_int32(self):
        assert Tensor([1, 2, 3]).dtype == "int32"

    def test_supported_dtypes(self):
        for dt in ("float32", "float64", "int8", "int32"):
            t = Tensor.zeros((2, 3), dt)
            assert t.dtype == dt
            assert t.data.flags["C_CONTIGUOUS"]

    def test_unsupported_ndarray_dtype_rejected(self):
        with pytest.raises(DTypeError):
            Tensor(np.zeros((2, 2), dtype=np.float16))

    def test_rank_zero_rejected(self):
        with pytest.raises(ShapeError):
            Tensor(np.float64(3.0))

    def test_zero_size_rejected(self):
        with pytest.raises(ShapeError):
            Tensor(np.zeros((0, 3)))

    def test_copy_is_independent(self):
        a = Tensor([[1.0, 2.0]])
        b = a.copy()
        b.data[0, 0] = 9
        assert a.data[0, 0] == 1.0

    def test_astype(self):
        a = Tensor([[1.5, 2.5]])
        assert a.astype("float32").dtype == "float32"
        with pytest.raises(DTypeError):
            a.astype("float16")


class TestElementwise:
    def test_add_and_shape_error(self):
        a = Tensor(np.ones((2, 2)))
        b = Tensor(np.full((2, 2), 2.0))
        assert np.array_equal(add(a, b).data, np.full((2, 2), 3.0))
        with pytest.raises(ShapeError):
            add(a, Tensor(np.ones((2, 3))))

    def test_dtype_mismatch(self):
        a = Tensor(np.ones((2, 2), dtype=np.float32))
        b = Tensor(np.ones((2, 2), dtype=np.float64))
        with pytest.raises(DTypeError):
            mul(a, b)

    def test_scalar_rhs(self):
        a = Tensor(np.arange(4, dtype=np.float64).reshape(2, 2))
        assert np.array_equal(scalar_mul(a, 2.0).data, a.data * 2)
        assert np.array_equal(add(a, 1.0).data, a.data + 1)

    def test_dispatcher_matches_functions(self):
        a = Tensor(np.linspace(-2, 2, 6).reshape(2, 3))
        b = Tensor(np.linspace(1, 2, 6).reshape(2, 3))
        assert np.array_equal(elementwise("add", a, b).data, add(a, b).data)
        assert np.array_equal(elementwise("relu", a).data, relu(a).data)
        with pytest.raises(ValueError):
            elementwise("nope", a)

    def test_relu_requires_float(self):
        with pytest.raises(DTypeError):
            relu(Tensor(np.ones((2, 2), dtype=np.int32)))

    def test_log_and_clamp(self):
        a = Tensor(np.array([0.5, 1.0, 2.0]))
        assert np.allclose(log(a).data, np.log(a.data))
        assert np.array_equal(clamp(a, 0.6, 1.5).data, [0.6, 1.0, 1.5])


class TestSigmoid:
    def test_extremes_are_finite_and_saturate(self):
        x = np.array([-1000.0, -40.0, 0.0, 40.0, 1000.0])
        s = stable_sigmoid(x)
        assert np.all(np.isfinite(s))
        assert s[0] < 1e-300
        assert s[2] == 0.5
        assert s[4] >= 1 - 1e-16

    def test_matches_naive_in_safe_range(self):
        x = np.linspace(-20, 20, 101)
        naive = 1 / (1 + np.exp(-x))
        assert np.allclose(stable_sigmoid(x), naive, rtol=1e-12, atol=0)


def T(a):
    return Tensor(np.asarray(a, dtype=np.float64))


class TestConvReference:
    def test_out_size(self):
        assert conv_out_size(8, 3, 1, 1) == 8
        assert conv_out_size(8, 3, 2, 1) == 4
        assert conv_out_size(8, 1, 1, 0) == 8

    def test_identity_kernel(self):
        x = np.random.default_rng(0).standard_normal((1, 1, 5, 5))
        w = np.zeros((1, 1, 3, 3))
        w[0, 0, 1, 1] = 1.0
        out = conv2d_reference(T(x), T(w), None, 1, 1, 1)
        assert np.allclose(out.data, x)

    def test_hand_computed_2x2(self):
        # 2x2 input, all-ones 3x3 kernel, pad 1: every output sees the
        # whole in-bounds input, so all four outputs equal 1+2+3+4
        x = T(np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 1, 2, 2))
        w = T(np.ones((1, 1, 3, 3)))
        out = conv2d_reference(x, w, None, 1, 1, 1)
        assert out.shape == (1, 1, 2, 2)
        assert np.allclose(out.data[0, 0], [[10.0, 10.0], [10.0, 10.0]])

    def test_bias_broadcast(self):
        out = conv2d_reference(T(np.zeros((1, 2, 3, 3))), T(np.zeros((4, 2, 1, 1))),
                               T(np.array([1.0, 2.0, 3.0, 4.0])), 1, 0, 1)
        for c in range(4):
            assert np.all(out.data[0, c] == c + 1)

    def test_group_divisibility_error(self):
        with pytest.raises(ShapeError):
            conv2d_reference(T(np.zeros((1, 3, 4, 4))), T(np.zeros((4, 1, 3, 3))),
                             None, 1, 1, 2)

    def test_channel_mismatch_names_operands(self):
        with pytest.raises(ShapeError) as e:
            conv2d_reference(T(np.zeros((1, 3, 4, 4))), T(np.zeros((4, 5, 3, 3))),
                             None, 1, 1, 1)
        assert "input" in str(e.value) and "weight" in str(e.value)

    def test_stride_pad_validation(self):
        x, w = T(np.zeros((1, 1, 4, 4))), T(np.zeros((1, 1, 3, 3)))
        with pytest.raises(ValueError):
            conv2d_reference(x, w, None, 0, 1, 1)
        with pytest.raises(ValueError):
            conv2d_reference(x, w, None, 1, -1, 1)


class TestResize:
    def test_nearest_duplicates(self):
        x = Tensor(np.arange(4, dtype=np.float64).reshape(1, 1, 2, 2))
        out = resize_nearest_x2(x)
        assert out.shape == (1, 1, 4, 4)
        assert np.array_equal(out.data[0, 0], [[0, 0, 1, 1], [0, 0, 1, 1],
                                               [2, 2, 3, 3], [2, 2, 3, 3]])
        assert np.array_equal(np.unique(out.data), np.unique(x.data))

    def test_rank_checked(self):
        with pytest.raises(ShapeError):
            resize_nearest_x2(Tensor(np.zeros((2, 2))))
