import numpy as np
import pytest

from nupes.tensor import (
    PER_CHANNEL,
    PER_TENSOR,
    Granularity,
    GranularityError,
    ShapeError,
    as_tensor,
    group_view,
    matmul,
    reduce_max_abs,
    relu,
    ungroup,
)


def triple_loop(x, w):
    out = np.zeros((x.shape[0], w.shape[1]))
    for i in range(x.shape[0]):
        for j in range(w.shape[1]):
            acc = 0.0
            for k in range(x.shape[1]):
                acc += float(x[i, k]) * float(w[k, j])
            out[i, j] = acc
    return out


def test_as_tensor_rejects_non_finite():
    with pytest.raises(ValueError):
        as_tensor([1.0, np.nan])
    with pytest.raises(ValueError):
        as_tensor([np.inf])
    t = as_tensor([[1, 2], [3, 4]])
    assert t.dtype == np.float32 and not t.flags.writeable


def test_matmul_identity_and_selector():
    m = np.array([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal(matmul(np.eye(2), m), m)
    assert matmul(np.array([[1.0, 0.0]]), np.array([[2.5], [7.0]]))[0, 0] == 2.5


def test_matmul_matches_triple_loop():
    rng = np.random.default_rng(3)
    x, w = rng.standard_normal((3, 4)), rng.standard_normal((4, 2))
    np.testing.assert_allclose(matmul(x, w), triple_loop(x, w), rtol=0, atol=1e-12)


def test_matmul_shape_error_names_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
        matmul(np.zeros((2, 3)), np.zeros((2, 3)))


def test_matmul_bilinear_and_deterministic():
    rng = np.random.default_rng(0)
    x, w = rng.standard_normal((5, 6)), rng.standard_normal((6, 3))
    np.testing.assert_allclose(matmul(2.5 * x, w), 2.5 * matmul(x, w), rtol=1e-10)
    assert np.array_equal(matmul(x, w), matmul(x, w))


def test_relu():
    np.testing.assert_array_equal(relu(np.array([-1.0, 0.0, 2.0])), [0, 0, 2])
    assert np.all(relu(-np.abs(np.random.default_rng(1).standard_normal(10)) - 1) == 0)
    x = np.random.default_rng(2).standard_normal(50)
    np.testing.assert_array_equal(relu(relu(x)), relu(x))


def test_reduce_max_abs_per_tensor_and_groups():
    assert reduce_max_abs(np.array([-3.0, 1.0, 2.0])).item() == 3.0
    x = np.random.default_rng(0).standard_normal(256)
    m = reduce_max_abs(x, Granularity("per-group", 128))
    assert m.shape == (1, 2)
    assert m[0, 0] == np.abs(x[:128]).max() and m[0, 1] == np.abs(x[128:]).max()


def test_reduce_max_abs_matches_scan():
    x = np.random.default_rng(5).standard_normal((8, 6))
    per_channel = reduce_max_abs(x, PER_CHANNEL)[:, 0]
    for j in range(6):
        best = 0.0
        for i in range(8):
            best = max(best, abs(x[i, j]))
        assert per_channel[j] == best
    assert np.array_equal(reduce_max_abs(x), reduce_max_abs(-x))


def test_granularity_errors():
    with pytest.raises(GranularityError):
        reduce_max_abs(np.zeros(100), Granularity("per-group", 128))
    with pytest.raises(GranularityError):
        reduce_max_abs(np.zeros(10), PER_CHANNEL)
    with pytest.raises(GranularityError):
        Granularity("per-group", 1)
    assert Granularity.parse("per-group:64") == Granularity("per-group", 64)
    assert Granularity.parse("per-channel") == PER_CHANNEL


@pytest.mark.parametrize("g", [PER_TENSOR, PER_CHANNEL, Granularity("per-group", 4)])
def test_group_view_roundtrip(g):
    x = np.arange(48.0).reshape(8, 6)
    np.testing.assert_array_equal(ungroup(group_view(x, g), x.shape, g), x)
