import numpy as np
import pytest

from vqperturb import tensor as T
from vqperturb.tensor import Tensor, finite_diff_check

from oracles import conv2d_naive, conv_transpose2d_naive


def grad_of(f, x):
    xt = Tensor(x, requires_grad=True)
    f(xt).backward()
    return xt.grad


def test_relu_softmax_examples():
    assert T.relu(Tensor([-1.0, 0.0, 2.0])).data.tolist() == [0.0, 0.0, 2.0]
    assert T.softmax(Tensor([0.0, 0.0])).data.tolist() == [0.5, 0.5]


def test_relu_subgradient_zero_at_kink():
    g = grad_of(lambda x: T.tsum(T.relu(x)), np.array([-1.0, 0.0, 3.0]))
    assert g.tolist() == [0.0, 0.0, 1.0]


def test_conv_all_ones_kernel_sums_input():
    x = np.arange(9.0).reshape(1, 1, 3, 3)
    y = T.conv2d(Tensor(x), Tensor(np.ones((1, 1, 3, 3))))
    assert y.shape == (1, 1, 1, 1)
    assert y.item() == x.sum()


@pytest.mark.parametrize("stride,pad", [(1, 0), (1, 1), (2, 1), (2, 0)])
def test_conv2d_matches_loop_oracle(stride, pad):
    rng = np.random.default_rng(stride * 10 + pad)
    x = rng.normal(size=(2, 3, 7, 6))
    w = rng.normal(size=(4, 3, 3, 3))
    b = rng.normal(size=4)
    y = T.conv2d(Tensor(x), Tensor(w), Tensor(b), stride, pad).data
    np.testing.assert_allclose(y, conv2d_naive(x, w, b, stride, pad), rtol=1e-12, atol=1e-12)


@pytest.mark.parametrize("stride,pad,k,opad", [(1, 1, 3, 0), (2, 1, 4, 0), (2, 0, 3, 1)])
def test_conv_transpose_matches_scatter_oracle(stride, pad, k, opad):
    rng = np.random.default_rng(k + stride)
    x = rng.normal(size=(2, 3, 4, 5))
    w = rng.normal(size=(3, 2, k, k))
    b = rng.normal(size=2)
    y = T.conv_transpose2d(Tensor(x), Tensor(w), Tensor(b), stride, pad, opad).data
    ref = conv_transpose2d_naive(x, w, b, stride, pad, y.shape[2:])
    assert y.shape[2] == (4 - 1) * stride - 2 * pad + k + opad
    np.testing.assert_allclose(y, ref, rtol=1e-12, atol=1e-12)


def test_backward_examples():
    assert grad_of(lambda x: T.tsum(x * x), np.array([1.0, 2.0])).tolist() == [2.0, 4.0]
    assert grad_of(lambda x: T.l1_distance(x, np.zeros(1)), np.array([3.0])).tolist() == [1.0]


def test_backward_seeds_one_and_rejects_non_scalar():
    x = Tensor([1.0, 2.0], requires_grad=True)
    loss = T.tsum(x)
    loss.backward()
    assert loss.grad.tolist() == 1.0
    with pytest.raises(T.ShapeError):
        (x * 2.0).backward()


def test_backward_without_graph_raises():
    with pytest.raises(RuntimeError):
        T.tsum(Tensor([1.0])).backward()


def test_shape_mismatch_names_op_and_shapes():
    with pytest.raises(T.ShapeError, match=r"add: shape mismatch \(2,\) vs \(3,\)"):
        T.add(Tensor(np.ones(2)), Tensor(np.ones(3)))
    with pytest.raises(T.ShapeError, match="matmul"):
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_no_broadcast_beyond_scalar():
    with pytest.raises(T.ShapeError):
        T.mul(Tensor(np.ones((2, 3))), Tensor(np.ones(3)))
    assert T.mul(Tensor(np.ones((2, 3))), 2.0).data.sum() == 12.0


def test_gradient_accumulates_over_shared_use():
    g = grad_of(lambda x: T.tsum(x * x + x), np.array([1.0, -2.0]))
    assert g.tolist() == [3.0, -3.0]


def test_no_grad_records_nothing():
    x = Tensor([1.0], requires_grad=True)
    with T.no_grad():
        y = T.exp(x)
    assert not y.requires_grad


def test_finite_diff_check_examples():
    f = lambda x: T.tsum(T.square(x))
    assert finite_diff_check(f, Tensor([1.0, 2.0, 3.0]), 1e-5) < 1e-6
    assert finite_diff_check(lambda x: T.tsum(x) * 0.0 + 3.0, Tensor([1.0, 2.0])) == 0.0
    rng = np.random.default_rng(1)
    target = np.eye(4)[2]
    ce = lambda x: -T.tsum(T.log_softmax(x) * Tensor(target))
    assert finite_diff_check(ce, Tensor(rng.normal(size=4))) < 1e-4


def _smooth_cases(rng):
    a = rng.normal(size=(3, 4))
    b = rng.normal(size=(3, 4))
    pos = rng.uniform(0.5, 2.0, size=(3, 4))
    m = rng.normal(size=(4, 5))
    cw = rng.normal(size=(6, 4))
    img = rng.normal(size=(1, 2, 6, 6))
    w = rng.normal(size=(3, 2, 3, 3))
    wt = rng.normal(size=(2, 3, 4, 4))
    wgt = Tensor(rng.normal(size=(3, 4)))
    return {
        "add": (lambda x: T.tsum(T.add(x, Tensor(b)) * wgt), a),
        "sub": (lambda x: T.tsum(T.sub(Tensor(b), x) * wgt), a),
        "mul": (lambda x: T.tsum(T.mul(x, Tensor(b))), a),
        "exp": (lambda x: T.tsum(T.exp(x) * wgt), a),
        "log": (lambda x: T.tsum(T.log(x) * wgt), pos),
        "square": (lambda x: T.tsum(T.square(x) * wgt), a),
        "abs": (lambda x: T.tsum(T.absolute(x) * wgt), pos),
        "relu": (lambda x: T.tsum(T.relu(x) * wgt), np.where(np.abs(a) < 0.05, 0.3, a)),
        "mean_axis": (lambda x: T.tsum(T.square(T.mean(x, axis=0))), a),
        "sum_axis": (lambda x: T.tsum(T.square(T.tsum(x, axis=1))), a),
        "reshape_transpose": (lambda x: T.tsum(T.transpose(T.reshape(x, (4, 3))) * wgt), a),
        "matmul": (lambda x: T.tsum(T.square(T.matmul(x, Tensor(m)))), a),
        "softmax": (lambda x: T.tsum(T.softmax(x, axis=1) * wgt), a),
        "log_softmax": (lambda x: T.tsum(T.log_softmax(x, axis=0) * wgt), a),
        "normalize": (lambda x: T.tsum(T.normalize(x, axis=1) * wgt), a),
        "l1": (lambda x: T.l1_distance(x, Tensor(b)), a),
        "sq_l2": (lambda x: T.sq_l2_distance(x, Tensor(b)), a),
        "pairwise_sq_dist": (lambda x: T.tsum(T.exp(T.pairwise_sq_dist(x, Tensor(cw)) * -0.1)), a),
        "gather_rows": (lambda x: T.tsum(T.square(T.gather_rows(x, np.array([0, 2, 2, 1])))), a),
        "concat_slice": (lambda x: T.tsum(T.square(T.slice_rows(T.concat([x, x]), 1, 5))), a),
        "select": (lambda x: T.tsum(T.square(T.select(x, 1))), a),
        "conv2d_s1": (lambda x: T.tsum(T.square(T.conv2d(x, Tensor(w), None, 1, 1))), img),
        "conv2d_s2": (lambda x: T.tsum(T.square(T.conv2d(x, Tensor(w), None, 2, 1))), img),
        "conv2d_weight": (lambda k: T.tsum(T.square(T.conv2d(Tensor(img), k, None, 2, 1))), w),
        "conv_t_input": (lambda x: T.tsum(T.square(T.conv_transpose2d(x, Tensor(wt), None, 2, 1))),
                         img),
        "conv_t_weight": (lambda k: T.tsum(T.square(T.conv_transpose2d(Tensor(img), k, None, 2, 1))),
                          wt),
        "resize_nearest": (lambda x: T.tsum(T.square(T.resize_nearest(x, (9, 4)))), img),
    }


@pytest.mark.parametrize("name", sorted(_smooth_cases(np.random.default_rng(0))))
def test_every_primitive_matches_finite_differences(name):
    for seed in range(3):
        f, x = _smooth_cases(np.random.default_rng(seed))[name]
        assert finite_diff_check(f, Tensor(x)) < 1e-4, (name, seed)


def test_composite_conv_relu_mean_chain():
    rng = np.random.default_rng(5)
    x = rng.normal(size=(1, 1, 8, 8))
    w1 = Tensor(rng.normal(size=(3, 1, 3, 3)))
    w2 = rng.normal(size=(2, 3, 3, 3))
    f = lambda k: T.mean(T.square(T.conv2d(T.relu(T.conv2d(Tensor(x), w1, None, 2, 1)), k, None, 1, 1)))
    assert finite_diff_check(f, Tensor(w2)) < 1e-4


def test_straight_through_passes_gradient_unchanged():
    z = Tensor(np.array([[0.2, -0.4], [1.1, 0.3]]), requires_grad=True)
    q = T.straight_through(z, np.array([[0.0, 0.0], [1.0, 0.0]]))
    assert q.data.tolist() == [[0.0, 0.0], [1.0, 0.0]]
    wgt = np.array([[1.0, -2.0], [3.0, 0.5]])
    T.tsum(q * Tensor(wgt)).backward()
    # identity-substitution oracle: d/dz of sum(z * wgt)
    assert np.array_equal(z.grad, wgt)


def test_softmax_rows_sum_to_one():
    x = np.random.default_rng(2).normal(scale=30.0, size=(50, 7))
    s = T.softmax(Tensor(x), axis=1).data
    assert np.all(np.abs(s.sum(axis=1) - 1.0) <= 1e-12)
    assert np.all((s > 0) & (s <= 1))


def test_normalize_zero_vector_raises():
    with pytest.raises(ValueError):
        T.normalize(Tensor(np.zeros((1, 3))), axis=1)


def test_forward_is_deterministic():
    rng = np.random.default_rng(3)
    x, w = rng.normal(size=(2, 2, 8, 8)), rng.normal(size=(4, 2, 3, 3))
    a = T.conv2d(Tensor(x), Tensor(w), None, 2, 1).data
    b = T.conv2d(Tensor(x), Tensor(w), None, 2, 1).data
    assert a.tobytes() == b.tobytes()


def test_tensor_text_round_trip(tmp_path):
    arr = np.random.default_rng(4).normal(size=(2, 3, 4))
    text = T.dumps_tensor(arr)
    assert text.splitlines()[0] == "shape: 2 3 4"
    assert np.array_equal(T.loads_tensor(text), arr)
    p = tmp_path / "t.txt"
    T.save_tensor(p, arr)
    assert np.array_equal(T.load_tensor(p), arr)


@pytest.mark.parametrize("text", ["1 2 3", "shape: 2 2\n1 2 3", "shape: 2\n1 nan", "shape: 2\n1 x"])
def test_tensor_text_rejects_malformed(text):
    with pytest.raises(ValueError):
        T.loads_tensor(text)
