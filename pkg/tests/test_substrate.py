import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from tpsence import substrate as S
from tpsence.harness.gradcheck import PRIMITIVE_CASES, check_case


def test_catalog_covers_required_primitives():
    required = {"add", "sub", "mul", "div", "neg", "abs", "exp", "log", "pow", "matmul", "conv2d",
                "conv_transpose2d", "leaky_relu", "relu", "tanh", "sigmoid", "softmax", "mean",
                "sum", "l2_normalize", "instance_norm", "reshape", "gather", "concat"}
    assert required <= S.op_catalog()
    for name in S.op_catalog():
        assert callable(getattr(S, name))


def test_abs_forward():
    assert S.abs(S.Tensor([-2.0, 0.0, 3.0])).data.tolist() == [2.0, 0.0, 3.0]


def test_softmax_of_constant_is_uniform():
    np.testing.assert_allclose(S.softmax(S.Tensor([4.0, 4.0, 4.0])).data, [1 / 3] * 3, rtol=0, atol=1e-15)


def test_identity_kernel_conv_is_identity():
    x = np.random.default_rng(0).normal(size=(1, 1, 4, 4))
    out = S.conv2d(S.Tensor(x), S.Tensor(np.ones((1, 1, 1, 1))), stride=1, padding=0)
    np.testing.assert_array_equal(out.data, x)


def test_conv2d_matches_direct_loop():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(1, 2, 5, 5))
    w = rng.normal(size=(3, 2, 3, 3))
    out = S.conv2d(S.Tensor(x), S.Tensor(w), stride=2, padding=1).data
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    ref = np.zeros((1, 3, 3, 3))
    for o in range(3):
        for i in range(3):
            for j in range(3):
                ref[0, o, i, j] = np.sum(xp[0, :, 2 * i:2 * i + 3, 2 * j:2 * j + 3] * w[o])
    np.testing.assert_allclose(out, ref, atol=1e-12)


def test_conv_transpose_is_adjoint_of_conv():
    # <conv(x), y> == <x, conv_t(y)> for matching geometry
    rng = np.random.default_rng(2)
    x = rng.normal(size=(1, 2, 8, 8))
    w = rng.normal(size=(3, 2, 4, 4))
    y = rng.normal(size=(1, 3, 4, 4))
    lhs = np.sum(S.conv2d(S.Tensor(x), S.Tensor(w), stride=2, padding=1).data * y)
    rhs = np.sum(x * S.conv_transpose2d(S.Tensor(y), S.Tensor(w), stride=2, padding=1).data)
    assert lhs == pytest.approx(rhs, rel=1e-12)


def test_sum_gradient_is_all_ones():
    t = S.Tensor(np.random.default_rng(3).normal(size=(2, 3)), requires_grad=True)
    (g,) = S.gradients(S.sum(t), [t])
    np.testing.assert_array_equal(g, np.ones((2, 3)))


def test_mean_square_gradient():
    t = S.Tensor([1.0, 2.0], requires_grad=True)
    (g,) = S.gradients(S.mean(t * t), [t])
    np.testing.assert_allclose(g, [1.0, 2.0], rtol=0, atol=1e-15)


def test_gradients_rejects_non_scalar_and_foreign_tensor():
    t = S.Tensor([1.0, 2.0], requires_grad=True)
    other = S.Tensor([3.0], requires_grad=True)
    with pytest.raises(S.GraphError):
        S.gradients(t * 2.0, [t])
    with pytest.raises(S.GraphError):
        S.gradients(S.sum(t), [other])
    with pytest.raises(S.GraphError):
        S.gradients(S.sum(t), [S.Tensor([1.0])])


def test_shape_mismatch_names_both_shapes():
    with pytest.raises(S.ShapeError, match=r"\(2,\).*\(3,\)"):
        S.add(S.Tensor([1.0, 2.0]), S.Tensor([1.0, 2.0, 3.0]))
    with pytest.raises(S.ShapeError):
        S.matmul(S.Tensor(np.ones((2, 3))), S.Tensor(np.ones((2, 3))))


def test_non_finite_forward_is_an_error():
    with pytest.raises(S.NonFiniteError, match="log"):
        S.log(S.Tensor([0.0, 1.0]))
    with pytest.raises(S.NonFiniteError):
        S.Tensor([np.nan])


def test_finite_diff_check_square():
    t = S.Tensor(np.random.default_rng(4).normal(size=3))
    assert S.finite_diff_check(lambda x: S.sum(x * x), t, 1e-5) <= 1e-6


def test_finite_diff_check_constant_function():
    t = S.Tensor([0.3, -0.2])
    assert S.finite_diff_check(lambda x: S.Tensor(2.5), t, 1e-5) == 0.0


def test_finite_diff_check_rejects_bad_step():
    with pytest.raises(ValueError):
        S.finite_diff_check(lambda x: S.sum(x), S.Tensor([1.0]), 0.0)


def test_backward_accumulates_into_leaves():
    a = S.Tensor([1.0, -2.0], requires_grad=True)
    S.sum(a * 3.0).backward()
    S.sum(a * 3.0).backward()
    np.testing.assert_array_equal(a.grad, [6.0, 6.0])


def test_graph_is_topologically_ordered_and_shared_nodes_appear_once():
    a = S.Tensor([1.0], requires_grad=True)
    b = S.exp(a)
    out = S.sum(b * b + b)
    graph = S.Graph.from_output(out)
    pos = {id(n): k for k, n in enumerate(graph.nodes)}
    assert len(pos) == len(graph.nodes)
    for node in graph.nodes:
        for p in node.parents:
            assert pos[id(p)] < pos[id(node)]
    (g,) = S.gradients(out, [a])
    assert g[0] == pytest.approx(2 * np.e ** 2 + np.e, rel=1e-14)


@pytest.mark.parametrize("name", sorted(PRIMITIVE_CASES))
def test_primitive_gradients_match_finite_differences(name):
    result = check_case(name, PRIMITIVE_CASES[name], seeds=20)
    assert result.max_rel_error <= 1e-4, result.line()


def test_forward_is_bit_reproducible():
    rng = np.random.default_rng(5)
    x = rng.normal(size=(1, 3, 8, 8))
    w = rng.normal(size=(4, 3, 3, 3))

    def run():
        h = S.instance_norm(S.conv2d(S.Tensor(x), S.Tensor(w), stride=1, padding=1))
        return S.softmax(S.reshape(h, (4, -1)), axis=1).data

    assert run().tobytes() == run().tobytes()


@settings(max_examples=200, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 6)),
              elements=st.floats(-50, 50, allow_nan=False)))
def test_softmax_rows_positive_and_normalised(x):
    out = S.softmax(S.Tensor(x), axis=1).data
    assert np.all(out > 0)
    np.testing.assert_allclose(out.sum(axis=1), 1.0, rtol=0, atol=1e-12)


def test_subgradient_at_zero_is_zero():
    t = S.Tensor([0.0, 0.0], requires_grad=True)
    g_abs, = S.gradients(S.sum(S.abs(t)), [t])
    g_relu, = S.gradients(S.sum(S.relu(t)), [t])
    assert g_abs.tolist() == [0.0, 0.0] and g_relu.tolist() == [0.0, 0.0]
