from __future__ import annotations

import math

import numpy as np
import pytest

from mixedprefix.autodiff import IGNORE_TARGET, Graph, RngStream, Tensor, forward, gradient_check
from mixedprefix.errors import EmptyTargetsError, GraphError, ShapeError

DRAWS = range(20)


def weighted(g: Graph, out, seed: int):
    """Scalar loss sum(out * w) with fixed random weights, so every output element matters."""
    w = np.random.default_rng(1000 + seed).normal(size=out.shape)
    return g.sum(g.mul(out, g.constant(w)))


def randn(seed: int, *shape: int, label: str = "x") -> Tensor:
    return Tensor(RngStream(seed, label).normal(0.0, 1.0, shape), requires_grad=True)


PRIMITIVE_CASES = {
    "add": (lambda s: {"a": randn(s, 3, 4), "b": randn(s, 4, label="b")}, lambda g, n: g.add(n["a"], n["b"])),
    "sub": (lambda s: {"a": randn(s, 3, 4), "b": randn(s, 3, 1, label="b")}, lambda g, n: g.sub(n["a"], n["b"])),
    "mul": (lambda s: {"a": randn(s, 2, 3), "b": randn(s, 2, 3, label="b")}, lambda g, n: g.mul(n["a"], n["b"])),
    "scale": (lambda s: {"a": randn(s, 5)}, lambda g, n: g.scale(n["a"], -2.5)),
    "matmul": (lambda s: {"a": randn(s, 2, 3, 4), "b": randn(s, 4, 5, label="b")}, lambda g, n: g.matmul(n["a"], n["b"])),
    "embedding": (lambda s: {"t": randn(s, 6, 3)}, lambda g, n: g.embedding(n["t"], [[0, 2, 2], [5, 1, 0]])),
    "softmax": (lambda s: {"a": randn(s, 3, 5)}, lambda g, n: g.softmax(n["a"])),
    "layer_norm": (lambda s: {"a": randn(s, 2, 8)}, lambda g, n: g.layer_norm(n["a"])),
    "gelu": (lambda s: {"a": randn(s, 4, 3)}, lambda g, n: g.nonlinearity(n["a"], "gelu")),
    "tanh": (lambda s: {"a": randn(s, 4, 3)}, lambda g, n: g.nonlinearity(n["a"], "tanh")),
    "dropout": (lambda s: {"a": randn(s, 4, 4)}, lambda g, n: g.dropout(n["a"], 0.3, RngStream(7, "dropout"))),
    "sum": (lambda s: {"a": randn(s, 3, 4)}, lambda g, n: g.sum(n["a"], axis=1, keepdims=True)),
    "concat": (lambda s: {"a": randn(s, 2, 3), "b": randn(s, 2, 2, label="b")}, lambda g, n: g.concat([n["a"], n["b"]], axis=1)),
    "slice": (lambda s: {"a": randn(s, 3, 6)}, lambda g, n: g.slice(n["a"], 1, 2, 5)),
    "transpose": (lambda s: {"a": randn(s, 2, 3, 4)}, lambda g, n: g.transpose(n["a"], (2, 0, 1))),
    "reshape": (lambda s: {"a": randn(s, 2, 6)}, lambda g, n: g.reshape(n["a"], (3, 4))),
}


@pytest.mark.parametrize("name", sorted(PRIMITIVE_CASES))
def test_primitive_backward_matches_finite_differences(name):
    make, build = PRIMITIVE_CASES[name]
    for seed in DRAWS:
        report = gradient_check(lambda g, n: weighted(g, build(g, n), seed), make(seed), tol=1e-4, atol=1e-8)
        assert report.passed, (name, seed, report.summary())


@pytest.mark.parametrize("seed", DRAWS)
def test_scalar_primitives_match_finite_differences(seed):
    logits = randn(seed, 4, 5)
    targets = np.array([1, IGNORE_TARGET, 4, 0])
    ce = gradient_check(lambda g, n: g.cross_entropy(n["z"], targets), {"z": logits}, atol=1e-8)
    l2 = gradient_check(lambda g, n: g.l2_squared(n["z"]), {"z": randn(seed, 3, 2)}, atol=1e-8)
    assert ce.passed and l2.passed


def test_layer_norm_gradient_is_tight_in_float64():
    x = randn(3, 8)
    report = gradient_check(lambda g, n: weighted(g, g.layer_norm(n["x"]), 3), {"x": x}, step=1e-4, tol=1e-6, atol=1e-8)
    assert report.passed, report.summary()


def test_square_derivative():
    x = Tensor(np.array(3.0), requires_grad=True, name="x")
    g = Graph()
    node = g.param(x)
    grads = g.backward(g.mul(node, node))
    assert grads["x"] == pytest.approx(6.0)


def test_softmax_cross_entropy_gradient_identity():
    z = np.array([[0.3, -1.2, 2.0, 0.1]])
    t = Tensor(z.copy(), requires_grad=True, name="z")
    g = Graph()
    grads = g.backward(g.cross_entropy(g.param(t), [2]))
    expected = np.exp(z) / np.exp(z).sum()
    expected[0, 2] -= 1.0
    np.testing.assert_allclose(grads["z"], expected, rtol=1e-12, atol=1e-15)


def test_uniform_cross_entropy_is_log_vocab():
    g = Graph(grad_enabled=False)
    loss = g.cross_entropy(g.constant(np.zeros((3, 16))), [0, 5, 15])
    assert float(loss.value) == pytest.approx(math.log(16), abs=1e-12)


def test_softmax_rows_sum_to_one():
    g = Graph(grad_enabled=False)
    rows = RngStream(0, "softmax").normal(0.0, 30.0, (10, 7))
    out = g.softmax(g.constant(rows)).value
    np.testing.assert_allclose(out.sum(axis=-1), 1.0, atol=1e-12)


def test_unreachable_parameter_has_exactly_zero_gradient():
    used = randn(0, 3)
    dead = randn(1, 2, label="dead")
    report = gradient_check(lambda g, n: g.sum(n["used"]), {"used": used, "dead": dead})
    assert report.passed
    assert np.array_equal(dead.grad, np.zeros(2))
    assert np.array_equal(used.grad, np.ones(3))


def test_sum_has_zero_error():
    report = gradient_check(lambda g, n: g.sum(n["x"]), {"x": randn(4, 5, 3)})
    assert report.max_rel_error == 0.0


def test_nan_gradient_fails_with_location():
    x = Tensor(np.array([1.0, np.nan]), requires_grad=True)
    report = gradient_check(lambda g, n: g.sum(g.mul(n["x"], n["x"])), {"x": x})
    assert not report.passed
    assert report.params["x"].nan_at is not None


def test_backward_needs_scalar_loss():
    g = Graph()
    node = g.param(randn(0, 3))
    with pytest.raises(GraphError):
        g.backward(node)


def test_nodes_from_another_graph_are_rejected():
    a, b = Graph(), Graph()
    with pytest.raises(GraphError):
        a.add(a.param(randn(0, 2)), b.param(randn(1, 2)))


def test_shape_errors_name_the_primitive():
    g = Graph()
    with pytest.raises(ShapeError) as info:
        g.matmul(g.param(randn(0, 2, 3)), g.param(randn(1, 2, 3)))
    assert info.value.primitive == "matmul"


def test_all_padding_targets_raise():
    g = Graph()
    with pytest.raises(EmptyTargetsError):
        g.cross_entropy(g.constant(np.zeros((2, 4))), [IGNORE_TARGET, IGNORE_TARGET])


def test_forward_backward_is_bit_identical_run_to_run():
    def run():
        x = randn(5, 4, 6)
        w = randn(6, 6, 3, label="w")

        def build(g, n):
            h = g.dropout(g.nonlinearity(g.matmul(g.layer_norm(n["x"]), n["w"])), 0.2, RngStream(9, "drop"))
            return {"loss": g.cross_entropy(h, [0, 1, 2, 1])}

        fp = forward(build, {"x": x, "w": w})
        grads = fp.graph.backward(fp.outputs["loss"])
        return fp.values()["loss"], grads["x"], grads["w"]

    first, second = run(), run()
    for a, b in zip(first, second):
        assert np.array_equal(a, b)


def test_named_streams_are_reproducible_and_independent():
    a = RngStream(3, "prefix").normal(size=5)
    other = RngStream(3, "backbone")
    other.normal(size=100)
    b = RngStream(3, "prefix").normal(size=5)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, RngStream(4, "prefix").normal(size=5))
    assert RngStream(1, "a").child("b").label == "a/b"
