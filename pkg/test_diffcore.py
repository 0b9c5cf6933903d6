#!/usr/bin/env python3
"""
Tests for the diffcore differentiation substrate: forward values, gradient
accumulation, finite-difference checks for every primitive and the
checkpoint format.
"""

import os
import sys
import tempfile

import numpy as np

from diffcore import (
    CheckpointError, Function, Parameter, ShapeError, Tensor, absolute, add, bilinear_resize,
    concat, conv2d, feature_norm, grad_check, index_select, l2_normalize, linear, load_tensors,
    logsumexp, matmul, max_pool2x2, mul, no_grad, reduce_max, reduce_mean, reduce_sum, relu,
    reshape, save_tensors, sigmoid, softmax, sqrt, sub, transpose,
)

RANDOM_INSTANCES = 20


def _check_primitive(name, op, inputs, rng, tolerance=1e-5):
    """Grad-check op through a random linear functional of its output."""
    with no_grad():
        out_shape = op(*inputs).shape
    weights = Tensor(rng.standard_normal(out_shape))
    params = {f"{name}[{i}]": t for i, t in enumerate(inputs)}
    report = grad_check(lambda: reduce_sum(op(*inputs) * weights), params, step=1e-5, tolerance=tolerance)
    assert report.passed, f"{name}: {report.errors}"
    return report.max_error


def _var(rng, *shape, low=None, high=None):
    if low is not None:
        return Tensor(rng.uniform(low, high, size=shape), requires_grad=True)
    return Tensor(rng.standard_normal(shape), requires_grad=True)


def test_forward_examples():
    """relu, softmax and L2-normalize on the hand-checked values"""
    np.testing.assert_array_equal(relu(Tensor([-1.0, 0.0, 2.0])).data, [0.0, 0.0, 2.0])
    np.testing.assert_allclose(softmax(Tensor([0.0, 0.0])).data, [0.5, 0.5])
    np.testing.assert_allclose(l2_normalize(Tensor([3.0, 4.0])).data, [0.6, 0.8], atol=1e-15)
    print("✓ relu / softmax / l2-normalize examples")


def test_quadratic_gradient_and_accumulation():
    """d/dx sum(x*x) = 2x, and a second backward doubles the gradient"""
    x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    loss = reduce_sum(x * x)
    loss.backward()
    np.testing.assert_allclose(x.grad, [2.0, 4.0, 6.0])
    loss.backward()
    np.testing.assert_allclose(x.grad, [4.0, 8.0, 12.0])
    print("✓ quadratic gradient accumulates additively")


def test_parameter_zero_grad():
    """Parameter gradients have the value's shape and reset to zero"""
    w = Parameter(np.ones((2, 3)), name="w")
    assert w.gradient.shape == (2, 3)
    reduce_sum(w * 3.0).backward()
    np.testing.assert_allclose(w.gradient, 3.0)
    w.zero_grad()
    assert not w.gradient.any()
    print("✓ parameter gradients reset")


def test_l2_normalize_kills_radial_component():
    """Upstream gradient parallel to a unit input yields a zero input gradient"""
    x = Tensor([0.6, 0.8], requires_grad=True)
    l2_normalize(x).backward(np.array([1.8, 2.4]))
    np.testing.assert_allclose(x.grad, [0.0, 0.0], atol=1e-12)
    print("✓ L2-normalize radial gradient vanishes")


def test_l2_normalize_guard():
    """Near-zero vectors map to zero output with zero gradient"""
    x = Tensor(np.zeros((2, 3)), requires_grad=True)
    y = l2_normalize(x)
    assert not y.data.any()
    y.backward(np.ones((2, 3)))
    assert not x.grad.any()
    rng = np.random.default_rng(1)
    big = l2_normalize(Tensor(rng.standard_normal((50, 8)))).data
    np.testing.assert_allclose(np.linalg.norm(big, axis=-1), 1.0, atol=1e-9)
    print("✓ L2-normalize guard and unit norms")


def test_softmax_rows_sum_to_one():
    """Softmax rows are nonnegative and sum to one"""
    rng = np.random.default_rng(2)
    out = softmax(Tensor(rng.standard_normal((20, 7)) * 10)).data
    assert (out >= 0).all()
    np.testing.assert_allclose(out.sum(axis=-1), 1.0, atol=1e-9)
    print("✓ softmax rows normalized")


def test_bilinear_resize_identity():
    """Resizing to the same size returns the input exactly"""
    rng = np.random.default_rng(3)
    x = rng.standard_normal((2, 3, 5, 7))
    np.testing.assert_array_equal(bilinear_resize(Tensor(x), (5, 7)).data, x)
    print("✓ bilinear resize identity")


def test_forward_determinism():
    """Identical inputs and parameters give bit-identical outputs"""
    rng = np.random.default_rng(4)
    x = Tensor(rng.standard_normal((1, 2, 6, 6)))
    w = Parameter(rng.standard_normal((4, 2, 3, 3)))
    b = Parameter(rng.standard_normal(4))
    first = conv2d(x, w, b).data
    second = conv2d(x, w, b).data
    assert np.array_equal(first, second)
    print("✓ forward determinism")


def test_shape_errors():
    """Incompatible operands raise ShapeError naming the primitive"""
    try:
        matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 2))))
        raise AssertionError("matmul accepted mismatched shapes")
    except ShapeError as e:
        assert "matmul" in str(e)
    try:
        conv2d(Tensor(np.ones((1, 3, 4, 4))), Parameter(np.ones((2, 2, 3, 3))))
        raise AssertionError("conv2d accepted mismatched channels")
    except ShapeError as e:
        assert "conv2d" in str(e)
    x = Tensor(np.ones(3), requires_grad=True)
    try:
        (x * 2.0).backward(np.ones(4))
        raise AssertionError("backward accepted a mismatched upstream gradient")
    except ShapeError as e:
        assert "backward" in str(e)
    print("✓ shape errors name the primitive")


def test_conv2d_gradient_tight():
    """conv2d on a 1x1x4x4 input agrees with finite differences below 1e-6"""
    rng = np.random.default_rng(5)
    x = _var(rng, 1, 1, 4, 4)
    w = _var(rng, 2, 1, 3, 3)
    b = _var(rng, 2)
    error = _check_primitive("conv2d", lambda a, k, c: conv2d(a, k, c), [x, w, b], rng, tolerance=1e-6)
    print(f"✓ conv2d gradient (max rel err {error:.2e})")


def test_linear_gradient_tight():
    """Linear layer with a random 3x3 weight below 1e-6"""
    rng = np.random.default_rng(6)
    x = _var(rng, 4, 3)
    w = _var(rng, 3, 3)
    error = _check_primitive("linear", lambda a, k: linear(a, k), [x, w], rng, tolerance=1e-6)
    print(f"✓ linear gradient (max rel err {error:.2e})")


def test_constant_graph():
    """Output independent of the parameter gives zero analytic and numeric gradients"""
    w = Parameter(np.array([1.0, -2.0]), name="w")
    report = grad_check(lambda: reduce_sum(Tensor(np.ones(3))), {"w": w})
    assert report.errors["w"] == 0.0
    assert not w.gradient.any()
    print("✓ constant graph")


def test_softmax_cross_entropy_composition():
    """logsumexp(z) - z[label] through a linear layer checks below 1e-5"""
    rng = np.random.default_rng(7)
    x = Tensor(rng.standard_normal((5, 4)))
    w = Parameter(rng.standard_normal((3, 4)), name="w")
    b = Parameter(rng.standard_normal(3), name="b")
    onehot = Tensor(np.eye(3)[rng.integers(0, 3, size=5)])

    def loss():
        logits = linear(x, w, b)
        return reduce_mean(logsumexp(logits) - reduce_sum(logits * onehot, axis=1))

    report = grad_check(loss, {"w": w, "b": b}, tolerance=1e-5)
    assert report.passed, report.errors
    print("✓ softmax cross-entropy composition")


def test_grad_check_flags_wrong_gradient():
    """A primitive with a wrong backward is reported as failing"""

    class BadSquare(Function):
        name = "bad_square"

        def forward(self, x):
            self.x = x
            return x * x

        def backward(self, grad):
            return (grad * self.x,)

    x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    report = grad_check(lambda: reduce_sum(BadSquare.apply(x)), {"x": x})
    assert report.failed == ["x"]
    print("✓ grad_check flags a wrong backward")


def test_every_primitive_gradient():
    """20 random float64 instances per primitive pass central differences at 1e-5"""
    rng = np.random.default_rng(8)
    cases = [
        ("conv2d", lambda rng: ([_var(rng, 1, 2, 5, 5), _var(rng, 3, 2, 3, 3), _var(rng, 3)],
                                lambda x, w, b: conv2d(x, w, b))),
        ("conv2d_stride2", lambda rng: ([_var(rng, 1, 2, 6, 6), _var(rng, 2, 2, 3, 3)],
                                        lambda x, w: conv2d(x, w, stride=2, padding=1))),
        ("linear", lambda rng: ([_var(rng, 4, 3), _var(rng, 2, 3), _var(rng, 2)],
                                lambda x, w, b: linear(x, w, b))),
        ("relu", lambda rng: ([_var(rng, 3, 4)], relu)),
        ("sigmoid", lambda rng: ([_var(rng, 3, 4)], sigmoid)),
        ("softmax", lambda rng: ([_var(rng, 3, 4)], softmax)),
        ("feature_norm", lambda rng: ([_var(rng, 2, 3, 4, 4), _var(rng, 1, 3, 1, 1), _var(rng, 1, 3, 1, 1)],
                                      lambda x, g, b: feature_norm(x, g, b))),
        ("feature_norm_rows", lambda rng: ([_var(rng, 6, 2), _var(rng, 1, 2), _var(rng, 1, 2)],
                                           lambda x, g, b: feature_norm(x, g, b, axes=(0,)))),
        ("bilinear_resize", lambda rng: ([_var(rng, 1, 2, 3, 4)], lambda x: bilinear_resize(x, (5, 6)))),
        ("l2_normalize", lambda rng: ([_var(rng, 4, 5)], l2_normalize)),
        ("l2_normalize_channels", lambda rng: ([_var(rng, 1, 3, 2, 2)], lambda x: l2_normalize(x, axis=1))),
        ("concat", lambda rng: ([_var(rng, 2, 3), _var(rng, 2, 2)], lambda a, b: concat([a, b], axis=1))),
        ("max_pool2x2", lambda rng: ([_var(rng, 1, 2, 4, 4)], max_pool2x2)),
        ("add", lambda rng: ([_var(rng, 3, 4), _var(rng, 1, 4)], add)),
        ("sub", lambda rng: ([_var(rng, 3, 4), _var(rng, 3, 1)], sub)),
        ("mul", lambda rng: ([_var(rng, 3, 4), _var(rng, 4)], mul)),
        ("matmul", lambda rng: ([_var(rng, 3, 4), _var(rng, 4, 2)], matmul)),
        ("sum", lambda rng: ([_var(rng, 3, 4)], lambda x: reduce_sum(x, axis=1))),
        ("mean", lambda rng: ([_var(rng, 3, 4)], lambda x: reduce_mean(x, axis=0, keepdims=True))),
        ("max", lambda rng: ([_var(rng, 3, 4)], lambda x: reduce_max(x, axis=1))),
        ("max_all", lambda rng: ([_var(rng, 3, 4)], reduce_max)),
        ("sqrt", lambda rng: ([_var(rng, 3, 4, low=0.5, high=2.0)], sqrt)),
        ("abs", lambda rng: ([_var(rng, 3, 4)], absolute)),
        ("logsumexp", lambda rng: ([_var(rng, 3, 4)], logsumexp)),
        ("index_select", lambda rng: ([_var(rng, 5, 3)], lambda x: index_select(x, [0, 2, 2, 4]))),
        ("reshape", lambda rng: ([_var(rng, 3, 4)], lambda x: reshape(x, (2, 6)))),
        ("transpose", lambda rng: ([_var(rng, 2, 3, 4)], lambda x: transpose(x, (2, 0, 1)))),
    ]
    for name, build in cases:
        worst = 0.0
        for _ in range(RANDOM_INSTANCES):
            inputs, op = build(rng)
            worst = max(worst, _check_primitive(name, op, inputs, rng))
        print(f"  {name:<24} max rel err {worst:.2e}")
    print(f"✓ {len(cases)} primitives pass finite differences")


def test_checkpoint_round_trip():
    """Tensors survive the COAMCKPT format at float32 and bad magic is rejected"""
    rng = np.random.default_rng(9)
    tensors = {"enc.0.weight": rng.standard_normal((4, 3, 3, 3)), "scalar_bias": np.array([0.25])}
    with tempfile.TemporaryDirectory() as tmp:
        path = os.path.join(tmp, "model.ckpt")
        save_tensors(path, tensors)
        loaded = load_tensors(path)
        assert list(loaded) == list(tensors)
        for name, value in tensors.items():
            np.testing.assert_array_equal(loaded[name], value.astype(np.float32))
        with open(path, "rb") as f:
            payload = f.read()
        assert payload[:8] == b"COAMCKPT"

        bad = os.path.join(tmp, "bad.ckpt")
        with open(bad, "wb") as f:
            f.write(b"NOTACKPT" + payload[8:])
        try:
            load_tensors(bad)
            raise AssertionError("bad magic accepted")
        except CheckpointError:
            pass
    print("✓ checkpoint round trip")


def run_all(namespace):
    """Run every test_* function in definition order; return the failure count."""
    tests = [fn for name, fn in namespace.items() if name.startswith("test_") and callable(fn)]
    failures = 0
    for test in tests:
        try:
            test()
        except Exception as e:
            failures += 1
            print(f"✗ {test.__name__} failed: {e}")
    return failures


if __name__ == "__main__":
    print("Testing diffcore...")
    failed = run_all(dict(globals()))
    if failed:
        print(f"\n✗ {failed} test(s) failed.")
        sys.exit(1)
    print("\n✓ All diffcore tests passed!")
