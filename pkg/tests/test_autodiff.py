import numpy as np
import pytest

from hashpress.autodiff import (
    ShapeError,
    Tape,
    Tensor,
    backward,
    finite_difference_check,
    forward_primitive,
    grad_of,
)


def test_add_elementwise():
    t = Tape()
    out = t.add(Tensor([1.0, 2.0]), Tensor([3.0, 4.0]))
    assert np.array_equal(out.data, [4.0, 6.0])


def test_relu_definition():
    t = Tape()
    out = t.relu(Tensor([-1.0, 0.0, 2.0]))
    assert np.array_equal(out.data, [0.0, 0.0, 2.0])


def test_matmul_identity():
    rng = np.random.default_rng(0)
    a = rng.normal(size=(3, 5))
    t = Tape()
    out = t.matmul(Tensor(np.eye(3)), Tensor(a))
    assert np.allclose(out.data, a)


def test_shape_mismatch_diagnostic():
    t = Tape()
    with pytest.raises(ShapeError) as exc:
        t.add(Tensor([1.0, 2.0]), Tensor([1.0, 2.0, 3.0]))
    assert "(2,)" in str(exc.value) and "(3,)" in str(exc.value)


def test_backward_sum_of_squares():
    t = Tape()
    x = Tensor([1.0, 2.0], requires_grad=True)
    loss = t.sum(t.square(x))
    backward(t, loss)
    assert np.allclose(x.grad, [2.0, 4.0])


def test_backward_sigmoid_at_zero():
    t = Tape()
    x = Tensor(0.0, requires_grad=True)
    loss = t.sigmoid(x)
    backward(t, loss)
    assert np.allclose(x.grad, 0.25)


def test_backward_requires_scalar_loss():
    t = Tape()
    x = Tensor([1.0, 2.0], requires_grad=True)
    y = t.square(x)
    with pytest.raises(ShapeError):
        backward(t, y)


def test_backward_twice_accumulates_exactly_double():
    t = Tape()
    x = Tensor([1.5, -0.5, 2.0], requires_grad=True)
    loss = t.sum(t.mul(x, x))
    backward(t, loss)
    once = x.grad.copy()
    backward(t, loss)
    assert np.array_equal(x.grad, 2.0 * once)


def test_three_layer_net_matches_finite_differences():
    rng = np.random.default_rng(7)
    w1 = rng.normal(size=(4, 8)) * 0.5
    w2 = rng.normal(size=(8, 8)) * 0.5
    w3 = rng.normal(size=(8, 1)) * 0.5
    b1 = rng.normal(size=(8,)) * 0.1
    x0 = rng.normal(size=(2, 4))

    def f(tape, x):
        h1 = tape.tanh(tape.badd(tape.matmul(x, Tensor(w1)), Tensor(b1)))
        h2 = tape.sigmoid(tape.matmul(h1, Tensor(w2)))
        return tape.sum(tape.square(tape.matmul(h2, Tensor(w3))))

    assert finite_difference_check(f, x0) < 1e-4

    # and w.r.t. a weight tensor rather than the input
    def g(tape, w):
        h1 = tape.tanh(tape.badd(tape.matmul(Tensor(x0), w), Tensor(b1)))
        h2 = tape.sigmoid(tape.matmul(h1, Tensor(w2)))
        return tape.sum(tape.square(tape.matmul(h2, Tensor(w3))))

    assert finite_difference_check(g, w1) < 1e-4


def test_finite_difference_linear_function():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(5,))
    assert finite_difference_check(lambda t, v: t.sum(v), x) < 1e-8


def test_finite_difference_rejects_bad_step():
    with pytest.raises(ValueError):
        finite_difference_check(lambda t, v: t.sum(v), np.ones(3), step=0.0)


def _rand(rng, shape, lo=-2.0, hi=2.0):
    return rng.uniform(lo, hi, size=shape)


PRIMITIVE_CASES = [
    ("add", lambda rng: [_rand(rng, (3, 4)), _rand(rng, (3, 4))], {}),
    ("sub", lambda rng: [_rand(rng, (3, 4)), _rand(rng, (3, 4))], {}),
    ("mul", lambda rng: [_rand(rng, (3, 4)), _rand(rng, (3, 4))], {}),
    ("div", lambda rng: [_rand(rng, (3, 4)), _rand(rng, (3, 4), 0.5, 2.0)], {}),
    ("matmul", lambda rng: [_rand(rng, (3, 4)), _rand(rng, (4, 2))], {}),
    ("matmul", lambda rng: [_rand(rng, (2, 3, 4)), _rand(rng, (2, 4, 2))], {}),
    ("conv2d", lambda rng: [_rand(rng, (2, 6, 6, 3)), _rand(rng, (3, 3, 3, 4))], {"stride": 1, "pad": 1}),
    ("conv2d", lambda rng: [_rand(rng, (1, 8, 8, 2)), _rand(rng, (3, 3, 2, 3))], {"stride": 2, "pad": 1}),
    ("upsample2x", lambda rng: [_rand(rng, (2, 3, 3, 2))], {}),
    ("relu", lambda rng: [np.where(np.abs(z := _rand(rng, (3, 4))) < 0.1, 0.5, z)], {}),
    ("sigmoid", lambda rng: [_rand(rng, (3, 4))], {}),
    ("tanh", lambda rng: [_rand(rng, (3, 4))], {}),
    ("softplus", lambda rng: [_rand(rng, (3, 4))], {}),
    ("log", lambda rng: [_rand(rng, (3, 4), 0.1, 3.0)], {}),
    ("exp", lambda rng: [_rand(rng, (3, 4))], {}),
    ("square", lambda rng: [_rand(rng, (3, 4))], {}),
    ("sum", lambda rng: [_rand(rng, (3, 4))], {"axis": 1}),
    ("sum", lambda rng: [_rand(rng, (2, 3, 4))], {"axis": (0, 2), "keepdims": True}),
    ("mean", lambda rng: [_rand(rng, (3, 4))], {}),
    ("mean", lambda rng: [_rand(rng, (2, 3, 4))], {"axis": (1, 2)}),
    ("badd", lambda rng: [_rand(rng, (3, 4)), _rand(rng, (4,))], {}),
    ("badd", lambda rng: [_rand(rng, (2, 3, 4)), _rand(rng, (2, 1, 4))], {}),
    ("scale_shift", lambda rng: [_rand(rng, (3, 4))], {"scale": -1.7, "shift": 0.3}),
    ("norm_cdf", lambda rng: [_rand(rng, (3, 4))], {}),
    ("clip_min", lambda rng: [np.where(np.abs((z := _rand(rng, (3, 4))) - 0.5) < 0.1, 1.0, z)], {"lo": 0.5}),
    ("reshape", lambda rng: [_rand(rng, (3, 4))], {"shape": (2, 6)}),
    ("transpose", lambda rng: [_rand(rng, (2, 3, 4))], {"axes": (2, 0, 1)}),
    ("expand_to", lambda rng: [_rand(rng, (1, 3, 1))], {"shape": (2, 3, 4)}),
    ("slice_axis", lambda rng: [_rand(rng, (3, 6))], {"axis": 1, "start": 1, "stop": 4}),
]


@pytest.mark.parametrize("op,make,kwargs", PRIMITIVE_CASES, ids=lambda v: v if isinstance(v, str) else "")
def test_primitive_gradients_match_finite_differences(op, make, kwargs):
    rng = np.random.default_rng(hash(op) % 2**32)
    for trial in range(3):
        args = make(rng)
        for slot in range(len(args)):

            def f(tape, x, _slot=slot, _args=args):
                ins = [Tensor(a) for a in _args]
                ins[_slot] = x
                out = forward_primitive(tape, op, ins, **kwargs)
                return tape.sum(tape.mul(out, out))

            assert finite_difference_check(f, args[slot]) < 1e-4, f"{op} slot {slot}"


def test_concat_gradient():
    rng = np.random.default_rng(11)
    a, b = rng.normal(size=(2, 3)), rng.normal(size=(4, 3))

    def f(tape, x):
        out = tape.concat([x, Tensor(b)], axis=0)
        return tape.sum(tape.square(out))

    assert finite_difference_check(f, a) < 1e-4


def test_straight_through_round_and_sign():
    t = Tape()
    x = Tensor([0.4, -1.6, 2.5], requires_grad=True)
    r = t.ste_round(x)
    assert np.array_equal(r.data, [0.0, -2.0, 3.0])
    loss = t.sum(t.mul(r, Tensor([1.0, 2.0, 3.0])))
    backward(t, loss)
    assert np.array_equal(x.grad, [1.0, 2.0, 3.0])  # identity backward

    t2 = Tape()
    y = Tensor([0.3, -0.2, 0.0], requires_grad=True)
    s = t2.ste_sign(y)
    assert np.array_equal(s.data, [1.0, -1.0, 1.0])  # sign(0) := +1
    backward(t2, t2.sum(s))
    assert np.array_equal(y.grad, [1.0, 1.0, 1.0])


def test_forward_deterministic():
    rng = np.random.default_rng(5)
    x = rng.normal(size=(4, 5))
    w = rng.normal(size=(5, 3))

    def run():
        t = Tape()
        return t.sigmoid(t.matmul(Tensor(x), Tensor(w))).data

    assert np.array_equal(run(), run())


def test_tape_is_topologically_ordered():
    t = Tape()
    x = Tensor([1.0, 2.0], requires_grad=True)
    y = t.mul(x, x)
    z = t.add(y, x)
    t.sum(z)
    produced_at = {}
    for i, node in enumerate(t.nodes):
        for inp in node.inputs:
            if id(inp) in produced_at:
                assert produced_at[id(inp)] < i
        produced_at[id(node.output)] = i


def test_grad_of_does_not_touch_grad_fields():
    t = Tape()
    x = Tensor([1.0, 3.0], requires_grad=True)
    loss = t.sum(t.square(x))
    (g,) = grad_of(t, loss, [x])
    assert np.allclose(g, [2.0, 6.0])
    assert x.grad is None


def test_gradient_accumulates_across_multiple_uses():
    t = Tape()
    x = Tensor([2.0], requires_grad=True)
    # loss = x*x + x -> dloss/dx = 2x + 1 = 5
    loss = t.sum(t.add(t.mul(x, x), x))
    backward(t, loss)
    assert np.allclose(x.grad, [5.0])


def test_unknown_primitive_rejected():
    with pytest.raises(KeyError):
        forward_primitive(Tape(), "fft", [Tensor([1.0])])
