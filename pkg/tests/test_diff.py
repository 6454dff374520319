import numpy as np
import pytest

from vmfprobe import diff as D


def grad_of(f, x):
    tape = D.Tape()
    t = tape.leaf(x, requires_grad=True)
    D.backward(tape, f(t))
    return t.grad


def test_relu_forward_backward():
    tape = D.Tape()
    x = tape.leaf([-1.0, 2.0], requires_grad=True)
    y = D.relu(x)
    assert np.array_equal(y.data, [0.0, 2.0])
    D.backward(tape, D.sum(y))
    assert np.array_equal(x.grad, [0.0, 1.0])


def test_normalize_345():
    tape = D.Tape()
    y = D.l2_normalize_rows(tape.leaf([[3.0, 4.0]]))
    assert np.allclose(y.data, [[0.6, 0.8]], rtol=0, atol=1e-15)


def test_softplus_backward_at_zero():
    assert grad_of(lambda t: D.sum(D.softplus(t)), np.array([0.0]))[0] == 0.5


def test_backward_examples():
    x = np.array([1.0, 2.0, 3.0])
    assert np.array_equal(grad_of(D.sum, np.random.default_rng(0).normal(size=(3, 2))), np.ones((3, 2)))
    g = grad_of(lambda t: D.mean(D.mul(t, t)), x)
    assert np.allclose(g, [2 / 3, 4 / 3, 2.0], rtol=1e-15)


def test_non_scalar_loss_rejected():
    tape = D.Tape()
    x = tape.leaf([1.0, 2.0], requires_grad=True)
    with pytest.raises(D.ShapeError):
        D.backward(tape, D.relu(x))


def test_shape_errors():
    tape = D.Tape()
    a = tape.leaf(np.ones((2, 3)))
    with pytest.raises(D.ShapeError):
        D.matmul(a, a)
    with pytest.raises(D.ShapeError):
        D.add(a, tape.leaf(np.ones(2)))
    with pytest.raises(D.ShapeError):
        D.mul(a, tape.leaf(np.ones(3)))
    with pytest.raises(D.ShapeError):
        D.sub(a, tape.leaf(np.ones((3, 2))))
    with pytest.raises(ValueError):
        D.l2_normalize_rows(tape.leaf(np.zeros((1, 3))))


def test_tapes_do_not_mix():
    a = D.Tape().leaf([1.0])
    b = D.Tape().leaf([1.0])
    with pytest.raises(ValueError):
        D.add(a, b)


# Each primitive, wrapped into a scalar objective with fixed random weights so
# that every output coordinate contributes to the checked gradient.
RNG = np.random.default_rng(1234)
W23 = RNG.normal(size=(2, 3))
W32 = RNG.normal(size=(3, 2))
W3 = RNG.normal(size=3)
W2 = RNG.normal(size=2)
W4 = RNG.normal(size=4)
Y23 = RNG.normal(size=(2, 3))
MASK = np.array([[False, True, True], [True, False, True]])


def weighted(t, w):
    return D.sum(D.mul(t, w))


PRIMITIVES = {
    "matmul_left": (lambda t: weighted(D.matmul(t, W32), np.ones((2, 2))), (2, 3)),
    "matmul_right": (lambda t: weighted(D.matmul(W23, t), W23 @ W32), (3, 2)),
    "add_bias": (lambda t: weighted(D.add(W23, t), W23), (3,)),
    "add_same": (lambda t: weighted(D.add(t, W23), W23), (2, 3)),
    "sub": (lambda t: weighted(D.sub(W23, t), W23), (2, 3)),
    "mul_same": (lambda t: D.sum(D.mul(t, t)), (2, 3)),
    "mul_scalar": (lambda t: weighted(D.mul(t, 2.5), W23), (2, 3)),
    "scale_rows_matrix": (lambda t: weighted(D.scale_rows(t, W2), W23), (2, 3)),
    "scale_rows_vector": (lambda t: weighted(D.scale_rows(W23, t), W23), (2,)),
    "reciprocal": (lambda t: weighted(D.reciprocal(D.add(D.mul(t, t), 1.0)), W23), (2, 3)),
    "relu": (lambda t: weighted(D.relu(t), W23), (2, 3)),
    "softplus": (lambda t: weighted(D.softplus(t), W23), (2, 3)),
    "exp": (lambda t: weighted(D.exp(t), W23), (2, 3)),
    "log": (lambda t: weighted(D.log(D.add(D.mul(t, t), 0.5)), W23), (2, 3)),
    "l2_normalize_rows": (lambda t: weighted(D.l2_normalize_rows(t), W23), (2, 3)),
    "sum_axis0": (lambda t: weighted(D.sum(t, 0), W3), (2, 3)),
    "sum_axis1": (lambda t: weighted(D.sum(t, 1), W2), (2, 3)),
    "mean": (lambda t: D.mean(D.mul(t, t)), (2, 3)),
    "dot_rows": (lambda t: weighted(D.dot_rows(t, W23), W2), (2, 3)),
    "cosine_rows": (lambda t: weighted(D.cosine_rows(t, W23), W2), (2, 3)),
    "concat_rows": (lambda t: weighted(D.concat_rows(t, W23), np.vstack([W23, W23 * 2])), (2, 3)),
    "transpose": (lambda t: weighted(D.transpose(t), W32), (2, 3)),
    "take": (lambda t: weighted(D.take(t, [0, 1, 1], [2, 0, 2]), W3), (2, 3)),
    "masked_logsumexp_rows": (lambda t: weighted(D.masked_logsumexp_rows(t, MASK), W2), (2, 3)),
    "householder_rows": (
        lambda t: weighted(D.householder_rows(D.l2_normalize_rows(t), Y23), W23),
        (2, 3),
    ),
    "unflatten": (lambda t: (lambda p: D.add(weighted(p[0], W2), weighted(p[1], W2)))(D.unflatten(t, [(2,), (2,)])), (4,)),
}


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
def test_primitive_gradients(name):
    f, shape = PRIMITIVES[name]
    rng = np.random.default_rng(sorted(PRIMITIVES).index(name))
    for _ in range(20):
        point = rng.normal(size=shape)
        if name == "relu":
            point = np.where(np.abs(point) < 1e-3, 0.5, point)  # keep away from the kink
        assert D.gradient_check(f, point) <= 1e-6, name


def test_gradient_check_example():
    assert D.gradient_check(lambda t: D.sum(D.mul(t, t)), np.array(3.0)) <= 1e-8


def test_mu_head_composite_gradient():
    rng = np.random.default_rng(5)
    w1, b1, w2 = rng.normal(size=(4, 6)), rng.normal(size=6), rng.normal(size=(6, 3))
    x = rng.normal(size=(5, 4))
    proj = rng.normal(size=(5, 3))

    def f(t):
        h = D.relu(D.add(D.matmul(x, t), b1))
        return D.sum(D.mul(D.l2_normalize_rows(D.matmul(h, w2)), proj))

    assert D.gradient_check(f, w1) <= 1e-5


def test_normalize_gradient_is_tangent():
    rng = np.random.default_rng(9)
    for _ in range(20):
        v = rng.normal(size=(4, 7))
        w = rng.normal(size=(4, 7))
        tape = D.Tape()
        t = tape.leaf(v, requires_grad=True)
        u = D.l2_normalize_rows(t)
        D.backward(tape, D.sum(D.mul(u, w)))
        assert np.max(np.abs(np.einsum("ij,ij->i", t.grad, u.data))) <= 1e-9


def test_backward_is_deterministic():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(6, 5))
    tape = D.Tape()
    t = tape.leaf(x, requires_grad=True)
    loss = D.sum(D.softplus(D.matmul(D.l2_normalize_rows(t), D.transpose(t))))
    g1 = D.backward(tape, loss)[t].copy()
    g2 = D.backward(tape, loss)[t].copy()
    assert np.array_equal(g1, g2)


def test_householder_degenerate_pole_passes_through():
    tape = D.Tape()
    mu = tape.leaf(np.array([[1.0, 0.0, 0.0]]), requires_grad=True)
    y = np.array([[0.2, 0.3, np.sqrt(1 - 0.13)]])
    out = D.householder_rows(mu, y)
    assert np.array_equal(out.data, y)
