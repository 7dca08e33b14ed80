import math
import zlib

import numpy as np
import pytest

from naomi import autodiff as ad
from naomi.autodiff import Tensor

from fd_oracle import grads_match, max_rel_error, numeric_grad


def analytic_grads(build, arrays):
    leaves = [Tensor(a, requires_grad=True) for a in arrays]
    ad.backward(build(leaves))
    return [l.grad if l.grad is not None else np.zeros_like(l.data) for l in leaves]


def value(build, arrays):
    with ad.no_grad():
        return float(build([Tensor(a) for a in arrays]).data)


def projected(op, proj):
    """Scalar loss <op(inputs), proj> so the whole Jacobian is exercised."""
    return lambda ts: ad.sum(ad.mul(op(ts), proj))


# (name, op over tensors, input shapes, input sampler)
def _u(rng, shape):
    return rng.uniform(-2, 2, shape)


def _pos(rng, shape):
    return rng.uniform(0.2, 2, shape)


OPS = [
    ("add", lambda t: ad.add(t[0], t[1]), [(3, 4), (3, 4)], _u),
    ("add_bias", lambda t: ad.add(t[0], t[1]), [(3, 4), (4,)], _u),
    ("sub", lambda t: ad.sub(t[0], t[1]), [(2, 5), (2, 5)], _u),
    ("mul", lambda t: ad.mul(t[0], t[1]), [(3, 4), (3, 4)], _u),
    ("scale", lambda t: ad.scale(t[0], -1.7), [(3, 3)], _u),
    ("matmul", lambda t: ad.matmul(t[0], t[1]), [(3, 4), (4, 2)], _u),
    ("transpose", lambda t: ad.transpose(t[0]), [(3, 4)], _u),
    ("tanh", lambda t: ad.tanh(t[0]), [(3, 4)], _u),
    ("sigmoid", lambda t: ad.sigmoid(t[0]), [(3, 4)], _u),
    ("softplus", lambda t: ad.softplus(t[0]), [(3, 4)], _u),
    ("square", lambda t: ad.square(t[0]), [(3, 4)], _u),
    ("log", lambda t: ad.log(t[0]), [(3, 4)], _pos),
    ("concat", lambda t: ad.concat([t[0], t[1]]), [(3, 2), (3, 5)], _u),
    ("slice", lambda t: ad.slice_last(t[0], 1, 4), [(3, 6)], _u),
    ("stack", lambda t: ad.stack([t[0], t[1]]), [(3, 2), (3, 2)], _u),
    ("sum", lambda t: ad.sum(t[0]), [(3, 4)], _u),
    ("mean", lambda t: ad.mean(t[0]), [(3, 4)], _u),
    ("gaussian_sample", lambda t: ad.gaussian_sample(t[0], t[1], np.linspace(-1, 1, 12).reshape(3, 4)),
     [(3, 4), (3, 4)], _pos),
    ("gru_cell", lambda t: ad.gru_cell(*t), [(2, 3), (2, 4), (3, 7), (3, 7), (3, 7), (3,), (3,), (3,)], _u),
]


def check_op(op, shapes, sampler, rng):
    arrays = [sampler(rng, s) for s in shapes]
    with ad.no_grad():
        out_shape = op([Tensor(a) for a in arrays]).shape
    proj = rng.uniform(-1, 1, out_shape)
    build = projected(op, proj)
    return grads_match(analytic_grads(build, arrays),
                       numeric_grad(lambda xs: value(build, xs), arrays))


@pytest.mark.parametrize("name,op,shapes,sampler", OPS, ids=[o[0] for o in OPS])
def test_op_gradients_match_finite_differences(name, op, shapes, sampler):
    rng = np.random.default_rng(zlib.crc32(name.encode()))
    for _ in range(5):
        assert check_op(op, shapes, sampler, rng), name


def test_matmul_identity():
    out = ad.matmul(Tensor([[1, 2], [3, 4]]), Tensor([[1, 0], [0, 1]]))
    np.testing.assert_array_equal(out.data, [[1, 2], [3, 4]])


def test_gaussian_sample_zero_sigma_uses_floor():
    out = ad.gaussian_sample(Tensor(0.5), Tensor(0.0), 1.0)
    assert out.item() == pytest.approx(0.500001, abs=1e-12)


def test_gaussian_sample_negative_sigma_rejected():
    with pytest.raises(ValueError):
        ad.gaussian_sample(Tensor(0.5), Tensor(-0.1), 1.0)


def test_tanh_value_and_slope():
    x = Tensor(0.3, requires_grad=True)
    y = ad.tanh(x)
    assert y.item() == pytest.approx(0.2913126124515909, abs=1e-12)
    ad.backward(y)
    (fd,) = numeric_grad(lambda a: math.tanh(float(a[0])), [np.array(0.3)])
    assert x.grad == pytest.approx(1 - math.tanh(0.3) ** 2, rel=1e-12)
    assert x.grad == pytest.approx(0.9151369618266293, rel=1e-12)
    assert max_rel_error(x.grad, fd) < 1e-4


def test_sum_gradient_is_ones():
    x = Tensor(np.random.default_rng(0).normal(size=(2, 3, 4)), requires_grad=True)
    ad.backward(ad.sum(x))
    np.testing.assert_array_equal(x.grad, np.ones((2, 3, 4)))


def test_mse_gradient_vanishes_at_minimum():
    c = np.array([[0.5, -1.0, 2.0]])
    x = Tensor(c.copy(), requires_grad=True)
    ad.backward(ad.mean(ad.square(ad.sub(x, c))))
    np.testing.assert_array_equal(x.grad, np.zeros_like(c))


def test_two_layer_mlp_gradients():
    rng = np.random.default_rng(7)
    x = rng.uniform(-2, 2, (4, 2))
    # 2*3 + 3 + 3*2 + 2 = 17 parameters
    params = [rng.uniform(-1, 1, s) for s in [(2, 3), (3,), (3, 2), (2,)]]
    assert sum(p.size for p in params) == 17

    def build(ts):
        w1, b1, w2, b2 = ts
        h = ad.tanh(ad.add(ad.matmul(Tensor(x), w1), b1))
        out = ad.tanh(ad.add(ad.matmul(h, w2), b2))
        return ad.sum(ad.square(out))

    analytic = analytic_grads(build, params)
    numeric = numeric_grad(lambda ps: value(build, ps), params)
    assert max(max_rel_error(a, n) for a, n in zip(analytic, numeric)) < 1e-4


def test_shared_input_contributions_sum():
    x0 = np.array([0.3, -1.2, 2.0])
    x = Tensor(x0, requires_grad=True)
    ad.backward(ad.sum(ad.add(ad.mul(x, x), x)))
    np.testing.assert_allclose(x.grad, 2 * x0 + 1, rtol=1e-15)


def test_repeated_backward_accumulates():
    x = Tensor([1.0, 2.0], requires_grad=True)
    loss = ad.sum(ad.square(x))
    ad.backward(loss)
    ad.backward(loss)
    np.testing.assert_array_equal(x.grad, [4.0, 8.0])


def test_graph_is_topological_and_visits_once():
    x = Tensor([1.0, 2.0], requires_grad=True)
    h = ad.tanh(x)
    loss = ad.sum(ad.add(ad.mul(h, h), h))
    graph = ad.Graph.build(loss)
    pos = {id(n): k for k, n in enumerate(graph.nodes)}
    assert len(pos) == len(graph.nodes)
    for node in graph.nodes:
        for p in node._parents:
            assert pos[id(p)] < pos[id(node)]
    assert graph.nodes[-1] is loss


def test_deterministic_evaluation():
    rng = np.random.default_rng(3)
    mu, sig, eps = rng.normal(size=4), rng.uniform(0.1, 1, 4), rng.normal(size=4)

    def run():
        return ad.gaussian_sample(ad.tanh(Tensor(mu)), ad.softplus(Tensor(sig)), eps).data

    assert run().tobytes() == run().tobytes()


def test_shape_mismatch_names_op():
    with pytest.raises(ValueError, match=r"matmul.*\(2, 3\).*\(2, 3\)"):
        ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))
    with pytest.raises(ValueError, match="add"):
        ad.add(Tensor(np.ones((2, 3))), Tensor(np.ones((3, 2))))


def test_log_of_nonpositive_rejected():
    with pytest.raises(ValueError, match="log"):
        ad.log(Tensor([1.0, 0.0]))


def test_backward_needs_scalar():
    with pytest.raises(ValueError, match="scalar"):
        ad.backward(ad.tanh(Tensor([1.0, 2.0], requires_grad=True)))


def test_no_grad_records_nothing():
    x = Tensor([1.0], requires_grad=True)
    with ad.no_grad():
        y = ad.tanh(x)
    assert not y.requires_grad and y.is_leaf


def composed_gru(h, x, wz, wr, wn, bz, br, bn):
    xh = ad.concat([x, h])
    z = ad.sigmoid(ad.add(ad.matmul(xh, ad.transpose(wz)), bz))
    r = ad.sigmoid(ad.add(ad.matmul(xh, ad.transpose(wr)), br))
    n = ad.tanh(ad.add(ad.matmul(ad.concat([x, ad.mul(r, h)]), ad.transpose(wn)), bn))
    return ad.add(h, ad.mul(z, ad.sub(n, h)))


def test_fused_gru_matches_primitive_composition():
    rng = np.random.default_rng(11)
    shapes = [(4, 5), (4, 3), (5, 8), (5, 8), (5, 8), (5,), (5,), (5,)]
    arrays = [rng.uniform(-1.5, 1.5, s) for s in shapes]
    proj = rng.uniform(-1, 1, (4, 5))
    grads = []
    for cell in (ad.gru_cell, composed_gru):
        leaves = [Tensor(a, requires_grad=True) for a in arrays]
        out = cell(*leaves)
        ad.backward(ad.sum(ad.mul(out, proj)))
        grads.append((out.data, [l.grad for l in leaves]))
    np.testing.assert_allclose(grads[0][0], grads[1][0], rtol=1e-13, atol=1e-15)
    for a, b in zip(grads[0][1], grads[1][1]):
        np.testing.assert_allclose(a, b, rtol=1e-11, atol=1e-14)


def test_gru_cell_shape_errors():
    with pytest.raises(ValueError, match="gru_cell"):
        ad.gru_cell(np.zeros((2, 3)), np.zeros((2, 4)), *[np.zeros((3, 6))] * 3, *[np.zeros(3)] * 3)
