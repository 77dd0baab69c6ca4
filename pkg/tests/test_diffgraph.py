import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from optguard import densela, diffgraph
from optguard.defense import DefenseConfig, clamp_stack
from optguard.errors import InvalidInput, NonFiniteForward


def _net(act="tanh", defense=None, seed=0, d=5, m=2, n=4):
    return diffgraph.init_network(d, (7,), m, n, act, seed=seed, defense=defense)


def _clamp(a, bound):
    return clamp_stack(a[None], bound)[0][0]


def _ill(rng, m=3, n=4, smallest=1e-4):
    u, _ = np.linalg.qr(rng.standard_normal((m, m)))
    v, _ = np.linalg.qr(rng.standard_normal((n, n)))
    s = np.geomspace(1.0, smallest, min(m, n))
    return (u[:, :min(m, n)] * s) @ v[:, :min(m, n)].T


@pytest.mark.parametrize("kind", ["relu", "celu", "tanh", "identity"])
def test_activation_derivative(kind, rng):
    x = rng.standard_normal(20)
    x = x[np.abs(x) > 1e-3]
    y, dy = diffgraph.activation(kind, x)
    h = 1e-7
    ref = (diffgraph.activation(kind, x + h)[0] - diffgraph.activation(kind, x - h)[0]) / (2 * h)
    assert np.allclose(dy, ref, atol=1e-6)
    with pytest.raises(InvalidInput):
        diffgraph.activation("gelu", x)


def test_cross_entropy_oracle(rng):
    z = rng.standard_normal((4, 3))
    y = np.array([0, 2, 1, 2])
    loss, g = diffgraph.cross_entropy(z, y)
    p = np.exp(z) / np.exp(z).sum(axis=1, keepdims=True)
    assert loss == pytest.approx(-np.mean(np.log(p[np.arange(4), y])))
    h = 1e-6
    ref = np.zeros_like(z)
    for idx in np.ndindex(z.shape):
        e = np.zeros_like(z)
        e[idx] = h
        ref[idx] = (diffgraph.cross_entropy(z + e, y)[0] - diffgraph.cross_entropy(z - e, y)[0]) / (2 * h)
    assert np.allclose(g, ref, atol=1e-8)


@pytest.mark.parametrize("kind", ["relu", "celu", "tanh"])
@pytest.mark.parametrize("bound", [None, 3.0])
def test_network_backward_fd(kind, bound, rng):
    net = _net(kind, None if bound is None else DefenseConfig(bound), seed=1)
    u = rng.standard_normal((3, 5))
    y = np.array([0, 3, 1])

    def loss(x):
        return diffgraph.cross_entropy(diffgraph.forward(net, x).qp_out, y)[0]

    fr = diffgraph.forward(net, u)
    if bound is not None:
        assert fr.defense_active.any()
    l0, gz = diffgraph.cross_entropy(fr.qp_out, y)
    g = diffgraph.backward(net, fr, grad_z=gz)
    h = 1e-6
    ref = np.zeros_like(u)
    for idx in np.ndindex(u.shape):
        e = np.zeros_like(u)
        e[idx] = h
        ref[idx] = (loss(u + e) - loss(u - e)) / (2 * h)
    assert np.linalg.norm(g.u - ref) <= 1e-5 * np.linalg.norm(ref)
    w = net.layers[0].w
    ref_w = np.zeros_like(w)
    for idx in [(0, 0), (3, 2), (6, 4)]:
        old = w[idx]
        w[idx] = old + h
        lp = loss(u)
        w[idx] = old - h
        lm = loss(u)
        w[idx] = old
        ref_w[idx] = (lp - lm) / (2 * h)
        assert g.layers[0][0][idx] == pytest.approx(ref_w[idx], rel=1e-5, abs=1e-9)


@pytest.mark.parametrize("shape", [(3, 4), (4, 3), (3, 3)])
def test_svd_backward_fd(shape, rng):
    a = _ill(rng, *shape, smallest=1e-2)
    bound = 20.0
    g = rng.standard_normal(shape)
    f = densela.svd(a)
    got = diffgraph.svd_backward(f, g, bound)
    h = 1e-7
    ref = np.zeros_like(a)
    for idx in np.ndindex(a.shape):
        e = np.zeros_like(a)
        e[idx] = h
        ref[idx] = np.sum(g * (_clamp(a + e, bound) - _clamp(a - e, bound))) / (2 * h)
    assert np.linalg.norm(got - ref) <= 1e-5 * np.linalg.norm(ref)


def test_svd_backward_inactive_passthrough(rng):
    a = rng.standard_normal((3, 3)) + 5 * np.eye(3)
    g = rng.standard_normal((3, 3))
    assert np.array_equal(diffgraph.svd_backward(densela.svd(a), g, 100.0), g)


def test_svd_backward_repeated_clamped_values_finite(rng):
    u, _ = np.linalg.qr(rng.standard_normal((3, 3)))
    a = (u * np.array([1.0, 1e-6, 1e-6])) @ u.T
    got = diffgraph.svd_backward(densela.svd(a), rng.standard_normal((3, 3)), 10.0)
    assert np.isfinite(got).all()


def test_tape_replay_and_grads(rng):
    net = _net("relu", DefenseConfig(3.0))
    fr = diffgraph.forward(net, rng.standard_normal((2, 5)))
    assert fr.tape.replay_matches()
    ops = [r.op for r in fr.tape.records]
    assert ops[-3:] == ["clamp", "qp", "softmax"]
    g = diffgraph.backward(net, fr, grad_probs=np.ones((2, 4)))
    assert np.allclose(fr.tape.grads["u"], g.u)
    fr.tape.zero_grad()
    assert not fr.tape.grads["u"].any()


def test_stacked_network_matches_individual(rng):
    nets = [_net(seed=s) for s in (0, 1)]
    stacked = diffgraph.Network.stack(nets, repeats=2)
    u = rng.standard_normal((4, 5))
    fr = diffgraph.forward(stacked, u)
    gs = diffgraph.backward(stacked, fr, grad_z=np.ones((4, 4)))
    for i in range(4):
        net = nets[i // 2]
        f1 = diffgraph.forward(net, u[i])
        assert np.allclose(f1.qp_out[0], fr.qp_out[i])
        g1 = diffgraph.backward(net, f1, grad_z=np.ones((1, 4)))
        assert np.allclose(g1.u[0], gs.u[i])
    with pytest.raises(InvalidInput):
        diffgraph.forward(stacked, u[:3])


def test_singular_forward_flags_and_backward_refuses(rng):
    net = _net("relu")
    last = net.layers[-1]
    last.w[:] = 0.0
    last.b[:] = 0.0
    last.b[8:] = 1.0
    fr = diffgraph.forward(net, rng.standard_normal((2, 5)))
    assert fr.nonfinite.all() and fr.numerically_singular.all()
    assert np.isnan(fr.qp_out).all()
    with pytest.raises(NonFiniteForward):
        diffgraph.backward(net, fr, grad_z=np.ones((2, 4)))
    # gradients that do not pass through the QP are still available
    g = diffgraph.backward(net, fr, grad_a=np.ones((2, 2, 4)))
    assert np.isfinite(g.u).all()


def test_defense_bounds_kappa(rng):
    net = _net("relu", DefenseConfig(5.0))
    net.layers[-1].w[:] *= 0.0
    net.layers[-1].b[:8] = [1.0, 0.0, 0.0, 0.0, 0.0, 1e-9, 0.0, 0.0]
    fr = diffgraph.forward(net, rng.standard_normal(5))
    assert fr.kappa2[0] <= 5.0 * (1 + 1e-9)
    assert not fr.any_nonfinite


def test_input_validation():
    net = _net()
    with pytest.raises(InvalidInput):
        diffgraph.forward(net, np.ones(3))
    with pytest.raises(InvalidInput):
        diffgraph.forward(net, np.array([np.nan] * 5))
    with pytest.raises(InvalidInput):
        diffgraph.Network(net.layers, 3, 4)


def test_json_roundtrip(rng):
    net = _net("celu", DefenseConfig(10.0), seed=4)
    net2 = diffgraph.Network.from_json(json.loads(json.dumps(net.to_json())))
    u = rng.standard_normal((2, 5))
    assert np.array_equal(diffgraph.forward(net, u).qp_out, diffgraph.forward(net2, u).qp_out)
    assert net2.defense.bound_b == 10.0


def test_adam_reduces_quadratic():
    x = np.array([3.0, -2.0])
    opt = diffgraph.Adam([x], lr=0.1)
    for _ in range(300):
        opt.step([2 * x])
    assert np.linalg.norm(x) < 1e-2


@given(st.integers(0, 1000))
def test_forward_deterministic_property(seed):
    net = _net(seed=seed % 7)
    u = np.random.default_rng(seed).standard_normal((2, 5))
    a, b = diffgraph.forward(net, u), diffgraph.forward(net, u.copy())
    assert np.array_equal(a.qp_out, b.qp_out, equal_nan=True)
