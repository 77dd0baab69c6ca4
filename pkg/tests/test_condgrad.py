import numpy as np
import pytest

from optguard import condgrad, densela, diffgraph
from optguard.errors import DegenerateSpectrum, InvalidInput, SingularInput


def _fd(fn, a, h=1e-6):
    g = np.zeros_like(a)
    for idx in np.ndindex(a.shape):
        e = np.zeros_like(a)
        e[idx] = h
        g[idx] = (fn(a + e) - fn(a - e)) / (2 * h)
    return g


def _kappa2(a):
    s = np.linalg.svd(a, compute_uv=False)
    return s[0] / s[-1]


def _kappaF(a):
    return np.linalg.norm(a) * np.linalg.norm(np.linalg.pinv(a))


def test_diag_example():
    rep = condgrad.grad_kappa2(np.diag([2.0, 1.0]))
    assert np.allclose(rep.grad_wrt_a, [[1.0, 0.0], [0.0, -2.0]])
    assert rep.kappa == pytest.approx(2.0)
    assert rep.method == condgrad.TWO_NORM


@pytest.mark.parametrize("shape", [(3, 3), (3, 5), (5, 3)])
def test_grad_kappa2_fd(shape, rng):
    for _ in range(5):
        a = rng.standard_normal(shape)
        g = condgrad.grad_kappa2(a).grad_wrt_a
        ref = _fd(_kappa2, a)
        assert np.linalg.norm(g - ref) <= 1e-5 * np.linalg.norm(ref)


@pytest.mark.parametrize("shape", [(3, 3), (2, 4), (4, 2)])
def test_grad_kappaF_fd(shape, rng):
    for _ in range(5):
        a = rng.standard_normal(shape)
        g = condgrad.grad_kappaF(a).grad_wrt_a
        ref = _fd(_kappaF, a)
        assert np.linalg.norm(g - ref) <= 1e-5 * np.linalg.norm(ref)


@pytest.mark.parametrize("shape", [(3, 3), (2, 4), (4, 2)])
def test_pinv_differential_fd(shape, rng):
    a = rng.standard_normal(shape)
    da = rng.standard_normal(shape)
    h = 1e-6
    ref = (np.linalg.pinv(a + h * da) - np.linalg.pinv(a - h * da)) / (2 * h)
    assert np.allclose(condgrad.pinv_differential(a, da), ref, atol=1e-6)
    with pytest.raises(InvalidInput):
        condgrad.pinv_differential(a, np.ones((7, 7)))


def test_singular_and_degenerate():
    with pytest.raises(SingularInput):
        condgrad.grad_kappa2(np.diag([1.0, 0.0]))
    with pytest.raises(SingularInput):
        condgrad.grad_kappaF(np.zeros((2, 2)))
    with pytest.raises(DegenerateSpectrum):
        condgrad.grad_kappa2(np.diag([2.0, 1.0, 1.0]))
    rep = condgrad.fd_grad_kappa2(np.diag([2.0, 1.0, 1.0]))
    assert rep.method == condgrad.FINITE_DIFFERENCE and np.isfinite(rep.grad_wrt_a).all()


def test_log_stack_matches_closed_form(rng):
    a = rng.standard_normal((4, 3, 5))
    u, s, vt = densela.svd_stack(a)
    g, simple = condgrad.grad_log_kappa2_stack(u, s, vt)
    assert simple.all()
    for i in range(4):
        rep = condgrad.grad_kappa2(a[i])
        assert np.allclose(g[i], rep.grad_wrt_a / rep.kappa)


def test_log_kappa_wrt_input_fd(rng):
    net = diffgraph.init_network(6, (8,), 3, 4, "tanh", seed=3)
    u = rng.standard_normal(6)

    def f(x):
        return np.log(_kappa2(diffgraph.forward(net, x, need_qp=False).a[0]))

    g = condgrad.grad_log_kappa2_wrt_input(net, u)
    ref = _fd(f, u)
    assert np.linalg.norm(g - ref) <= 1e-3 * np.linalg.norm(ref)
