import numpy as np
import pytest

from optguard import diffgraph, farkas
from optguard.errors import InvalidInput
from optguard.farkas import FarkasInstance


def _inst(a, b, **kw):
    return FarkasInstance(np.asarray(a, float), np.asarray(b, float), **kw)


def test_verify_examples():
    cert = farkas.verify_infeasible([[1.0, 0.0], [-1.0, 0.0]], [1.0, -2.0], [1.0, 1.0])
    assert cert.valid and cert.value_bty == pytest.approx(-1.0)
    cert = farkas.verify_infeasible(np.eye(2), [1.0, 1.0], [0.0, 0.0])
    assert not cert.valid
    cert = farkas.verify_infeasible(np.eye(2), [1.0, 1.0], [np.nan, 0.0])
    assert not cert.valid
    with pytest.raises(InvalidInput):
        farkas.verify_infeasible(np.eye(2), [1.0, 1.0], [1.0])


def test_grid_cross_check():
    assert farkas.grid_feasible_count([[1.0, 0.0], [-1.0, 0.0]], [1.0, -2.0]) == 0
    assert farkas.grid_feasible_count(np.eye(2), [1.0, 1.0]) > 0


def test_instance_validation():
    with pytest.raises(InvalidInput):
        _inst(np.eye(2), [1.0])
    with pytest.raises(InvalidInput):
        _inst(np.eye(2), [1.0, 1.0], gamma=1.0)
    with pytest.raises(InvalidInput):
        _inst(np.eye(2), [1.0, 1.0], nu_margin=0.0)


def test_prereq_examples(rng):
    # K = [A^T; b^T] full row rank when A is 3x2 generic
    a = rng.standard_normal((3, 2))
    inst = _inst(a, rng.standard_normal(3))
    assert farkas.prereq_loss(inst) <= 1e-9
    inst = _inst(np.zeros((2, 2)), [0.0, 0.0])
    assert farkas.prereq_loss(inst) == pytest.approx(1.0)


def test_prereq_least_squares_oracle(rng):
    for _ in range(5):
        a = rng.standard_normal((3, 1)) @ rng.standard_normal((1, 2))
        b = rng.standard_normal(3)
        inst = _inst(a, b)
        k, q = inst.k_mat, inst.q_rhs
        # normal equations on the row space of K
        u, s, vt = np.linalg.svd(k, full_matrices=False)
        r = s > 1e-12 * s[0]
        basis = vt[r].T
        coef = np.linalg.solve(basis.T @ k.T @ k @ basis, basis.T @ k.T @ q)
        resid = np.linalg.norm(k @ basis @ coef - q)
        assert farkas.prereq_loss(inst) == pytest.approx(resid, abs=1e-8)


def test_prereq_grad_fd(rng):
    k = rng.standard_normal((3, 2))
    q = np.array([0.0, 0.0, -1.0])
    loss, g = farkas.prereq_grad(k, q)
    h = 1e-6
    ref = np.zeros_like(k)
    for idx in np.ndindex(k.shape):
        e = np.zeros_like(k)
        e[idx] = h
        ref[idx] = (farkas.prereq_grad(k + e, q)[0] - farkas.prereq_grad(k - e, q)[0]) / (2 * h)
    assert np.allclose(g, ref, atol=1e-7)


def test_optdist_examples():
    # infeasible system with a known certificate y = (1, 1)
    od = farkas.optdist(_inst([[1.0, 0.0], [-1.0, 0.0]], [1.0, -2.0]))
    assert od.value <= 1e-6
    od = farkas.optdist(_inst(np.eye(2), [1.0, 1.0]))
    assert od.value > 0.1


def test_btb_zero_eigenvalue_and_regularisation(rng):
    for _ in range(20):
        k = rng.standard_normal((3, 2))
        bmat, hess, _ = farkas.optdist_matrices(k, 0.0)
        ev = np.linalg.eigvalsh(bmat.T @ bmat)
        assert ev[0] <= 1e-8 * ev[-1]
        for eta in (1e-8, 1e-6):
            np.linalg.cholesky(farkas.optdist_matrices(k, eta)[1])


def test_optdist_grad_fd(rng):
    # value function V(K) = min_{y >= nu, v} ||y - K+ q + (K+ K - I) v||^2
    k = rng.standard_normal((3, 2))
    q = np.array([0.0, 0.0, -1.0])

    def value(kk):
        a, b = kk[:2].T, kk[2]
        return farkas.optdist(FarkasInstance(a, b, eta_reg=0.0), tol=1e-12).value

    a, b = k[:2].T, k[2]
    od = farkas.optdist(FarkasInstance(a, b, eta_reg=0.0), tol=1e-12)
    g = farkas.optdist_grad(k, q, od.y_star, od.v_star)
    h = 1e-6
    ref = np.zeros_like(k)
    for idx in np.ndindex(k.shape):
        e = np.zeros_like(k)
        e[idx] = h
        ref[idx] = (value(k + e) - value(k - e)) / (2 * h)
    assert np.allclose(g, ref, atol=1e-5)


def test_zero_lr_no_change():
    net = farkas.init_farkas_network(seed=0)
    u0 = np.random.default_rng(0).standard_normal(net.input_dim)
    inst = _inst(np.zeros((2, 2)), net.b_fixed)
    out = farkas.run_farkas_attack(net, u0, inst, lr=0.0, epochs=10)
    assert not out.result.success and np.array_equal(out.result.u_star, u0)
    with pytest.raises(InvalidInput):
        farkas.run_farkas_attack(net, u0, inst, lr=-1.0)
    with pytest.raises(InvalidInput):
        farkas.run_farkas_attack(net, u0, _inst(np.zeros((2, 2)), [1.0, 1.0]))


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_attack_success_is_sound(seed):
    net = farkas.init_farkas_network(seed=seed)
    u0 = np.random.default_rng(seed).standard_normal(net.input_dim)
    inst = _inst(np.zeros((2, 2)), net.b_fixed)
    out = farkas.run_farkas_attack(net, u0, inst)
    theta, _ = diffgraph.mlp_forward(net.layers, u0[None])
    a0 = theta[0, :4].reshape(2, 2)
    # the start system is feasible: x = A^-1 b satisfies it with equality
    x0 = np.linalg.solve(a0, out.b_ineq)
    assert np.all(a0 @ x0 <= out.b_ineq + 1e-9)
    if out.result.success:
        cert = farkas.verify_infeasible(out.a_final, out.b_ineq, out.certificate.y)
        assert cert.valid
        assert farkas.grid_feasible_count(out.a_final, out.b_ineq) == 0
    # steps are accepted only on decrease, except a final certifying step
    loss = [v for _, v in out.loss_history][:-1]
    assert all(b <= a for a, b in zip(loss, loss[1:]))
    d = out.to_dict()
    assert d["certificate"]["valid"] == out.certificate.valid
