import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from optguard import densela
from optguard.errors import InvalidInput, SingularSystem


def _eig_oracle(a):
    # singular values from the symmetric eigenproblem of the smaller Gram matrix
    g = a.T @ a if a.shape[0] >= a.shape[1] else a @ a.T
    ev = np.linalg.eigvalsh(g)[::-1]
    return np.sqrt(np.clip(ev, 0.0, None))


def test_svd_identity():
    f = densela.svd(np.eye(3))
    assert np.allclose(f.u, np.eye(3))
    assert np.allclose(f.vt, np.eye(3))
    assert np.allclose(f.sigma, 1.0)


def test_svd_diag():
    assert np.allclose(densela.svd(np.diag([3.0, -1.0])).sigma, [3.0, 1.0])


@pytest.mark.parametrize("shape", [(5, 7), (7, 5), (1, 4), (6, 6)])
def test_svd_random_against_eig_oracle(shape, rng):
    a = rng.standard_normal(shape)
    f = densela.svd(a)
    assert np.linalg.norm(f.reconstruct() - a) <= 1e-10 * max(1.0, np.linalg.norm(a))
    assert np.allclose(f.u.T @ f.u, np.eye(f.sigma.size), atol=1e-12)
    assert np.allclose(f.vt @ f.vt.T, np.eye(f.sigma.size), atol=1e-12)
    assert np.allclose(f.sigma, _eig_oracle(a), atol=1e-8)


def test_svd_sign_convention(rng):
    f = densela.svd(rng.standard_normal((4, 3)))
    for j in range(3):
        col = f.u[:, j]
        first = col[np.abs(col) > 1e-12][0]
        assert first > 0


def test_svd_rejects_nonfinite():
    with pytest.raises(InvalidInput):
        densela.svd(np.array([[1.0, np.nan], [0.0, 1.0]]))


def test_svd_deterministic(rng):
    a = rng.standard_normal((5, 4))
    f1, f2 = densela.svd(a), densela.svd(a.copy())
    assert np.array_equal(f1.u, f2.u) and np.array_equal(f1.sigma, f2.sigma)


@given(arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(1, 6)),
              elements=st.floats(-1e3, 1e3)))
def test_svd_invariants_property(a):
    f = densela.svd(a)
    assert np.all(f.sigma >= 0)
    assert np.all(np.diff(f.sigma) <= 1e-12 * max(1.0, f.sigma[0]))
    assert np.linalg.norm(f.reconstruct() - a) <= 1e-10 * max(1.0, np.linalg.norm(a))


def test_svd_stack_matches_single(rng):
    a = rng.standard_normal((4, 3, 5))
    u, s, vt = densela.svd_stack(a)
    for i in range(4):
        f = densela.svd(a[i])
        assert np.allclose(s[i], f.sigma)
        assert np.allclose((u[i] * s[i]) @ vt[i], a[i])
    assert np.allclose(densela.singular_values(a), s)


def test_pseudoinverse_basic():
    assert np.allclose(densela.pseudoinverse(np.diag([2.0, 4.0])), np.diag([0.5, 0.25]))
    z = densela.pseudoinverse(np.zeros((3, 2)))
    assert z.shape == (2, 3) and not z.any()


def test_pseudoinverse_moore_penrose(rng):
    a = rng.standard_normal((4, 6))
    x = densela.pseudoinverse(a)
    assert np.abs(a @ x @ a - a).max() <= 1e-8
    assert np.abs(x @ a @ x - x).max() <= 1e-8
    assert np.abs((a @ x).T - a @ x).max() <= 1e-8
    assert np.abs((x @ a).T - x @ a).max() <= 1e-8


def test_pseudoinverse_rank_deficient(rng):
    a = rng.standard_normal((5, 2)) @ rng.standard_normal((2, 4))
    assert np.allclose(densela.pseudoinverse(a), np.linalg.pinv(a), atol=1e-10)


def test_condition_number_cases():
    assert densela.condition_number(np.eye(4)).kappa2 == 1.0
    v = densela.condition_number(np.diag([1.0, 1e-12]))
    assert v.is_numerically_singular and v.kappa2 == np.inf
    v = densela.condition_number(np.zeros((2, 2)))
    assert v.is_numerically_singular
    v = densela.condition_number(np.diag([4.0, 2.0]), norm="frobenius")
    assert v.kappa2 == pytest.approx(2.0)
    assert v.kappa_frobenius == pytest.approx(np.sqrt(20.0) * np.sqrt(0.25 + 1 / 16))
    with pytest.raises(InvalidInput):
        densela.condition_number(np.eye(2), norm="one")


@given(st.floats(1e-14, 1.0))
def test_verdict_threshold_property(small):
    v = densela.condition_number(np.diag([1.0, small]))
    assert v.is_numerically_singular == (v.sigma_min <= 1e-10 * v.sigma_max)


def test_distance_to_singularity(rng):
    a = rng.standard_normal((4, 4))
    d = densela.distance_to_singularity(a)
    assert d == pytest.approx(_eig_oracle(a)[-1], rel=1e-8)


def test_solve_linear(rng):
    a = rng.standard_normal((5, 5)) + 5 * np.eye(5)
    b = rng.standard_normal(5)
    assert np.allclose(densela.solve_linear(a, b), np.linalg.solve(a, b))
    bb = rng.standard_normal((5, 2))
    assert np.allclose(densela.solve_linear(a, bb), np.linalg.solve(a, bb))


@pytest.mark.parametrize("a", [np.zeros((3, 3)), np.diag([1.0, 1.0, 0.0]),
                               np.diag([1.0, 1e-13]), np.ones((2, 2))])
def test_solve_linear_fails_loud(a):
    with pytest.raises(SingularSystem):
        densela.solve_linear(a, np.ones(a.shape[0]))


def test_solve_linear_shape_errors():
    with pytest.raises(InvalidInput):
        densela.solve_linear(np.ones((2, 3)), np.ones(2))
    with pytest.raises(InvalidInput):
        densela.solve_linear(np.eye(2), np.ones(3))


def test_power_norm2(rng):
    a = rng.standard_normal((6, 4))
    assert densela.power_norm2(a) == pytest.approx(densela.svd(a).sigma[0], rel=1e-6)
    assert densela.power_norm2(np.zeros((2, 2))) == 0.0


def test_serialisation_roundtrip(rng):
    a = rng.standard_normal((3, 2))
    assert np.array_equal(densela.matrix_from_json(densela.matrix_to_json(a)), a)
    assert np.array_equal(densela.matrix_from_csv(densela.matrix_to_csv(a)), a)
    with pytest.raises(InvalidInput):
        densela.matrix_from_json({"rows": 2, "cols": 2, "entries": [1.0]})
    with pytest.raises(InvalidInput):
        densela.matrix_from_csv("1,2\n3\n")
