"""Equality-constrained QP layer and a lower-bounded QP solver.

The layer solves ``min 1/2 z^T Q z + q^T z  s.t.  A z = b`` through its KKT
system ``[[Q, A^T], [A, 0]] [z; nu] = [-q; b]``. A numerically singular KKT
matrix is not an exception here: it is reported through ``status`` so that
training and attack loops can observe the failure.
"""

from dataclasses import dataclass, field

import numba
import numpy as np
from numpy.typing import NDArray

from . import densela
from .config import MACHINE_EPS, TAU_SING
from .errors import InvalidInput, NonFiniteForward, NotConverged, SingularSystem

SOLVED = "solved"
SINGULAR_KKT = "singular_kkt"


@dataclass(frozen=True)
class QpProblem:
    q_mat: NDArray
    q_vec: NDArray
    a: NDArray
    b: NDArray

    def __post_init__(self):
        q_mat = np.asarray(self.q_mat, dtype=np.float64)
        a = np.asarray(self.a, dtype=np.float64)
        q_vec = np.asarray(self.q_vec, dtype=np.float64).reshape(-1)
        b = np.asarray(self.b, dtype=np.float64).reshape(-1)
        n = q_vec.shape[0]
        if q_mat.shape != (n, n):
            raise InvalidInput(f"Q must be {n}x{n}, got {q_mat.shape}")
        if a.ndim != 2 or a.shape[1] != n or a.shape[0] != b.shape[0]:
            raise InvalidInput(f"A {a.shape} / b {b.shape} not conformable with n={n}")
        object.__setattr__(self, "q_mat", q_mat)
        object.__setattr__(self, "q_vec", q_vec)
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "b", b)

    @property
    def n(self):
        return self.q_vec.shape[0]

    @property
    def m(self):
        return self.b.shape[0]

    def check_psd(self, tol=1e-10):
        """Raise InvalidInput unless Q is symmetric PSD within tolerance."""
        if not np.allclose(self.q_mat, self.q_mat.T, rtol=0.0, atol=1e-12):
            raise InvalidInput("Q is not symmetric")
        if np.linalg.eigvalsh(self.q_mat)[0] < -tol:
            raise InvalidInput("Q is not positive semidefinite")

    def objective(self, z):
        z = np.asarray(z, dtype=np.float64)
        return float(0.5 * z @ self.q_mat @ z + self.q_vec @ z)

    def to_json(self):
        return {"Q": densela.matrix_to_json(self.q_mat),
                "q": [float(x) for x in self.q_vec],
                "A": densela.matrix_to_json(self.a),
                "b": [float(x) for x in self.b]}

    @classmethod
    def from_json(cls, obj):
        return cls(densela.matrix_from_json(obj["Q"]), np.asarray(obj["q"], float),
                   densela.matrix_from_json(obj["A"]), np.asarray(obj["b"], float))


@dataclass(frozen=True)
class QpSolution:
    z: NDArray
    nu: NDArray
    kkt_residual: float
    status: str
    sigma_bounds: tuple | None = field(default=None, repr=False)

    @property
    def ok(self):
        return self.status == SOLVED


@dataclass(frozen=True)
class QpGrads:
    d_q_mat: NDArray
    d_q_vec: NDArray
    d_a: NDArray
    d_b: NDArray


def kkt_matrix(p: QpProblem) -> NDArray:
    n, m = p.n, p.m
    k = np.zeros((n + m, n + m))
    k[:n, :n] = p.q_mat
    k[:n, n:] = p.a.T
    k[n:, :n] = p.a
    return k


def kkt_sigma_bounds(q_eig_min, q_eig_max, a_sigma):
    """Rigorous bounds on the extreme singular values of the KKT matrix.

    Uses the Rusten-Winther eigenvalue inclusion for symmetric saddle-point
    matrices with ``Q`` positive definite and ``A`` of full row rank. Returns
    ``None`` when those hypotheses are not met, in which case the caller must
    fall back to a direct check.
    """
    a_sigma = np.asarray(a_sigma, dtype=np.float64)
    if q_eig_min <= 0.0 or a_sigma.size == 0:
        return None
    s1 = float(a_sigma[0])
    # absolute Jacobi error on the smallest singular value
    slack = 4.0 * MACHINE_EPS * s1 * a_sigma.size
    sm = float(a_sigma[-1]) - slack
    if sm <= 0.0:
        return None
    mu_lo = q_eig_min * (1.0 - 1e-12)
    mu_hi = q_eig_max * (1.0 + 1e-12)
    neg_gap = 2.0 * sm * sm / (np.sqrt(mu_hi * mu_hi + 4.0 * sm * sm) + mu_hi)
    lower = min(mu_lo, neg_gap)
    upper = 0.5 * (mu_hi + np.sqrt(mu_hi * mu_hi + 4.0 * (s1 + slack) ** 2))
    return lower, upper


def solve_eq_qp(p: QpProblem, tau_sing=TAU_SING, q_eigs=None, a_sigma=None) -> QpSolution:
    """Solve the equality-constrained QP through its KKT system.

    ``q_eigs`` (min, max eigenvalue of Q) and ``a_sigma`` (singular values of
    A) may be supplied when already known; they only feed the cheap
    well-conditioning certificate and never change the returned solution.
    """
    n, m = p.n, p.m
    k = kkt_matrix(p)
    rhs = np.concatenate([-p.q_vec, p.b])
    bounds = None
    if m <= n:
        if q_eigs is None:
            ev = np.linalg.eigvalsh(p.q_mat)
            q_eigs = (ev[0], ev[-1])
        if a_sigma is None:
            a_sigma = densela.singular_values(p.a)
        bounds = kkt_sigma_bounds(q_eigs[0], q_eigs[1], a_sigma)
    try:
        sol = densela.solve_linear(k, rhs, tau_sing=tau_sing, sigma_bounds=bounds)
    except SingularSystem:
        nan_z = np.full(n, np.nan)
        return QpSolution(nan_z, np.full(m, np.nan), float("inf"), SINGULAR_KKT)
    z, nu = sol[:n], sol[n:]
    res = float(np.linalg.norm(k @ sol - rhs))
    return QpSolution(z, nu, res, SOLVED, bounds)


def backward_eq_qp(p: QpProblem, sol: QpSolution, grad_z, tau_sing=TAU_SING) -> QpGrads:
    """Implicit differentiation of the KKT conditions.

    Solves ``K [d_z; d_nu] = -[grad_z; 0]`` (K is symmetric) and returns
    ``dQ = (d_z z^T + z d_z^T)/2``, ``dq = d_z``, ``dA = d_nu z^T + nu d_z^T``,
    ``db = -d_nu``.
    """
    if sol.status != SOLVED:
        raise NonFiniteForward("QP backward requested after a singular KKT forward")
    grad_z = np.asarray(grad_z, dtype=np.float64).reshape(-1)
    n, m = p.n, p.m
    rhs = np.concatenate([-grad_z, np.zeros(m)])
    try:
        d = densela.solve_linear(kkt_matrix(p), rhs, tau_sing=tau_sing,
                                 sigma_bounds=sol.sigma_bounds)
    except SingularSystem as exc:
        raise NonFiniteForward("KKT matrix became singular in backward") from exc
    dz, dnu = d[:n], d[n:]
    z, nu = sol.z, sol.nu
    return QpGrads(
        d_q_mat=0.5 * (np.outer(dz, z) + np.outer(z, dz)),
        d_q_vec=dz,
        d_a=np.outer(dnu, z) + np.outer(nu, dz),
        d_b=-dnu,
    )


def kkt_sigma_bounds_stack(q_eig_min, q_eig_max, a_sigma):
    """Vectorised :func:`kkt_sigma_bounds` over a ``(k, r)`` stack of spectra.

    Entries whose hypotheses fail get ``lower = 0``, which never certifies.
    """
    a_sigma = np.asarray(a_sigma, dtype=np.float64)
    s1 = a_sigma[:, 0]
    slack = 4.0 * MACHINE_EPS * s1 * a_sigma.shape[1]
    sm = a_sigma[:, -1] - slack
    mu_lo = q_eig_min * (1.0 - 1e-12)
    mu_hi = q_eig_max * (1.0 + 1e-12)
    sm_pos = np.maximum(sm, 0.0)
    neg_gap = 2.0 * sm_pos ** 2 / (np.sqrt(mu_hi ** 2 + 4.0 * sm_pos ** 2) + mu_hi)
    lower = np.where((sm > 0.0) & (q_eig_min > 0.0), np.minimum(mu_lo, neg_gap), 0.0)
    upper = 0.5 * (mu_hi + np.sqrt(mu_hi ** 2 + 4.0 * (s1 + slack) ** 2))
    return lower, upper


def kkt_stack(q_mat, a):
    k, m, n = a.shape
    kk = np.zeros((k, n + m, n + m))
    kk[:, :n, :n] = q_mat
    kk[:, :n, n:] = a.swapaxes(1, 2)
    kk[:, n:, :n] = a
    return kk


def solve_eq_qp_stack(q_mat, q_vec, a, b, a_sigma=None, tau_sing=TAU_SING):
    """Solve ``k`` QPs sharing ``Q`` and ``q`` but with their own ``A`` and ``b``.

    Each item follows the contract of :func:`solve_eq_qp`: a numerically
    singular KKT matrix yields NaN outputs and ``ok[i] = False``. Items whose
    regularity is certified by :func:`kkt_sigma_bounds_stack` go through one
    batched LU call; the rest take the SVD-checked path one at a time.

    Returns
    -------
    z : (k, n) array
    nu : (k, m) array
    ok : (k,) bool array
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    k, m, n = a.shape
    z = np.full((k, n), np.nan)
    nu = np.full((k, m), np.nan)
    ok = np.zeros(k, dtype=bool)
    finite = np.isfinite(a).all(axis=(1, 2)) & np.isfinite(b).all(axis=1)
    if not finite.any():
        return z, nu, ok
    kkt = kkt_stack(q_mat, np.where(finite[:, None, None], a, 0.0))
    rhs = np.concatenate([np.broadcast_to(-q_vec, (k, n)), np.where(finite[:, None], b, 0.0)],
                         axis=1)
    fast = np.zeros(k, dtype=bool)
    if m <= n:
        if a_sigma is None:
            a_sigma = np.zeros((k, min(m, n)))
            a_sigma[finite] = densela.singular_values(a[finite])
        ev = np.linalg.eigvalsh(q_mat)
        lo, hi = kkt_sigma_bounds_stack(ev[0], ev[-1], a_sigma)
        fast = finite & (lo > 2.0 * tau_sing * hi)
    if fast.any():
        sol = np.linalg.solve(kkt[fast], rhs[fast][..., None])[..., 0]
        good = np.isfinite(sol).all(axis=1)
        idx = np.flatnonzero(fast)
        z[idx[good]] = sol[good, :n]
        nu[idx[good]] = sol[good, n:]
        ok[idx[good]] = True
    for i in np.flatnonzero(finite & ~fast):
        try:
            sol = densela.solve_linear(kkt[i], rhs[i], tau_sing=tau_sing)
        except SingularSystem:
            continue
        z[i], nu[i], ok[i] = sol[:n], sol[n:], True
    return z, nu, ok


def backward_eq_qp_stack(q_mat, a, z, nu, grad_z):
    """Batched :func:`backward_eq_qp` returning only ``(dA, db)``.

    Every item must come from a successful forward solve.
    """
    k, m, n = a.shape
    rhs = np.concatenate([-grad_z, np.zeros((k, m))], axis=1)
    d = np.linalg.solve(kkt_stack(q_mat, a), rhs[..., None])[..., 0]
    dz, dnu = d[:, :n], d[:, n:]
    d_a = dnu[:, :, None] * z[:, None, :] + nu[:, :, None] * dz[:, None, :]
    return d_a, -dnu


# ---------------------------------------------------------------------------
# Lower-bounded QP: min 1/2 z^T H z + c^T z  s.t.  z >= lower
# ---------------------------------------------------------------------------

@numba.njit(cache=True)
def _pgd_kernel(h, c, lower, z0, step, tol, max_iter, accelerate):
    n = c.shape[0]
    z = np.maximum(z0, lower)
    y = z.copy()
    t = 1.0
    best = z.copy()
    best_res = np.inf
    for it in range(max_iter):
        g = h @ z + c
        # projected-gradient optimality residual at the current iterate
        res = 0.0
        for i in range(n):
            r = z[i] - max(z[i] - g[i], lower[i])
            res += r * r
        res = np.sqrt(res)
        if res < best_res:
            best_res = res
            best[:] = z
        if res <= tol:
            return z, res, it, True
        if accelerate:
            gy = h @ y + c
            z_new = np.maximum(y - step * gy, lower)
            # gradient restart: drop momentum when it points uphill
            if np.dot(gy, z_new - z) > 0.0:
                t = 1.0
                z_new = np.maximum(z - step * g, lower)
            t_new = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * t * t))
            y = z_new + ((t - 1.0) / t_new) * (z_new - z)
            t = t_new
            z = z_new
        else:
            z = np.maximum(z - step * g, lower)
    return best, best_res, max_iter, False


def solve_lower_bounded_qp(h, c, lower, tol=1e-6, max_iter=100_000, z0=None,
                           accelerate=True):
    """Projected gradient for ``min 1/2 z^T H z + c^T z`` subject to ``z >= lower``.

    The step is ``1/L`` with ``L`` the spectral norm of ``H`` from power
    iteration; the projection clamps each coordinate at its bound (``-inf``
    means unbounded). Iteration stops when the projected-gradient residual
    ``||z - max(z - grad, lower)||`` drops to ``tol``.

    Raises
    ------
    NotConverged
        If the budget runs out first; ``exc.best`` holds the best iterate.
    """
    h = densela.as_matrix(h, "h")
    c = np.asarray(c, dtype=np.float64).reshape(-1)
    lower = np.asarray(lower, dtype=np.float64).reshape(-1)
    n = c.shape[0]
    if h.shape != (n, n) or lower.shape[0] != n:
        raise InvalidInput("h, c, lower are not conformable")
    if not np.isfinite(c).all() or np.isnan(lower).any() or np.isposinf(lower).any():
        raise InvalidInput("c must be finite and lower must be finite or -inf")
    if np.abs(h - h.T).max() > 1e-10 * max(1.0, np.abs(h).max()):
        raise InvalidInput("h must be symmetric")
    lip = densela.power_norm2(h) * (1.0 + 1e-6)
    if lip == 0.0:
        lip = 1.0
    start = np.zeros(n) if z0 is None else np.asarray(z0, dtype=np.float64)
    start = np.where(np.isfinite(lower), np.maximum(start, lower), start)
    z, res, iters, ok = _pgd_kernel(h, c, lower, start, 1.0 / lip, tol, int(max_iter),
                                    bool(accelerate))
    if not ok:
        raise NotConverged(f"projected gradient did not reach {tol:g} in {max_iter} "
                           f"iterations (residual {res:.3e})", best=z, residual=res)
    return z


# ---------------------------------------------------------------------------
# Large-objective construction with A untouched
# ---------------------------------------------------------------------------

def lemma2_shift(a, b, grad_at_opt, k):
    """Return ``b' = b + k A grad_at_opt``.

    ``A y = b'`` is the old feasible set translated by ``k grad_at_opt``. For
    convex ``f`` with constrained minimiser ``x0`` this gives
    ``min f >= f(x0) + k ||grad f(x0)||^2``, so the optimal value grows
    without bound while ``A`` (and its conditioning) is left untouched.
    """
    if k < 0:
        raise InvalidInput("k must be non-negative")
    a = densela.as_matrix(a)
    return np.asarray(b, dtype=np.float64) + k * (a @ np.asarray(grad_at_opt, dtype=np.float64))
