"""Attack that turns a feasible inequality system ``A x <= b`` infeasible.

Farkas: ``A x <= b`` has no solution iff some ``y >= 0`` has ``A^T y = 0``
and ``b^T y < 0``. Scaling ``b^T y`` to ``-1`` gives the linear system
``K y = q`` with ``K = [A^T; b^T]`` and ``q = [0; -1]``. The attack drives two
quantities to zero:

* ``L_prereq = ||K K+ q - q||``, which vanishes iff ``K y = q`` is solvable;
* ``Optdist``, the squared distance between the affine solution set of
  ``K y = q`` and the shifted orthant ``y >= nu``.
"""

import json
from dataclasses import dataclass

import numpy as np
from numpy.typing import NDArray

from . import densela, diffgraph, qplayer
from .attack import AttackResult
from .errors import InvalidInput, NotConverged

EQ_TOL = 1e-6
NEG_MARGIN = 1e-8
NONNEG_TOL = -1e-9


@dataclass(frozen=True)
class FarkasInstance:
    a_ineq: NDArray
    b_ineq: NDArray
    nu_margin: float = 1e-3
    gamma: float = 0.9
    eta_reg: float = 1e-6

    def __post_init__(self):
        a = densela.as_matrix(self.a_ineq, "a_ineq")
        b = np.asarray(self.b_ineq, dtype=np.float64).reshape(-1)
        if b.shape[0] != a.shape[0] or not np.isfinite(b).all():
            raise InvalidInput("b_ineq must be finite with one entry per row of a_ineq")
        if not self.nu_margin > 0:
            raise InvalidInput("nu_margin must be positive")
        if not 0.0 < self.gamma < 1.0:
            raise InvalidInput("gamma must lie in (0, 1)")
        if not self.eta_reg >= 0:
            raise InvalidInput("eta_reg must be non-negative")
        object.__setattr__(self, "a_ineq", a)
        object.__setattr__(self, "b_ineq", b)

    @property
    def k_mat(self):
        return np.vstack([self.a_ineq.T, self.b_ineq[None, :]])

    @property
    def q_rhs(self):
        q = np.zeros(self.a_ineq.shape[1] + 1)
        q[-1] = -1.0
        return q

    def with_matrix(self, a):
        return FarkasInstance(a, self.b_ineq, self.nu_margin, self.gamma, self.eta_reg)


@dataclass(frozen=True)
class FarkasCertificate:
    y: NDArray
    residual_eq: float
    value_bty: float
    min_y: float

    @property
    def valid(self):
        return (self.residual_eq <= EQ_TOL and self.value_bty < -NEG_MARGIN
                and self.min_y >= NONNEG_TOL)

    def to_dict(self):
        return {"y": [float(v) for v in self.y], "residual_eq": self.residual_eq,
                "value_bty": self.value_bty, "min_y": self.min_y, "valid": self.valid}


def verify_infeasible(a_ineq, b_ineq, y) -> FarkasCertificate:
    """Evaluate the three Farkas conditions for a candidate ``y``."""
    a = densela.as_matrix(a_ineq, "a_ineq")
    b = np.asarray(b_ineq, dtype=np.float64).reshape(-1)
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    if y.shape[0] != a.shape[0] or b.shape[0] != a.shape[0]:
        raise InvalidInput("y and b_ineq need one entry per row of a_ineq")
    if not np.isfinite(y).all():
        return FarkasCertificate(y, float("inf"), float("nan"), float("nan"))
    return FarkasCertificate(y, float(np.linalg.norm(a.T @ y)), float(b @ y), float(y.min()))


def grid_feasible_count(a_ineq, b_ineq, half_width=10.0, points=201):
    """Number of points of a regular grid on ``[-w, w]^n`` satisfying ``A x <= b``.

    A cheap, LP-free cross-check for two-variable systems.
    """
    a = densela.as_matrix(a_ineq, "a_ineq")
    b = np.asarray(b_ineq, dtype=np.float64)
    axes = [np.linspace(-half_width, half_width, points)] * a.shape[1]
    grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, a.shape[1])
    return int(np.sum(np.all(grid @ a.T <= b, axis=1)))


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------

def prereq_loss(inst: FarkasInstance) -> float:
    """``||K K+ q - q||``: zero iff ``K y = q`` has a solution."""
    k = inst.k_mat
    q = inst.q_rhs
    return float(np.linalg.norm(k @ (densela.pseudoinverse(k) @ q) - q))


def prereq_grad(k, q):
    """``(L_prereq, dL/dK)`` with ``dL/dK = r (K+ q)^T / ||r||`` and ``r = K K+ q - q``."""
    kp = densela.pseudoinverse(k)
    kpq = kp @ q
    r = k @ kpq - q
    loss = float(np.linalg.norm(r))
    if loss == 0.0:
        return 0.0, np.zeros_like(k)
    return loss, np.outer(r, kpq) / loss


@dataclass(frozen=True)
class OptdistResult:
    value: float
    z_star: NDArray
    y_star: NDArray
    v_star: NDArray


def optdist_matrices(k, eta=0.0):
    """``B = [I, K+K - I]`` and the regularised Hessian ``2 (B^T B + Q_eta)``.

    ``Q_eta`` puts ``eta`` on the ``v`` block only.
    """
    m = k.shape[1]
    kp = densela.pseudoinverse(k)
    bmat = np.hstack([np.eye(m), kp @ k - np.eye(m)])
    q_eta = np.zeros((2 * m, 2 * m))
    q_eta[m:, m:] = eta * np.eye(m)
    return bmat, 2.0 * (bmat.T @ bmat + q_eta), kp


def optdist(inst: FarkasInstance, z0=None, max_iter=100_000, tol=1e-6) -> OptdistResult:
    """Squared distance from ``{K+ q + (I - K+ K) v}`` to ``{y >= nu}``.

    Solved in ``z = [y - K+ q; v]`` as ``min z^T (B^T B + Q_eta) z`` with
    ``z_{1..m} >= nu - K+ q``. The reported value is ``||B z*||^2``.

    Raises
    ------
    NotConverged
        Propagated from the lower-bounded QP solver.
    """
    k, q = inst.k_mat, inst.q_rhs
    m = k.shape[1]
    bmat, hess, kp = optdist_matrices(k, inst.eta_reg)
    kpq = kp @ q
    lower = np.concatenate([inst.nu_margin - kpq, np.full(m, -np.inf)])
    z = qplayer.solve_lower_bounded_qp(hess, np.zeros(2 * m), lower, tol=tol,
                                       max_iter=max_iter, z0=z0)
    bz = bmat @ z
    return OptdistResult(float(bz @ bz), z, z[:m] + kpq, z[m:])


def optdist_grad(k, q, y, v):
    """Envelope gradient of the Optdist value w.r.t. ``K`` at the minimiser ``(y, v)``.

    The feasible set ``y >= nu`` does not depend on ``K`` in the original
    variables, so with ``w = 2 (y - K+ q + (K+ K - I) v)`` and ``p = K v - q``:

        dV/dK = -K+^T w (K+ p)^T + K+^T K+ p w^T (I - K+ K)
                + (I - K K+) p w^T K+ K+^T + K+^T w v^T.
    """
    kp = densela.pseudoinverse(k)
    m = k.shape[1]
    w = 2.0 * (y - kp @ q + (kp @ k - np.eye(m)) @ v)
    p = k @ v - q
    return (-np.outer(kp.T @ w, kp @ p)
            + np.outer(kp.T @ (kp @ p), w @ (np.eye(m) - kp @ k))
            + np.outer((np.eye(k.shape[0]) - k @ kp) @ p, w @ kp @ kp.T)
            + np.outer(kp.T @ w, v))


# ---------------------------------------------------------------------------
# Attack
# ---------------------------------------------------------------------------

@dataclass
class FarkasAttackOutcome:
    result: AttackResult
    certificate: FarkasCertificate
    a_final: NDArray
    b_ineq: NDArray
    loss_history: list

    def to_dict(self):
        return {"attack": self.result.to_dict(), "certificate": self.certificate.to_dict(),
                "A": densela.matrix_to_json(self.a_final),
                "b": [float(x) for x in self.b_ineq]}

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2)


def init_farkas_network(input_dim=16, hidden=(32,), m=2, n=2, b_ineq=(-1.0, -1.0), seed=0):
    """tanh network whose output is reshaped into the ``m x n`` inequality matrix."""
    return diffgraph.init_network(input_dim, hidden, m, n, "tanh", seed=seed, learn_b=False,
                                  b_fixed=np.asarray(b_ineq, dtype=np.float64))


def _evaluate(net, u, inst, z0):
    theta, cache = diffgraph.mlp_forward(net.layers, u[None])
    a = theta[0, :net.m * net.n].reshape(net.m, net.n)
    cur = inst.with_matrix(a)
    k, q = cur.k_mat, cur.q_rhs
    lp, g_prereq = prereq_grad(k, q)
    try:
        od = optdist(cur, z0=z0)
    except NotConverged as exc:
        m = k.shape[1]
        kpq = densela.pseudoinverse(k) @ q
        bmat = optdist_matrices(k)[0]
        z = exc.best
        od = OptdistResult(float(np.sum((bmat @ z) ** 2)), z, z[:m] + kpq, z[m:])
    loss = inst.gamma * lp + (1.0 - inst.gamma) * od.value
    return {"a": a, "cache": cache, "loss": loss, "prereq": lp, "dist": od,
            "g_prereq": g_prereq, "k": k, "q": q, "bmat": optdist_matrices(k)[0]}


def _input_grads(net, state, gamma):
    """Return the prereq and dist gradients w.r.t. the input, already weighted."""
    n = net.n
    g_d = (1.0 - gamma) * optdist_grad(state["k"], state["q"], state["dist"].y_star,
                                       state["dist"].v_star)
    g_p = gamma * state["g_prereq"]
    out = []
    for g_k in (g_p, g_d):
        _, g_u = diffgraph.mlp_backward(net.layers, state["cache"], g_k[:n, :].T.reshape(1, -1))
        out.append(g_u[0])
    return out


def _certify(state, b):
    od = state["dist"]
    on_set = od.y_star - state["bmat"] @ od.z_star
    first = verify_infeasible(state["a"], b, od.y_star)
    if first.valid:
        return first
    second = verify_infeasible(state["a"], b, on_set)
    return second if second.valid else first


def run_farkas_attack(net, u0, inst: FarkasInstance, lr=0.05, epochs=2000,
                      min_lr=1e-12) -> FarkasAttackOutcome:
    """Descend ``gamma L_prereq + (1 - gamma) L_dist`` on the network input.

    ``L_prereq`` is a norm, so the loss has a kink on the set where
    ``K y = q`` becomes solvable. Each epoch therefore tries two
    subgradient directions: the full gradient, and the ``L_dist`` gradient
    with its component along the ``L_prereq`` gradient removed (the
    minimum-norm subgradient on the kink). The better trial is accepted if it
    lowers the loss; otherwise the step is halved. Accepted steps let the
    step grow back towards ``lr``.

    Success is declared only when :func:`verify_infeasible` accepts a
    candidate for the current matrix: the Optdist minimiser ``y*`` or its
    partner ``y* - B z*`` on the solution set of ``K y = q`` (which stays
    non-negative once ``||B z*|| <= nu``).
    """
    if not lr >= 0 or int(epochs) < 1:
        raise InvalidInput("lr must be >= 0 and epochs >= 1")
    b = np.asarray(net.b_fixed, dtype=np.float64)
    if b.shape != inst.b_ineq.shape or not np.array_equal(b, inst.b_ineq):
        raise InvalidInput("network b and instance b differ")
    u0 = np.asarray(u0, dtype=np.float64)
    u = u0.copy()
    state = _evaluate(net, u, inst, None)
    step = lr
    history = [(0, state["loss"])]
    traj = [(0, densela.condition_number(state["a"]).kappa2)]
    cert = _certify(state, b)
    epoch = 0
    while not cert.valid and epoch < epochs and lr > 0 and step >= min_lr:
        epoch += 1
        g_p, g_d = _input_grads(net, state, inst.gamma)
        directions = [g_p + g_d]
        pp = float(g_p @ g_p)
        if pp > 0.0:
            directions.append(g_d - (float(g_d @ g_p) / pp) * g_p)
        best = None
        for d in directions:
            trial_u = u - step * d
            trial = _evaluate(net, trial_u, inst, state["dist"].z_star)
            if best is None or trial["loss"] < best[1]["loss"]:
                best = (trial_u, trial)
        trial_u, trial = best
        trial_cert = _certify(trial, b)
        if trial["loss"] < state["loss"] or trial_cert.valid:
            u, state, cert = trial_u, trial, trial_cert
            step = min(lr, 2.0 * step)
            history.append((epoch, state["loss"]))
            traj.append((epoch, densela.condition_number(state["a"]).kappa2))
        else:
            step *= 0.5
    dist = float(np.sqrt(np.mean((u - u0) ** 2)))
    res = AttackResult(bool(cert.valid), u, epoch, traj, False, dist,
                       float(max(k for _, k in traj)), float(traj[-1][1]), history, "farkas")
    return FarkasAttackOutcome(res, cert, state["a"], b, history)
