"""Closed-form derivatives of condition numbers with respect to matrix entries.

Both gradients are built from the differential of the pseudoinverse,

    d(A+) = -A+ dA A+ + (I - A+ A) dA^T A+^T A+ + A+ A+^T dA^T (I - A A+),

which holds whenever the rank of ``A`` is locally constant.
"""

from dataclasses import dataclass

import numpy as np
from numpy.typing import NDArray

from . import densela, diffgraph
from .config import TAU_SING
from .errors import DegenerateSpectrum, InvalidInput, SingularInput

TWO_NORM = "two_norm_closed_form"
FROBENIUS = "frobenius_closed_form"
FINITE_DIFFERENCE = "finite_difference"

# relative gap below which an extreme singular value counts as repeated
SIMPLE_GAP = 1e-8


@dataclass(frozen=True)
class CondGradReport:
    grad_wrt_a: NDArray
    kappa: float
    method: str


def _checked_svd(a, tau_sing):
    a = densela.as_matrix(a)
    f = densela.svd(a)
    v = densela.verdict_from_sigma(f.sigma, tau_sing)
    if v.is_numerically_singular:
        raise SingularInput(f"matrix is numerically singular (sigma_min={v.sigma_min:.3e})")
    return a, f


def _pinv_from(f):
    return (f.v / f.sigma) @ f.u.T


def pinv_differential(a, da, tau_sing=TAU_SING) -> NDArray:
    """Directional derivative of ``A+`` along ``da``.

    Raises
    ------
    SingularInput
        If ``a`` is numerically singular (the formula needs constant rank).
    """
    a, f = _checked_svd(a, tau_sing)
    da = densela.as_matrix(da, "da")
    if da.shape != a.shape:
        raise InvalidInput(f"da shape {da.shape} != {a.shape}")
    m, n = a.shape
    x = _pinv_from(f)
    return (-x @ da @ x
            + (np.eye(n) - x @ a) @ da.T @ x.T @ x
            + x @ x.T @ da.T @ (np.eye(m) - a @ x))


def _check_simple(sigma):
    r = sigma.size
    if r < 2:
        return
    tol = SIMPLE_GAP * sigma[0]
    if sigma[0] - sigma[1] <= tol:
        raise DegenerateSpectrum("largest singular value is not simple")
    if sigma[-2] - sigma[-1] <= tol:
        raise DegenerateSpectrum("smallest singular value is not simple")


def grad_kappa2(a, tau_sing=TAU_SING) -> CondGradReport:
    """Gradient of ``kappa2(A) = ||A+||_2 ||A||_2`` with respect to ``A``.

    With ``X = A+``, ``B = ||X||_2 v_1 u_1^T`` and ``C = ||A||_2 u_r v_r^T``:

        grad = B^T - (X C X)^T + X^T X C (I - X A) + (I - A X) C X X^T.

    Raises
    ------
    SingularInput
        If ``a`` is numerically singular.
    DegenerateSpectrum
        If the largest or smallest singular value is repeated.
    """
    a, f = _checked_svd(a, tau_sing)
    _check_simple(f.sigma)
    m, n = a.shape
    s = f.sigma
    x = _pinv_from(f)
    u1, v1 = f.u[:, 0], f.vt[0]
    ur, vr = f.u[:, -1], f.vt[-1]
    b_mat = (1.0 / s[-1]) * np.outer(v1, u1)
    c_mat = s[0] * np.outer(ur, vr)
    grad = (b_mat.T - (x @ c_mat @ x).T
            + x.T @ x @ c_mat @ (np.eye(n) - x @ a)
            + (np.eye(m) - a @ x) @ c_mat @ x @ x.T)
    return CondGradReport(grad, float(s[0] / s[-1]), TWO_NORM)


def grad_kappaF(a, tau_sing=TAU_SING) -> CondGradReport:
    """Gradient of ``kappa_F(A) = ||A+||_F ||A||_F`` with respect to ``A``.

    With ``X = A+``:

        grad = (||X||/||A||) A + (||A||/||X||) (X^T X X^T - X^T X X^T X A - A X X^T X X^T).

    Raises
    ------
    SingularInput
        If ``a`` is numerically singular.
    """
    a, f = _checked_svd(a, tau_sing)
    x = _pinv_from(f)
    na = np.linalg.norm(a)
    nx = np.linalg.norm(x)
    xtxxt = x.T @ x @ x.T
    grad = (nx / na) * a + (na / nx) * (xtxxt - xtxxt @ x @ a - a @ x @ xtxxt)
    return CondGradReport(grad, float(na * nx), FROBENIUS)


def fd_grad_kappa2(a, h=1e-6, tau_sing=TAU_SING) -> CondGradReport:
    """Central finite differences of ``kappa2`` (fallback at degenerate spectra)."""
    a = densela.as_matrix(a)
    scale = h * max(1.0, float(np.abs(a).max()))
    grad = np.zeros_like(a)
    for idx in np.ndindex(a.shape):
        e = np.zeros_like(a)
        e[idx] = scale
        kp = densela.condition_number(a + e, tau_sing=tau_sing).kappa2
        km = densela.condition_number(a - e, tau_sing=tau_sing).kappa2
        grad[idx] = (kp - km) / (2.0 * scale)
    kappa = densela.condition_number(a, tau_sing=tau_sing).kappa2
    return CondGradReport(grad, kappa, FINITE_DIFFERENCE)


def grad_log_kappa2_stack(u, s, vt):
    """Gradient of ``log kappa2`` for a stack of SVDs.

    On the SVD this reduces ``grad kappa2 / kappa2`` to
    ``u_1 v_1^T / s_1 - u_r v_r^T / s_r``. Returns ``(grad, simple)`` where
    ``simple[i]`` is False at degenerate extreme singular values (their
    gradient is then meaningless and must be replaced by the caller).
    """
    g = (u[:, :, :1] / s[:, None, :1]) @ vt[:, :1, :] \
        - (u[:, :, -1:] / s[:, None, -1:]) @ vt[:, -1:, :]
    tol = SIMPLE_GAP * s[:, 0]
    simple = (s[:, 0] - s[:, 1] > tol) & (s[:, -2] - s[:, -1] > tol) if s.shape[1] > 1 \
        else np.ones(s.shape[0], dtype=bool)
    return g, simple


def grad_log_kappa2_wrt_input(net, u, tau_sing=TAU_SING, fallback=False) -> NDArray:
    """``d log kappa2(A(u)) / du`` for the pre-defense matrix ``A = reshape(f_w(u))``.

    ``fallback=True`` substitutes finite differences (on ``A``) when the
    extreme singular values are degenerate instead of raising.
    """
    fr = diffgraph.forward(net, u, need_qp=False)
    a = fr.a[0]
    try:
        rep = grad_kappa2(a, tau_sing)
    except DegenerateSpectrum:
        if not fallback:
            raise
        rep = fd_grad_kappa2(a, tau_sing=tau_sing)
    grads = diffgraph.backward(net, fr, grad_a=(rep.grad_wrt_a / rep.kappa)[None])
    return grads.u[0]
