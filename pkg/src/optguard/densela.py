"""Dense real linear algebra on small matrices.

Matrices are plain two-dimensional ``float64`` numpy arrays. The SVD is a
one-sided (Hestenes) Jacobi iteration compiled with numba; everything else in
this module is built on top of it so that singular-value decisions are made
consistently in one place.
"""

import csv
import io
import json
from dataclasses import dataclass

import numba
import numpy as np
from numpy.typing import NDArray

from .config import TAU_SING, pinv_cutoff
from .errors import InvalidInput, SingularSystem

__all__ = [
    "SvdFactors",
    "SingularityVerdict",
    "as_matrix",
    "svd",
    "svd_stack",
    "singular_values",
    "pseudoinverse",
    "condition_number",
    "distance_to_singularity",
    "solve_linear",
    "power_norm2",
    "matrix_to_json",
    "matrix_from_json",
    "matrix_to_csv",
    "matrix_from_csv",
]


def as_matrix(x, name="a", allow_nonfinite=False) -> NDArray:
    """Validate ``x`` as a finite 2-D float64 array (a copy is not forced)."""
    a = np.asarray(x, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] < 1 or a.shape[1] < 1:
        raise InvalidInput(f"{name} must be a non-empty 2-D matrix, got shape {a.shape}")
    if not allow_nonfinite and not np.isfinite(a).all():
        raise InvalidInput(f"{name} contains non-finite entries")
    return a


# ---------------------------------------------------------------------------
# Jacobi kernel
# ---------------------------------------------------------------------------

@numba.njit(cache=True)
def _jacobi_cols(cols, vrows, want_v, max_sweeps):
    # cols: (n, m) with n <= m; row j is column j of the working matrix.
    n, m = cols.shape
    tol = m * 2.220446049250313e-16
    for _ in range(max_sweeps):
        rotated = False
        for p in range(n - 1):
            for q in range(p + 1, n):
                alpha = 0.0
                beta = 0.0
                gamma = 0.0
                for i in range(m):
                    x = cols[p, i]
                    y = cols[q, i]
                    alpha += x * x
                    beta += y * y
                    gamma += x * y
                if gamma == 0.0 or abs(gamma) <= tol * np.sqrt(alpha * beta):
                    continue
                rotated = True
                zeta = (beta - alpha) / (2.0 * gamma)
                if zeta >= 0.0:
                    t = 1.0 / (zeta + np.sqrt(1.0 + zeta * zeta))
                else:
                    t = -1.0 / (-zeta + np.sqrt(1.0 + zeta * zeta))
                c = 1.0 / np.sqrt(1.0 + t * t)
                s = c * t
                for i in range(m):
                    x = cols[p, i]
                    y = cols[q, i]
                    cols[p, i] = c * x - s * y
                    cols[q, i] = s * x + c * y
                if want_v:
                    for i in range(n):
                        x = vrows[p, i]
                        y = vrows[q, i]
                        vrows[p, i] = c * x - s * y
                        vrows[q, i] = s * x + c * y
        if not rotated:
            return True
    return False


@numba.njit(cache=True)
def _norms(cols):
    n, m = cols.shape
    out = np.empty(n)
    for j in range(n):
        acc = 0.0
        scale = 0.0
        for i in range(m):
            scale = max(scale, abs(cols[j, i]))
        if scale == 0.0:
            out[j] = 0.0
            continue
        for i in range(m):
            r = cols[j, i] / scale
            acc += r * r
        out[j] = scale * np.sqrt(acc)
    return out


@numba.njit(cache=True)
def _sv_stack(stack, max_sweeps):
    k, r, c = stack.shape
    n = min(r, c)
    out = np.empty((k, n))
    dummy = np.empty((1, 1))
    for idx in range(k):
        if r >= c:
            cols = stack[idx].T.copy()
        else:
            cols = stack[idx].copy()
        _jacobi_cols(cols, dummy, False, max_sweeps)
        s = _norms(cols)
        out[idx] = -np.sort(-s)
    return out


@numba.njit(cache=True)
def _svd_kernel(a, max_sweeps):
    m, n = a.shape
    transpose = m < n
    if transpose:
        cols = a.copy()                  # rows of cols = columns of a.T
        rows, k = n, m
    else:
        cols = a.T.copy()
        rows, k = m, n
    vrows = np.eye(k)
    _jacobi_cols(cols, vrows, True, max_sweeps)
    raw = _norms(cols)
    order = np.argsort(-raw, kind="mergesort")
    sigma = raw[order]
    left = np.zeros((rows, k))
    right = np.empty((k, k))
    for j in range(k):
        src = order[j]
        for i in range(k):
            right[i, j] = vrows[src, i]
        if sigma[j] > 0.0:
            for i in range(rows):
                left[i, j] = cols[src, i] / sigma[j]
    # orthonormal completion for exactly-zero singular values
    e = 0
    for j in range(k):
        if sigma[j] > 0.0:
            continue
        while True:
            cand = np.zeros(rows)
            cand[e % rows] = 1.0
            e += 1
            for _ in range(2):
                for jj in range(k):
                    if jj == j or (sigma[jj] == 0.0 and jj > j):
                        continue
                    d = 0.0
                    for i in range(rows):
                        d += left[i, jj] * cand[i]
                    for i in range(rows):
                        cand[i] -= d * left[i, jj]
            nrm = np.sqrt(np.sum(cand * cand))
            if nrm > 1e-8:
                for i in range(rows):
                    left[i, j] = cand[i] / nrm
                break
    if transpose:
        u = right
        v = left
    else:
        u = left
        v = right
    for j in range(k):
        for i in range(u.shape[0]):
            x = u[i, j]
            if abs(x) > 1e-12:
                if x < 0.0:
                    for ii in range(u.shape[0]):
                        u[ii, j] = -u[ii, j]
                    for ii in range(v.shape[0]):
                        v[ii, j] = -v[ii, j]
                break
    return u, sigma, v.T.copy()


@numba.njit(cache=True)
def _svd_stack(stack, max_sweeps):
    kk, m, n = stack.shape
    r = min(m, n)
    us = np.empty((kk, m, r))
    ss = np.empty((kk, r))
    vts = np.empty((kk, r, n))
    for idx in range(kk):
        u, s, vt = _svd_kernel(stack[idx], max_sweeps)
        us[idx] = u
        ss[idx] = s
        vts[idx] = vt
    return us, ss, vts


# ---------------------------------------------------------------------------
# Public API
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SvdFactors:
    """Thin SVD ``a = u @ diag(sigma) @ vt`` with ``r = min(m, n)``."""

    u: NDArray
    sigma: NDArray
    vt: NDArray

    @property
    def v(self):
        return self.vt.T

    @property
    def shape(self):
        return (self.u.shape[0], self.vt.shape[1])

    def reconstruct(self, sigma=None):
        s = self.sigma if sigma is None else np.asarray(sigma, dtype=np.float64)
        return (self.u * s) @ self.vt


def svd(a, max_sweeps=80) -> SvdFactors:
    """Thin SVD by one-sided Jacobi rotations.

    Singular values are returned in non-increasing order. Column signs are
    fixed so that the first entry of each column of ``u`` whose magnitude
    exceeds 1e-12 is positive, which makes the factors deterministic.

    Raises
    ------
    InvalidInput
        If ``a`` has non-finite entries.
    """
    a = np.ascontiguousarray(as_matrix(a))
    u, sigma, vt = _svd_kernel(a, max_sweeps)
    return SvdFactors(u=u, sigma=sigma, vt=vt)


def svd_stack(a, max_sweeps=80):
    """Batched :func:`svd` over a ``(k, m, n)`` stack; returns ``(u, sigma, vt)`` arrays."""
    arr = np.ascontiguousarray(np.asarray(a, dtype=np.float64))
    if arr.ndim != 3:
        raise InvalidInput("svd_stack expects a (k, m, n) array")
    if not np.isfinite(arr).all():
        raise InvalidInput("a contains non-finite entries")
    return _svd_stack(arr, max_sweeps)


def singular_values(a, max_sweeps=80) -> NDArray:
    """Singular values only, non-increasing. Accepts a stack ``(..., m, n)``."""
    arr = np.asarray(a, dtype=np.float64)
    if arr.ndim < 2:
        raise InvalidInput("expected a matrix or a stack of matrices")
    if not np.isfinite(arr).all():
        raise InvalidInput("a contains non-finite entries")
    lead = arr.shape[:-2]
    flat = np.ascontiguousarray(arr.reshape((-1,) + arr.shape[-2:]))
    out = _sv_stack(flat, max_sweeps)
    return out.reshape(lead + (out.shape[-1],))


def pseudoinverse(a, rcond=None) -> NDArray:
    """Moore-Penrose pseudoinverse ``V diag(1/sigma) U^T`` with a relative cutoff.

    Singular values at or below ``rcond * sigma_max`` are treated as zero
    (default ``rcond = max(m, n) * eps``).
    """
    f = svd(a)
    if f.sigma.size == 0 or f.sigma[0] == 0.0:
        return np.zeros((a.shape[1], a.shape[0]))
    cut = pinv_cutoff(np.shape(a), f.sigma[0], rcond)
    inv = np.where(f.sigma > cut, 1.0 / np.where(f.sigma > cut, f.sigma, 1.0), 0.0)
    return (f.v * inv) @ f.u.T


@dataclass(frozen=True)
class SingularityVerdict:
    kappa2: float
    sigma_min: float
    sigma_max: float
    is_numerically_singular: bool
    kappa_frobenius: float | None = None

    def to_dict(self):
        return {"kappa2": self.kappa2, "sigma_min": self.sigma_min,
                "sigma_max": self.sigma_max,
                "is_numerically_singular": self.is_numerically_singular,
                "kappa_frobenius": self.kappa_frobenius}


def verdict_from_sigma(sigma, tau_sing=TAU_SING) -> SingularityVerdict:
    s_max = float(sigma[0])
    s_min = float(sigma[-1])
    singular = s_max == 0.0 or s_min <= tau_sing * s_max
    kappa = float("inf") if singular else s_max / s_min
    return SingularityVerdict(kappa, s_min, s_max, singular)


def condition_number(a, norm="two", tau_sing=TAU_SING) -> SingularityVerdict:
    """Condition number with an explicit numerical-singularity decision.

    ``norm="two"`` gives ``sigma_max / sigma_min``; ``norm="frobenius"``
    additionally fills ``kappa_frobenius = ||A+||_F ||A||_F`` (``inf`` when
    singular). ``kappa2`` is always reported and is ``inf`` whenever
    ``sigma_min <= tau_sing * sigma_max``.
    """
    if norm not in ("two", "frobenius"):
        raise InvalidInput(f"unknown norm {norm!r}")
    s = singular_values(as_matrix(a))
    v = verdict_from_sigma(s, tau_sing)
    if norm == "frobenius":
        if v.is_numerically_singular:
            kf = float("inf")
        else:
            kf = float(np.sqrt(np.sum(s ** 2)) * np.sqrt(np.sum(s ** -2.0)))
        v = SingularityVerdict(v.kappa2, v.sigma_min, v.sigma_max,
                               v.is_numerically_singular, kf)
    return v


def distance_to_singularity(a) -> float:
    """2-norm distance to the nearest rank-deficient matrix, i.e. sigma_min."""
    return float(singular_values(as_matrix(a))[-1])


def solve_linear(a, b, tau_sing=TAU_SING, sigma_bounds=None) -> NDArray:
    """Solve ``a x = b`` for square ``a``, refusing numerically singular systems.

    Parameters
    ----------
    a : (n, n) array
    b : (n,) or (n, k) array
    tau_sing : float
        Relative singularity threshold on ``sigma_min / sigma_max``.
    sigma_bounds : (float, float), optional
        Rigorous ``(lower bound on sigma_min, upper bound on sigma_max)``
        known to the caller. When they already prove ``a`` is far from the
        threshold the SVD check is skipped and an LU solve is used.

    Raises
    ------
    SingularSystem
        When ``a`` is numerically singular. The solver never returns a
        non-finite solution.
    """
    a = as_matrix(a)
    bb = np.asarray(b, dtype=np.float64)
    n = a.shape[0]
    if a.shape[1] != n:
        raise InvalidInput(f"solve_linear needs a square matrix, got {a.shape}")
    if bb.shape[0] != n or bb.ndim not in (1, 2):
        raise InvalidInput(f"rhs shape {bb.shape} does not match matrix {a.shape}")
    if not np.isfinite(bb).all():
        raise InvalidInput("rhs contains non-finite entries")

    if sigma_bounds is not None and sigma_bounds[0] > 2.0 * tau_sing * sigma_bounds[1]:
        x = np.linalg.solve(a, bb)
    else:
        f = svd(a)
        verdict = verdict_from_sigma(f.sigma, tau_sing)
        if verdict.is_numerically_singular:
            raise SingularSystem(
                f"matrix is numerically singular (sigma_min={verdict.sigma_min:.3e}, "
                f"sigma_max={verdict.sigma_max:.3e})", verdict)
        coef = f.u.T @ bb
        coef = coef / (f.sigma if bb.ndim == 1 else f.sigma[:, None])
        x = f.v @ coef
    if not np.isfinite(x).all():
        raise SingularSystem("solve produced non-finite values")
    return x


def power_norm2(a, tol=1e-14, max_iter=20000) -> float:
    """Spectral norm by power iteration on ``a^T a`` (deterministic start)."""
    a = as_matrix(a)
    n = a.shape[1]
    x = np.ones(n) + np.arange(n) / (7.0 * n)
    x /= np.linalg.norm(x)
    lam = 0.0
    for _ in range(max_iter):
        y = a.T @ (a @ x)
        nrm = np.linalg.norm(y)
        if nrm == 0.0:
            return 0.0
        x = y / nrm
        if abs(nrm - lam) <= tol * nrm:
            lam = nrm
            break
        lam = nrm
    return float(np.sqrt(lam))


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------

def matrix_to_json(a) -> dict:
    a = np.asarray(a, dtype=np.float64)
    return {"rows": int(a.shape[0]), "cols": int(a.shape[1]),
            "entries": [float(x) for x in a.ravel()]}


def matrix_from_json(obj) -> NDArray:
    if isinstance(obj, str):
        obj = json.loads(obj)
    rows, cols, entries = int(obj["rows"]), int(obj["cols"]), obj["entries"]
    if rows < 1 or cols < 1 or len(entries) != rows * cols:
        raise InvalidInput("entries length must equal rows*cols")
    return np.asarray(entries, dtype=np.float64).reshape(rows, cols)


def matrix_to_csv(a) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    for row in np.asarray(a, dtype=np.float64):
        writer.writerow([repr(float(x)) for x in row])
    return buf.getvalue()


def matrix_from_csv(text) -> NDArray:
    rows = [r for r in csv.reader(io.StringIO(text)) if r]
    if not rows or len({len(r) for r in rows}) != 1:
        raise InvalidInput("CSV matrix must have equal-length, non-empty rows")
    return np.asarray([[float(x) for x in r] for r in rows], dtype=np.float64)
