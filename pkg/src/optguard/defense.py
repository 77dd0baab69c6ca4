"""Condition-number clamping defense and two baselines.

The clamp raises every singular value below ``sigma_max / B`` to that floor,
so the reconstructed matrix has condition number at most ``B`` while moving
by at most ``sigma_max / B`` in spectral norm.
"""

from dataclasses import dataclass

import numpy as np
from numpy.typing import NDArray

from . import densela
from .config import TAU_SING
from .errors import DegenerateRhs, InvalidInput, ZeroMatrix

DEFAULT_BOUNDS = (2.0, 10.0, 100.0, 200.0)


@dataclass(frozen=True)
class DefenseConfig:
    bound_b: float = 100.0
    enabled: bool = True

    def __post_init__(self):
        if not np.isfinite(self.bound_b) or self.bound_b <= 1.0:
            raise InvalidInput(f"bound_b must be a finite number > 1, got {self.bound_b}")

    def to_dict(self):
        return {"enabled": bool(self.enabled), "bound": float(self.bound_b)}

    @classmethod
    def from_dict(cls, obj):
        if obj is None or not obj.get("enabled", False):
            return None
        return cls(float(obj["bound"]), True)


@dataclass(frozen=True)
class DefenseReport:
    clamped: bool
    delta_norm2: float
    bound_delta: float
    bound_rel_solution_err: float
    kappa_before: float
    kappa_after: float

    def to_dict(self):
        return {k: (bool(v) if isinstance(v, (bool, np.bool_)) else float(v))
                for k, v in self.__dict__.items()}


def floor_sigma(sigma, bound_b):
    """Return ``(sigma', clamped_mask)`` for one spectrum or a stack of spectra."""
    sigma = np.asarray(sigma, dtype=np.float64)
    floor = sigma[..., :1] / bound_b
    clamped = sigma < floor
    return np.where(clamped, floor, sigma), clamped


def needs_clamp(sigma, bound_b, tau_sing=TAU_SING):
    """True where ``kappa2 > B``; numerically singular spectra always need it."""
    sigma = np.asarray(sigma, dtype=np.float64)
    s_max, s_min = sigma[..., 0], sigma[..., -1]
    singular = s_min <= tau_sing * s_max
    return (s_max > 0.0) & (singular | (s_max > bound_b * s_min))


def clamp_stack(a, bound_b, factors=None, tau_sing=TAU_SING):
    """Clamp a ``(k, m, n)`` stack.

    Returns ``(a_prime, active, factors, sigma_prime)`` where ``active`` marks
    the matrices that were modified; the others are returned bit-identical.
    Zero matrices are left untouched (they stay singular).
    """
    a = np.asarray(a, dtype=np.float64)
    u, s, vt = densela.svd_stack(a) if factors is None else factors
    active = needs_clamp(s, bound_b, tau_sing)
    s_prime, _ = floor_sigma(s, bound_b)
    a_prime = a.copy()
    if active.any():
        a_prime[active] = np.matmul(u[active] * s_prime[active][:, None, :], vt[active])
    return a_prime, active, (u, s, vt), s_prime


def clamp_condition(a, cfg: DefenseConfig, tau_sing=TAU_SING):
    """Apply the clamp to one matrix; returns ``(a_prime, DefenseReport)``.

    Raises
    ------
    ZeroMatrix
        If ``sigma_max = 0``.
    """
    a = densela.as_matrix(a)
    f = densela.svd(a)
    if f.sigma[0] == 0.0:
        raise ZeroMatrix("cannot bound the condition number of the zero matrix")
    before = densela.verdict_from_sigma(f.sigma, tau_sing).kappa2
    bound_delta = float(f.sigma[0] / cfg.bound_b)
    if not cfg.enabled or not needs_clamp(f.sigma, cfg.bound_b, tau_sing):
        return a, DefenseReport(False, 0.0, bound_delta, before / cfg.bound_b, before, before)
    s_prime, _ = floor_sigma(f.sigma, cfg.bound_b)
    a_prime = f.reconstruct(s_prime)
    after = densela.condition_number(a_prime, tau_sing=tau_sing).kappa2
    delta = float(densela.singular_values(a_prime - a)[0])
    return a_prime, DefenseReport(True, delta, bound_delta, before / cfg.bound_b, before, after)


@dataclass(frozen=True)
class Prop2Check:
    rel_err: float
    bound: float

    @property
    def holds(self):
        return self.rel_err <= self.bound


def prop2_solution_bound(a, a_prime, b, bound_b=None, tau_sing=TAU_SING) -> Prop2Check:
    """Relative gap between the canonical solutions ``A+ b`` and ``A'+ b``.

    The bound reported alongside is ``kappa2(A) / B``. When ``bound_b`` is
    omitted, ``B = kappa2(A')`` is used, which equals the configured bound
    whenever the clamp was active.
    """
    a = densela.as_matrix(a)
    a_prime = densela.as_matrix(a_prime, "a_prime")
    b = np.asarray(b, dtype=np.float64)
    x = densela.pseudoinverse(a) @ b
    x_prime = densela.pseudoinverse(a_prime) @ b
    den = float(np.linalg.norm(x_prime))
    if den == 0.0:
        raise DegenerateRhs("canonical solution of the clamped system is zero")
    rel = float(np.linalg.norm(x - x_prime)) / den
    kappa = densela.condition_number(a, tau_sing=tau_sing).kappa2
    if bound_b is None:
        bound_b = densela.condition_number(a_prime, tau_sing=tau_sing).kappa2
    return Prop2Check(rel, kappa / bound_b)


def eta_identity_baseline(a, eta):
    """``A + eta I``: the common regularisation heuristic (square ``a`` only)."""
    a = densela.as_matrix(a)
    if a.shape[0] != a.shape[1]:
        raise InvalidInput("eta * I can only be added to a square matrix")
    return a + eta * np.eye(a.shape[0])


def spectral_clamp_baseline(a, lip) -> NDArray:
    """Cap singular values at ``lip`` (a Lipschitz constraint, not a conditioning one)."""
    if lip <= 0:
        raise InvalidInput("lip must be positive")
    a = densela.as_matrix(a)
    f = densela.svd(a)
    if f.sigma[0] <= lip:
        return a
    return f.reconstruct(np.minimum(f.sigma, lip))
