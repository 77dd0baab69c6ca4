"""Singularity attacks on the QP layer and their negative controls.

Every method runs projected gradient steps on the network input. Success
means the deployed model (defense included) produced a non-finite output or a
numerically singular constraint matrix.
"""

import csv
import io
from dataclasses import dataclass, field

import numpy as np
from numpy.typing import NDArray

from . import condgrad, densela, diffgraph
from .config import TAU_SING
from .errors import AlreadySingular, InvalidInput

ALL_ZERO_ROW_COL = "all_zero_row_col"
ZERO_SINGULAR_VALUE = "zero_singular_value"
CONDITION_GRAD = "condition_grad"
MAX_OUTPUT = "max_output"
TARGET_ZERO_MATRIX = "target_zero_matrix"
METHODS = (ALL_ZERO_ROW_COL, ZERO_SINGULAR_VALUE, CONDITION_GRAD, MAX_OUTPUT,
           TARGET_ZERO_MATRIX)
TARGET_METHODS = (ALL_ZERO_ROW_COL, ZERO_SINGULAR_VALUE, TARGET_ZERO_MATRIX)


@dataclass(frozen=True)
class AttackConfig:
    method: str = ALL_ZERO_ROW_COL
    learning_rate: float = 1e-2
    max_epochs: int = 5000
    linf_eps: float | None = None
    clamp_box: tuple | None = None
    seed: int = 0
    trace_every: int = 10

    def __post_init__(self):
        if self.method not in METHODS:
            raise InvalidInput(f"unknown attack method {self.method!r}")
        if not (self.learning_rate >= 0.0 and np.isfinite(self.learning_rate)):
            raise InvalidInput("learning_rate must be a finite number >= 0")
        if int(self.max_epochs) < 1:
            raise InvalidInput("max_epochs must be >= 1")
        if self.linf_eps is not None and not self.linf_eps > 0:
            raise InvalidInput("linf_eps must be positive when given")
        if self.clamp_box is not None and not self.clamp_box[0] < self.clamp_box[1]:
            raise InvalidInput("clamp_box must satisfy lo < hi")
        if int(self.trace_every) < 1:
            raise InvalidInput("trace_every must be >= 1")

    def to_dict(self):
        return {"method": self.method, "learning_rate": self.learning_rate,
                "max_epochs": int(self.max_epochs), "linf_eps": self.linf_eps,
                "clamp_box": None if self.clamp_box is None else list(self.clamp_box),
                "seed": self.seed, "trace_every": int(self.trace_every)}


@dataclass
class AttackResult:
    success: bool
    u_star: NDArray
    epochs_used: int
    kappa_trajectory: list
    final_output_nonfinite: bool
    distortion_l2: float
    kappa_max: float = 0.0
    final_kappa: float = 0.0
    loss_trajectory: list = field(default_factory=list)
    method: str = ""

    def to_dict(self):
        return {"method": self.method, "success": bool(self.success),
                "u_star": [float(x) for x in self.u_star],
                "epochs_used": int(self.epochs_used),
                "kappa_trajectory": [[int(e), float(k)] for e, k in self.kappa_trajectory],
                "loss_trajectory": [[int(e), float(v)] for e, v in self.loss_trajectory],
                "final_output_nonfinite": bool(self.final_output_nonfinite),
                "distortion_l2": float(self.distortion_l2),
                "kappa_max": float(self.kappa_max), "final_kappa": float(self.final_kappa)}

    def kappa_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "kappa2"])
        for e, k in self.kappa_trajectory:
            w.writerow([int(e), repr(float(k))])
        return buf.getvalue()


# ---------------------------------------------------------------------------
# Targets
# ---------------------------------------------------------------------------

def make_target_zero_rowcol(a) -> NDArray:
    """Zero the first row (``m <= n``) or the first column (``m > n``)."""
    a = densela.as_matrix(a).copy()
    if a.shape[0] <= a.shape[1]:
        a[0, :] = 0.0
    else:
        a[:, 0] = 0.0
    return a


def make_target_zero_sv(a, tau_sing=TAU_SING) -> NDArray:
    """Drop the smallest singular value: the nearest singular matrix in 2-norm.

    Raises
    ------
    AlreadySingular
        If ``a`` is already numerically singular.
    """
    f = densela.svd(a)
    if densela.verdict_from_sigma(f.sigma, tau_sing).is_numerically_singular:
        raise AlreadySingular("matrix is already numerically singular")
    s = f.sigma.copy()
    s[-1] = 0.0
    return f.reconstruct(s)


def _targets(method, a, tau_sing):
    if method == ALL_ZERO_ROW_COL:
        return np.stack([make_target_zero_rowcol(x) for x in a])
    if method == ZERO_SINGULAR_VALUE:
        return np.stack([make_target_zero_sv(x, tau_sing) for x in a])
    return np.zeros_like(a)


# ---------------------------------------------------------------------------
# Detection
# ---------------------------------------------------------------------------

def detect_failure_stack(fr) -> NDArray:
    """Per-item failure flags of a batched forward result."""
    bad = ~fr.qp_ok
    bad |= ~np.isfinite(fr.qp_out).all(axis=1)
    bad |= ~np.isfinite(fr.probs).all(axis=1)
    return bad


def detect_failure(fr) -> bool:
    """True iff any QP output or probability is non-finite or a KKT solve failed."""
    return bool(detect_failure_stack(fr).any())


# ---------------------------------------------------------------------------
# Attack loop
# ---------------------------------------------------------------------------

def _project(u, u0, cfg):
    if cfg.linf_eps is not None:
        u = np.clip(u, u0 - cfg.linf_eps, u0 + cfg.linf_eps)
    if cfg.clamp_box is not None:
        u = np.clip(u, cfg.clamp_box[0], cfg.clamp_box[1])
    return u


def _loss_and_grad(net, fr, cfg, target, tau_sing):
    """Return ``(loss, grad_u, direction)``; ``direction`` is -1 for descent, +1 for ascent."""
    k = fr.u.shape[0]
    method = cfg.method
    if method in TARGET_METHODS:
        diff = fr.a - target
        loss = np.sum(diff * diff, axis=(1, 2))
        g = diffgraph.backward(net, fr, grad_a=2.0 * diff)
        return loss, g.u, -1.0
    if method == CONDITION_GRAD:
        a = fr.a
        s_all = densela.singular_values(a)
        loss = np.log(s_all[:, 0]) - np.log(s_all[:, -1])
        ok = np.isfinite(loss) & (s_all[:, -1] > tau_sing * s_all[:, 0])
        grad_a = np.zeros_like(a)
        if ok.any():
            u_, s_, vt_ = densela.svd_stack(a[ok])
            g_ok, simple = condgrad.grad_log_kappa2_stack(u_, s_, vt_)
            idx = np.flatnonzero(ok)
            for j in np.flatnonzero(~simple):
                rep = condgrad.fd_grad_kappa2(a[idx[j]], tau_sing=tau_sing)
                g_ok[j] = rep.grad_wrt_a / rep.kappa
            grad_a[ok] = g_ok
        # pre-defense A already singular: no finite ascent direction remains
        g = diffgraph.backward(net, fr, grad_a=grad_a)
        return loss, g.u, 1.0
    # max_output: ascend sum |z| through the QP layer (and the defense)
    z = fr.qp_out
    loss = np.sum(np.abs(z), axis=1)
    g = diffgraph.backward(net, fr, grad_z=np.sign(z))
    return loss, g.u, 1.0


def run_attack_batch(net, u0, cfg: AttackConfig, tau_sing=TAU_SING):
    """Run ``cfg`` from each row of ``u0``; returns one :class:`AttackResult` per row.

    ``net`` may be a stacked network holding one copy per row, in which case
    every row attacks its own model. Finished rows are frozen; the loop stops
    once every row has succeeded or the epoch budget is spent.
    """
    if not isinstance(cfg, AttackConfig):
        raise InvalidInput("cfg must be an AttackConfig")
    u0 = np.atleast_2d(np.asarray(u0, dtype=np.float64))
    k, d = u0.shape
    u = _project(u0.copy(), u0, cfg)

    fr = diffgraph.forward(net, u)
    if detect_failure_stack(fr).any() or fr.numerically_singular.any():
        raise InvalidInput("attack start must have a finite, non-singular forward pass")
    target = _targets(cfg.method, fr.a, tau_sing) if cfg.method in TARGET_METHODS else None

    done = np.zeros(k, dtype=bool)
    epochs_used = np.full(k, int(cfg.max_epochs))
    nonfinite = np.zeros(k, dtype=bool)
    kappa_max = np.zeros(k)
    final_kappa = np.zeros(k)
    traj = [[] for _ in range(k)]
    loss_traj = [[] for _ in range(k)]

    for epoch in range(int(cfg.max_epochs) + 1):
        if epoch > 0:
            fr = diffgraph.forward(net, u)
        kappa = fr.kappa2
        failed = detect_failure_stack(fr)
        live = ~done
        kappa_max[live] = np.maximum(kappa_max[live], kappa[live])
        final_kappa[live] = kappa[live]
        hit = live & (failed | fr.numerically_singular)
        record = epoch % cfg.trace_every == 0 or epoch == cfg.max_epochs
        for i in np.flatnonzero(live & (hit | record)):
            traj[i].append((epoch, float(kappa[i])))
        nonfinite[hit] = failed[hit]
        epochs_used[hit] = epoch
        done |= hit
        if done.all() or epoch == cfg.max_epochs:
            break
        if cfg.method == MAX_OUTPUT and done.any():
            # finished items may sit on a failed QP; re-run them at their start
            fr = diffgraph.forward(net, np.where(done[:, None], u0, u))
        loss, grad_u, direction = _loss_and_grad(net, fr, cfg, target, tau_sing)
        if record:
            for i in np.flatnonzero(~done):
                loss_traj[i].append((epoch, float(loss[i])))
        step = np.where(np.isfinite(grad_u), grad_u, 0.0)
        u_new = _project(u + direction * cfg.learning_rate * step, u0, cfg)
        u = np.where(done[:, None], u, u_new)

    results = []
    for i in range(k):
        dist = float(np.sqrt(np.mean((u[i] - u0[i]) ** 2)))
        results.append(AttackResult(bool(done[i]), u[i].copy(), int(epochs_used[i]), traj[i],
                                    bool(nonfinite[i]), dist, float(kappa_max[i]),
                                    float(final_kappa[i]), loss_traj[i], cfg.method))
    return results


def run_attack(net, u0, cfg: AttackConfig, tau_sing=TAU_SING) -> AttackResult:
    """Algorithm-1 style attack from a single start ``u0``."""
    u0 = np.asarray(u0, dtype=np.float64)
    if u0.ndim != 1:
        raise InvalidInput("run_attack takes one input vector; use run_attack_batch")
    return run_attack_batch(net, u0[None], cfg, tau_sing)[0]
