"""Reverse-mode differentiation for the fixed network shape used in the experiments.

The pipeline is ``u -> dense/act ... -> theta -> (A, b) -> [clamp] -> QP ->
softmax``. All stages are batched along a leading axis. Layer weights are
either shared by the batch (``w`` of shape ``(out, in)``) or owned per item
(``(k, out, in)``), which lets several trained networks be attacked in one
vectorised loop.
"""

import copy
from dataclasses import dataclass, field

import numpy as np
from numpy.typing import NDArray

from . import densela, qplayer
from .config import EPS_BROAD, TAU_SING
from .defense import DefenseConfig, clamp_stack, floor_sigma
from .errors import InvalidInput, NonFiniteForward
from .rng import make_rng

ACTIVATIONS = ("relu", "celu", "tanh", "identity")


def activation(kind, x):
    """Apply an activation; returns ``(y, dy/dx)`` elementwise.

    CeLU uses ``alpha = 1``: ``max(0, x) + min(0, exp(x) - 1)``.
    """
    x = np.asarray(x, dtype=np.float64)
    if kind == "relu":
        return np.maximum(x, 0.0), (x > 0.0).astype(np.float64)
    if kind == "celu":
        neg = np.minimum(x, 0.0)
        return np.maximum(x, 0.0) + np.expm1(neg), np.where(x > 0.0, 1.0, np.exp(neg))
    if kind == "tanh":
        y = np.tanh(x)
        return y, 1.0 - y * y
    if kind == "identity":
        return x.copy(), np.ones_like(x)
    raise InvalidInput(f"unknown activation {kind!r}")


# ---------------------------------------------------------------------------
# Tape
# ---------------------------------------------------------------------------

def _op_dense(x, w, b):
    if w.ndim == 2:
        return x @ w.T + b
    return np.matmul(w, x[:, :, None])[:, :, 0] + b


def _op_act(kind, x):
    return activation(kind, x)[0]


def _op_reshape(theta, m, n):
    k = theta.shape[0]
    return theta[:, :m * n].reshape(k, m, n), theta[:, m * n:m * n + m]


def _op_clamp(a, bound_b, tau_sing):
    return clamp_stack(a, bound_b, tau_sing=tau_sing)[0]


def _op_qp(q_mat, q_vec, a, b, a_sigma, tau_sing):
    return qplayer.solve_eq_qp_stack(q_mat, q_vec, a, b, a_sigma=a_sigma, tau_sing=tau_sing)


def _op_softmax(z):
    return softmax(z)


_OPS = {"dense": _op_dense, "act": _op_act, "reshape": _op_reshape,
        "clamp": _op_clamp, "qp": _op_qp, "softmax": _op_softmax}


@dataclass
class TapeRecord:
    op: str
    inputs: tuple
    output: object


@dataclass
class Tape:
    """Ordered record of primitive calls with their cached outputs.

    ``grads`` holds per-parameter accumulators (keyed ``w0``, ``b0``, ...,
    ``u``) filled by :func:`backward`; they are reset at the start of every
    backward pass.
    """

    records: list = field(default_factory=list)
    grads: dict = field(default_factory=dict)

    def record(self, op, inputs, output):
        self.records.append(TapeRecord(op, inputs, output))
        return output

    def zero_grad(self):
        for g in self.grads.values():
            g[...] = 0.0

    def accumulate(self, name, g):
        if name in self.grads:
            self.grads[name] += g
        else:
            self.grads[name] = np.array(g, dtype=np.float64, copy=True)

    def replay(self):
        """Re-run every recorded primitive on its cached inputs."""
        return [_OPS[r.op](*r.inputs) for r in self.records]

    def replay_matches(self):
        """True when replaying reproduces every cached output bit-for-bit."""
        for r, out in zip(self.records, self.replay()):
            a = r.output if isinstance(r.output, tuple) else (r.output,)
            b = out if isinstance(out, tuple) else (out,)
            for x, y in zip(a, b):
                if not np.array_equal(x, y, equal_nan=True):
                    return False
        return True


# ---------------------------------------------------------------------------
# Network
# ---------------------------------------------------------------------------

@dataclass
class Dense:
    w: NDArray
    b: NDArray
    act: str = "relu"


@dataclass
class Network:
    """Dense stack whose output ``theta`` parametrises an equality-constrained QP.

    ``theta[:m*n]`` becomes ``A`` (row-major) and, when ``learn_b``, the next
    ``m`` entries become ``b``; otherwise ``b_fixed`` is used. The QP has
    ``Q = q_scale * I`` and ``q = 0``.
    """

    layers: list
    m: int
    n: int
    learn_b: bool = True
    b_fixed: NDArray | None = None
    q_scale: float = 0.1
    defense: DefenseConfig | None = None
    seed: int | None = None
    tau_sing: float = TAU_SING
    eps_broad: float = EPS_BROAD

    def __post_init__(self):
        prev = None
        for i, layer in enumerate(self.layers):
            if layer.act not in ACTIVATIONS:
                raise InvalidInput(f"layer {i}: unknown activation {layer.act!r}")
            if prev is not None and layer.w.shape[-1] != prev:
                raise InvalidInput(f"layer {i} expects width {layer.w.shape[-1]}, got {prev}")
            prev = layer.w.shape[-2]
        if prev != self.theta_dim:
            raise InvalidInput(f"final width {prev} != required {self.theta_dim}")
        if not self.learn_b:
            if self.b_fixed is None or np.shape(self.b_fixed)[-1] != self.m:
                raise InvalidInput("a fixed b of length m is required when b is not learned")
        if self.q_scale <= 0:
            raise InvalidInput("q_scale must be positive")

    @property
    def theta_dim(self):
        return self.m * self.n + (self.m if self.learn_b else 0)

    @property
    def input_dim(self):
        return self.layers[0].w.shape[-1]

    @property
    def stacked(self):
        return self.layers[0].w.ndim == 3

    @property
    def q_mat(self):
        return self.q_scale * np.eye(self.n)

    def params(self):
        out = []
        for layer in self.layers:
            out += [layer.w, layer.b]
        return out

    def copy(self):
        return copy.deepcopy(self)

    def with_defense(self, cfg):
        net = self.copy()
        net.defense = cfg if (cfg is not None and cfg.enabled) else None
        return net

    def arch(self):
        return {"input_dim": self.input_dim,
                "widths": [int(layer.w.shape[-2]) for layer in self.layers],
                "activations": [layer.act for layer in self.layers],
                "m": self.m, "n": self.n, "learn_b": self.learn_b,
                "b_fixed": None if self.b_fixed is None else np.asarray(self.b_fixed).tolist(),
                "q_scale": self.q_scale}

    def to_json(self):
        if self.stacked:
            raise InvalidInput("stacked networks are not serialised")
        return {"arch": self.arch(), "seed": self.seed,
                "weights": [{"w": layer.w.tolist(), "b": layer.b.tolist()}
                            for layer in self.layers],
                "defense": (self.defense.to_dict() if self.defense is not None
                            else {"enabled": False, "bound": None})}

    @classmethod
    def from_json(cls, obj):
        arch = obj["arch"]
        layers = [Dense(np.asarray(w["w"], dtype=np.float64), np.asarray(w["b"], dtype=np.float64),
                        act) for w, act in zip(obj["weights"], arch["activations"])]
        b_fixed = None if arch.get("b_fixed") is None else np.asarray(arch["b_fixed"], float)
        return cls(layers, arch["m"], arch["n"], arch["learn_b"], b_fixed, arch["q_scale"],
                   DefenseConfig.from_dict(obj.get("defense")), obj.get("seed"))

    @classmethod
    def stack(cls, nets, repeats=1):
        """Stack networks of identical architecture, each repeated ``repeats`` times."""
        first = nets[0]
        layers = []
        for i, layer in enumerate(first.layers):
            w = np.repeat(np.stack([net.layers[i].w for net in nets]), repeats, axis=0)
            b = np.repeat(np.stack([net.layers[i].b for net in nets]), repeats, axis=0)
            layers.append(Dense(w, b, layer.act))
        b_fixed = first.b_fixed
        if not first.learn_b:
            b_fixed = np.repeat(np.stack([np.asarray(net.b_fixed, float) for net in nets]),
                                repeats, axis=0)
        return cls(layers, first.m, first.n, first.learn_b, b_fixed, first.q_scale,
                   first.defense, first.seed, first.tau_sing, first.eps_broad)


def init_network(input_dim, hidden, m, n, activation_kind="relu", seed=0, learn_b=True,
                 b_fixed=None, q_scale=0.1, defense=None):
    """Dense stack with weights uniform in ``(-1/sqrt(fan_in), 1/sqrt(fan_in))``."""
    rng = make_rng(seed, "init")
    widths = [input_dim] + list(hidden) + [m * n + (m if learn_b else 0)]
    layers = []
    for i, (fan_in, fan_out) in enumerate(zip(widths[:-1], widths[1:])):
        lim = 1.0 / np.sqrt(fan_in)
        act = activation_kind if i < len(widths) - 2 else "identity"
        layers.append(Dense(rng.uniform(-lim, lim, size=(fan_out, fan_in)),
                            rng.uniform(-lim, lim, size=fan_out), act))
    return Network(layers, m, n, learn_b, b_fixed, q_scale, defense, seed)


# ---------------------------------------------------------------------------
# Forward / backward
# ---------------------------------------------------------------------------

def softmax(z):
    z = np.asarray(z, dtype=np.float64)
    e = np.exp(z - np.max(z, axis=-1, keepdims=True))
    return e / np.sum(e, axis=-1, keepdims=True)


def cross_entropy(z, labels):
    """Mean cross-entropy of ``softmax(z)``; returns ``(loss, d loss / d z)``."""
    z = np.atleast_2d(z)
    labels = np.asarray(labels).reshape(-1)
    k = z.shape[0]
    shift = z - np.max(z, axis=1, keepdims=True)
    logp = shift - np.log(np.sum(np.exp(shift), axis=1, keepdims=True))
    loss = -float(np.mean(logp[np.arange(k), labels]))
    g = np.exp(logp)
    g[np.arange(k), labels] -= 1.0
    return loss, g / k


@dataclass
class ForwardResult:
    """All stages of a batched forward pass (leading axis = batch).

    ``nonfinite[i]`` is True when item ``i`` failed in the QP layer; its
    ``qp_out`` and ``probs`` rows are then NaN. ``sigma`` holds the singular
    values of the deployed matrix (after the defense, if any).
    """

    u: NDArray
    theta: NDArray
    a: NDArray
    b: NDArray
    a_deployed: NDArray
    qp_out: NDArray
    nu: NDArray
    probs: NDArray
    qp_ok: NDArray
    sigma: NDArray
    defense_active: NDArray
    tape: Tape
    caches: dict = field(repr=False, default_factory=dict)

    @property
    def nonfinite(self):
        return ~self.qp_ok | ~np.isfinite(self.probs).all(axis=1)

    @property
    def any_nonfinite(self):
        return bool(self.nonfinite.any())

    @property
    def kappa2(self):
        s_max, s_min = self.sigma[:, 0], self.sigma[:, -1]
        singular = (s_max == 0.0) | (s_min <= self.caches["tau_sing"] * s_max)
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.where(singular, np.inf, s_max / s_min)

    @property
    def numerically_singular(self):
        return ~np.isfinite(self.kappa2)


def mlp_forward(layers, u, tape=None):
    """Dense stack only; returns ``(theta, cache)``."""
    x = u
    cache = []
    for i, layer in enumerate(layers):
        pre = _op_dense(x, layer.w, layer.b)
        y, dy = activation(layer.act, pre)
        if tape is not None:
            # weights are copied: optimisers update them in place
            tape.record("dense", (x, layer.w.copy(), layer.b.copy()), pre)
            tape.record("act", (layer.act, pre), y)
        cache.append((x, dy))
        x = y
    return x, cache


def mlp_backward(layers, cache, g):
    """Backward through the dense stack; returns ``(layer_grads, grad_u)``.

    ``layer_grads`` is a list of ``(dw, db)``; shared weights receive the sum
    over the batch, stacked weights a per-item gradient.
    """
    grads = [None] * len(layers)
    for i in range(len(layers) - 1, -1, -1):
        layer = layers[i]
        x, dy = cache[i]
        gp = g * dy
        if layer.w.ndim == 2:
            grads[i] = (gp.T @ x, gp.sum(axis=0))
            g = gp @ layer.w
        else:
            grads[i] = (gp[:, :, None] * x[:, None, :], gp)
            g = np.matmul(gp[:, None, :], layer.w)[:, 0, :]
    return grads, g


def forward(net: Network, u, need_qp=True) -> ForwardResult:
    """Run the full pipeline on ``u`` of shape ``(d,)`` or ``(k, d)``.

    A QP failure is reported through ``qp_ok`` / ``nonfinite`` rather than
    raised. With ``need_qp=False`` the QP and softmax stages are skipped
    (outputs are left NaN and ``qp_ok`` False) while the singular values of
    the deployed matrix are still computed.
    """
    u = np.asarray(u, dtype=np.float64)
    if u.ndim == 1:
        u = u[None, :]
    if u.ndim != 2 or u.shape[1] != net.input_dim:
        raise InvalidInput(f"input must have width {net.input_dim}, got shape {u.shape}")
    if not np.isfinite(u).all():
        raise InvalidInput("input contains non-finite entries")
    if net.stacked and u.shape[0] != net.layers[0].w.shape[0]:
        raise InvalidInput("stacked network needs exactly one input per stacked copy")
    k, m, n = u.shape[0], net.m, net.n
    tape = Tape()
    theta, mlp_cache = mlp_forward(net.layers, u, tape)
    a, b_learned = tape.record("reshape", (theta, m, n), _op_reshape(theta, m, n))
    if net.learn_b:
        b = b_learned
    else:
        b = np.broadcast_to(np.asarray(net.b_fixed, dtype=np.float64), (k, m))
    caches = {"mlp": mlp_cache, "tau_sing": net.tau_sing}

    finite_a = np.isfinite(a).all(axis=(1, 2))
    a_safe = np.where(finite_a[:, None, None], a, 0.0)
    active = np.zeros(k, dtype=bool)
    if net.defense is not None:
        a_dep, active, factors, s_prime = clamp_stack(a_safe, net.defense.bound_b,
                                                      tau_sing=net.tau_sing)
        tape.record("clamp", (a_safe, net.defense.bound_b, net.tau_sing), a_dep)
        a_dep = np.where(finite_a[:, None, None], a_dep, np.nan)
        caches["factors"] = factors
        sigma = factors[1].copy()
        if active.any():
            sigma[active] = densela.singular_values(a_dep[active])
    else:
        a_dep = a
        sigma = densela.singular_values(a_safe)
    sigma[~finite_a] = np.nan

    z = np.full((k, n), np.nan)
    nu = np.full((k, m), np.nan)
    ok = np.zeros(k, dtype=bool)
    probs = np.full((k, n), np.nan)
    if need_qp:
        qp_in = (net.q_mat, np.zeros(n), a_dep, b, np.where(finite_a[:, None], sigma, 0.0),
                 net.tau_sing)
        z, nu, ok = tape.record("qp", qp_in, _op_qp(*qp_in))
        probs = tape.record("softmax", (z,), softmax(z))
    return ForwardResult(u, theta, a, b, a_dep, z, nu, probs, ok, sigma, active, tape, caches)


@dataclass
class Gradients:
    layers: list
    u: NDArray
    a: NDArray
    theta: NDArray


def backward(net: Network, fr: ForwardResult, grad_z=None, grad_probs=None,
             grad_a=None, grad_theta=None) -> Gradients:
    """Propagate seed gradients back to the weights and the input.

    Seeds may be given at the QP output (``grad_z``), the softmax output
    (``grad_probs``), the pre-defense matrix (``grad_a``) or ``theta``; all
    are summed.

    Raises
    ------
    NonFiniteForward
        If a gradient has to pass through a QP stage that failed in ``fr``.
    """
    k, m, n = fr.u.shape[0], net.m, net.n
    tape = fr.tape
    tape.grads = {}
    g_z = np.zeros((k, n))
    through_qp = grad_z is not None or grad_probs is not None
    if through_qp and fr.any_nonfinite:
        raise NonFiniteForward("backward through a forward pass with non-finite QP output")
    if grad_z is not None:
        g_z = g_z + np.asarray(grad_z, dtype=np.float64).reshape(k, n)
    if grad_probs is not None:
        gp = np.asarray(grad_probs, dtype=np.float64).reshape(k, n)
        p = fr.probs
        g_z = g_z + p * (gp - np.sum(gp * p, axis=1, keepdims=True))

    g_theta = np.zeros((k, net.theta_dim))
    if through_qp:
        d_adep, d_b = qplayer.backward_eq_qp_stack(net.q_mat, fr.a_deployed, fr.qp_out,
                                                   fr.nu, g_z)
        if net.defense is not None and fr.defense_active.any():
            act = fr.defense_active
            u_, s_, vt_ = (f[act] for f in fr.caches["factors"])
            d_adep = d_adep.copy()
            d_adep[act] = clamp_backward_stack(u_, s_, vt_, d_adep[act],
                                               net.defense.bound_b, net.eps_broad)
        g_theta[:, :m * n] = d_adep.reshape(k, m * n)
        if net.learn_b:
            g_theta[:, m * n:] = d_b
    if grad_a is not None:
        g_theta[:, :m * n] += np.asarray(grad_a, dtype=np.float64).reshape(k, m * n)
    if grad_theta is not None:
        g_theta += np.asarray(grad_theta, dtype=np.float64).reshape(k, net.theta_dim)

    layer_grads, g_u = mlp_backward(net.layers, fr.caches["mlp"], g_theta)
    for i, (dw, db) in enumerate(layer_grads):
        tape.accumulate(f"w{i}", dw)
        tape.accumulate(f"b{i}", db)
    tape.accumulate("u", g_u)
    return Gradients(layer_grads, g_u, g_theta[:, :m * n].reshape(k, m, n), g_theta)


# ---------------------------------------------------------------------------
# SVD backward for the clamp
# ---------------------------------------------------------------------------

def clamp_backward_stack(u, s, vt, g, bound_b, eps_broad=EPS_BROAD):
    """Gradient w.r.t. ``A`` of ``A' = U diag(sigma') V^T`` given ``g = dL/dA'``.

    ``sigma'_i = max(sigma_i, sigma_1 / B)``. The standard SVD differential is
    used with the ``1/(s_j^2 - s_i^2)`` factors broadened to
    ``sign(.)/max(|.|, eps_broad)``. Pairs that are both unclamped or both
    clamped use the exact algebraic simplification of those factors, which
    stays finite for repeated singular values.
    """
    k, m, r = u.shape
    n = vt.shape[2]
    v = vt.swapaxes(1, 2)
    s_prime, clamped = floor_sigma(s, bound_b)
    floor = s[:, :1] / bound_b
    mm = np.matmul(np.matmul(u.swapaxes(1, 2), g), v)

    si, sj = s[:, :, None], s[:, None, :]
    pi, pj = s_prime[:, :, None], s_prime[:, None, :]
    ci, cj = clamped[:, :, None], clamped[:, None, :]
    den = sj * sj - si * si
    den = np.where(den >= 0.0, 1.0, -1.0) * np.maximum(np.abs(den), eps_broad)
    c1 = (pj * sj - pi * si) / den
    c2 = (pj * si - pi * sj) / den
    free = ~ci & ~cj
    c1 = np.where(free, 1.0, c1)
    c2 = np.where(free, 0.0, c2)
    both = ci & cj
    ssum = np.maximum(si + sj, eps_broad)
    c1 = np.where(both, floor[:, :, None] / ssum, c1)
    c2 = np.where(both, -floor[:, :, None] / ssum, c2)
    inner = c1 * mm + c2 * mm.swapaxes(1, 2)

    diag = np.diagonal(mm, axis1=1, axis2=2)
    s_bar = np.where(clamped, 0.0, diag)
    s_bar[:, 0] += np.sum(np.where(clamped, diag, 0.0), axis=1) / bound_b
    idx = np.arange(r)
    inner[:, idx, idx] = s_bar
    out = np.matmul(np.matmul(u, inner), vt)

    ratio = s_prime / np.maximum(s, eps_broad * s[:, :1])
    if m > r:
        proj = g - np.matmul(u, np.matmul(u.swapaxes(1, 2), g))
        out += np.matmul(np.matmul(proj, v) * ratio[:, None, :], vt)
    if n > r:
        proj = g - np.matmul(np.matmul(g, v), vt)
        out += np.matmul(u * ratio[:, None, :], np.matmul(u.swapaxes(1, 2), proj))
    return out


def svd_backward(factors: densela.SvdFactors, grad_out, bound_b, eps_broad=EPS_BROAD):
    """Gradient w.r.t. ``A`` of the clamp output ``A'`` for one matrix.

    ``factors`` is the SVD of the pre-defense ``A``. When the clamp is inactive
    (``kappa2(A) <= B``) the upstream gradient is returned unchanged.
    """
    g = densela.as_matrix(grad_out, "grad_out")
    if not np.any(floor_sigma(factors.sigma, bound_b)[1]):
        return g.copy()
    return clamp_backward_stack(factors.u[None], factors.sigma[None], factors.vt[None],
                                g[None], bound_b, eps_broad)[0]


# ---------------------------------------------------------------------------
# Optimiser
# ---------------------------------------------------------------------------

class Adam:
    """Adam on a list of arrays, updated in place."""

    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8):
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]

    def step(self, grads):
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def flat_grads(grads: Gradients):
    out = []
    for dw, db in grads.layers:
        out += [dw, db]
    return out
