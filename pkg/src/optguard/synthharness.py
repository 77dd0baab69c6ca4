"""Synthetic bin-assignment experiment: data, training, attack campaigns, reports.

A Gaussian feature vector is assigned to one of ``n`` bins uniformly at
random. The model maps it through a dense stack to ``(A, b)``, solves
``min 0.5 z^T Q z s.t. A z = b`` and reads the bin scores off ``z``.
"""

import csv
import io
import json
import os
import time
from dataclasses import dataclass, field

import numpy as np
from numpy.typing import NDArray

from . import attack, diffgraph
from .defense import DEFAULT_BOUNDS, DefenseConfig
from .errors import InvalidInput
from .rng import make_rng

AUTO_LRS = (1e-1, 1e-2, 1e-3)
KAPPA_SLACK = 1e-9


# ---------------------------------------------------------------------------
# Data
# ---------------------------------------------------------------------------

@dataclass
class SyntheticDataset:
    features: NDArray
    labels: NDArray
    seed: int
    bins: int
    train_count: int

    @property
    def dim(self):
        return self.features.shape[1]

    @property
    def train(self):
        k = self.train_count
        return self.features[:k], self.labels[:k]

    @property
    def test(self):
        k = self.train_count
        return self.features[k:], self.labels[k:]

    def to_csv(self):
        buf = io.StringIO()
        buf.write(f"# bins={self.bins} seed={self.seed} train_count={self.train_count}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["split", "label"] + [f"f{j}" for j in range(self.dim)])
        for i, (x, y) in enumerate(zip(self.features, self.labels)):
            split = "train" if i < self.train_count else "test"
            w.writerow([split, int(y)] + [repr(float(v)) for v in x])
        return buf.getvalue()

    def save(self, path):
        try:
            with open(path, "w", newline="") as fh:
                fh.write(self.to_csv())
        except OSError as exc:
            raise OSError(f"cannot write dataset to {path}: {exc}") from exc

    @classmethod
    def from_csv(cls, text):
        lines = text.splitlines()
        if not lines or not lines[0].startswith("#"):
            raise InvalidInput("dataset CSV must start with a '# bins=...' metadata line")
        meta = dict(tok.split("=", 1) for tok in lines[0][1:].split())
        rows = list(csv.reader(lines[1:]))[1:]
        feats = np.array([[float(v) for v in r[2:]] for r in rows], dtype=np.float64)
        labels = np.array([int(r[1]) for r in rows], dtype=np.int64)
        return cls(feats, labels, int(meta["seed"]), int(meta["bins"]),
                   int(meta["train_count"]))

    @classmethod
    def load(cls, path):
        try:
            with open(path) as fh:
                return cls.from_csv(fh.read())
        except OSError as exc:
            raise OSError(f"cannot read dataset {path}: {exc}") from exc


def gen_dataset(d=50, n=10, train_count=30, test_count=10, seed=0, out=None):
    """Standard-Gaussian features with labels drawn uniformly from ``range(n)``."""
    if min(d, n, train_count) < 1 or test_count < 0:
        raise InvalidInput("dimensions and counts must be positive")
    total = train_count + test_count
    feats = make_rng(seed, "dataset", "features").standard_normal((total, d))
    labels = make_rng(seed, "dataset", "labels").integers(0, n, size=total)
    ds = SyntheticDataset(feats, labels, int(seed), int(n), int(train_count))
    if out is not None:
        ds.save(out)
    return ds


# ---------------------------------------------------------------------------
# Records
# ---------------------------------------------------------------------------

@dataclass
class ExperimentRecord:
    """One training run, attack cell or Farkas run.

    ``wall_clock`` is kept out of :meth:`to_dict` so that reruns serialise to
    identical bytes; reports store it in a separate timing file.
    """

    kind: str
    config: dict
    train_loss: list = field(default_factory=list)
    final_train_loss: float | None = None
    test_loss: float | None = None
    nonfinite_events: list = field(default_factory=list)
    attack_results: list = field(default_factory=list)
    extra: dict = field(default_factory=dict)
    wall_clock: float = 0.0

    @property
    def bound(self):
        d = self.config.get("defense")
        return None if d is None else float(d)

    @property
    def successes(self):
        return sum(1 for r in self.attack_results if r["success"])

    def to_dict(self):
        return {"kind": self.kind, "config": self.config, "train_loss": self.train_loss,
                "final_train_loss": self.final_train_loss, "test_loss": self.test_loss,
                "nonfinite_events": self.nonfinite_events,
                "attack_results": self.attack_results, "extra": self.extra}

    @classmethod
    def from_dict(cls, obj):
        return cls(obj["kind"], obj["config"], obj.get("train_loss", []),
                   obj.get("final_train_loss"), obj.get("test_loss"),
                   obj.get("nonfinite_events", []), obj.get("attack_results", []),
                   obj.get("extra", {}), obj.get("wall_clock", 0.0))


def _finite_or_none(x):
    x = float(x)
    return x if np.isfinite(x) else None


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ArchConfig:
    hidden: tuple = (64,)
    m: int = 8
    activation: str = "relu"
    q_scale: float = 0.1

    def to_dict(self):
        return {"hidden": list(self.hidden), "m": self.m, "activation": self.activation,
                "q_scale": self.q_scale}


def _eval_loss(net, x, y):
    fr = diffgraph.forward(net, x)
    if fr.any_nonfinite:
        return float("nan")
    return diffgraph.cross_entropy(fr.qp_out, y)[0]


def train(dataset: SyntheticDataset, arch=ArchConfig(), defense=None, epochs=300, lr=1e-3,
          seed=0):
    """Full-batch Adam on the cross-entropy of the QP output.

    Epochs whose forward pass is non-finite are skipped and their index is
    recorded. Returns ``(network, record)``.
    """
    if lr == "auto":
        return _train_auto(dataset, arch, defense, epochs, seed)
    if defense is not None and not defense.enabled:
        defense = None
    t0 = time.perf_counter()
    net = diffgraph.init_network(dataset.dim, arch.hidden, arch.m, dataset.bins,
                                 arch.activation, seed=seed, q_scale=arch.q_scale,
                                 defense=defense)
    x, y = dataset.train
    opt = diffgraph.Adam(net.params(), lr=float(lr))
    losses, events = [], []
    for epoch in range(int(epochs)):
        fr = diffgraph.forward(net, x)
        if fr.any_nonfinite:
            events.append(epoch)
            losses.append(None)
            continue
        loss, g_z = diffgraph.cross_entropy(fr.qp_out, y)
        if not np.isfinite(loss):
            events.append(epoch)
            losses.append(None)
            continue
        losses.append(float(loss))
        opt.step(diffgraph.flat_grads(diffgraph.backward(net, fr, grad_z=g_z)))
    final = _eval_loss(net, x, y)
    xt, yt = dataset.test
    test = _eval_loss(net, xt, yt) if len(yt) else float("nan")
    cfg = {"dataset_seed": dataset.seed, "dim": dataset.dim, "bins": dataset.bins,
           "train_count": dataset.train_count, "arch": arch.to_dict(),
           "defense": None if defense is None else float(defense.bound_b),
           "epochs": int(epochs), "lr": float(lr), "seed": int(seed)}
    rec = ExperimentRecord("train", cfg, losses, _finite_or_none(final), _finite_or_none(test),
                           events, wall_clock=time.perf_counter() - t0)
    return net, rec


def _train_auto(dataset, arch, defense, epochs, seed):
    """Train at every rate in :data:`AUTO_LRS`; keep the lowest final train loss."""
    best = None
    sweep = {}
    for lr in AUTO_LRS:
        net, rec = train(dataset, arch, defense, epochs, lr, seed)
        score = rec.final_train_loss if rec.final_train_loss is not None else np.inf
        sweep[repr(lr)] = rec.final_train_loss
        if best is None or score < best[0]:
            best = (score, net, rec)
    _, net, rec = best
    rec.extra["lr_sweep"] = sweep
    return net, rec


# ---------------------------------------------------------------------------
# Attack campaign
# ---------------------------------------------------------------------------

def _defense_label(bound):
    return "none" if bound is None else f"B={bound:g}"


def attack_campaign(models, starts, methods=attack.METHODS, bounds=(None,) + DEFAULT_BOUNDS,
                    lr=1e-2, epochs=5000, trace_every=50, linf_eps=None, model_ids=None):
    """Run every ``(method, bound)`` cell over all models and starts.

    ``starts`` has shape ``(len(models), s, d)``. The defense is switched on at
    deployment on the same trained weights, so each row of the table differs
    only in the clamp. Returns one ``attack`` record per cell.
    """
    starts = np.asarray(starts, dtype=np.float64)
    if starts.ndim != 3 or starts.shape[0] != len(models):
        raise InvalidInput("starts must have shape (models, starts_per_model, d)")
    per = starts.shape[1]
    ids = list(range(len(models))) if model_ids is None else list(model_ids)
    base = [net.with_defense(None) for net in models]
    stacked = diffgraph.Network.stack(base, repeats=per)
    u0 = starts.reshape(-1, starts.shape[2])
    records = []
    for bound in bounds:
        net = stacked.with_defense(None if bound is None else DefenseConfig(float(bound)))
        for method in methods:
            t0 = time.perf_counter()
            cfg = attack.AttackConfig(method, lr, epochs, linf_eps, trace_every=trace_every)
            results = attack.run_attack_batch(net, u0, cfg)
            out = []
            for i, res in enumerate(results):
                d = res.to_dict()
                d["model"] = ids[i // per]
                d["start"] = i % per
                out.append(d)
            conf = {"method": method, "defense": None if bound is None else float(bound),
                    "attack": cfg.to_dict(), "models": ids, "starts_per_model": per}
            records.append(ExperimentRecord("attack", conf, attack_results=out,
                                            wall_clock=time.perf_counter() - t0))
    return records


def success_table(records):
    """``{(method, defense_label): (successes, runs)}`` over attack records."""
    table = {}
    for rec in records:
        if rec.kind != "attack":
            continue
        key = (rec.config["method"], _defense_label(rec.bound))
        s, n = table.get(key, (0, 0))
        table[key] = (s + rec.successes, n + len(rec.attack_results))
    return table


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------

def check_invariants(records):
    """Return a list of human-readable violations (empty when all hold)."""
    bad = []
    for rec in records:
        b = rec.bound
        if rec.kind == "train" and b is not None and rec.nonfinite_events:
            bad.append(f"defended training (B={b:g}) hit non-finite epochs "
                       f"{rec.nonfinite_events[:5]}")
        if rec.kind == "attack" and b is not None:
            limit = b * (1.0 + KAPPA_SLACK)
            for r in rec.attack_results:
                if r["success"]:
                    bad.append(f"{rec.config['method']} succeeded against B={b:g} "
                               f"(model {r.get('model')}, start {r.get('start')})")
                if r["kappa_max"] > limit or any(k > limit for _, k in r["kappa_trajectory"]):
                    bad.append(f"kappa exceeded B={b:g} in {rec.config['method']} "
                               f"(model {r.get('model')}, start {r.get('start')})")
        if rec.kind == "farkas":
            for r in rec.attack_results:
                if r["success"] and not rec.extra.get("certificate", {}).get("valid", False):
                    bad.append("farkas success without a valid certificate")
    return bad


def _write(path, text):
    try:
        with open(path, "w", newline="") as fh:
            fh.write(text)
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc}") from exc


def _csv(rows, header):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def report(records, out_dir):
    """Write results.json, timing.json, table1.csv, table2.csv and kappa traces.

    Returns the list of invariant violations; callers exit nonzero when it is
    not empty.
    """
    try:
        os.makedirs(os.path.join(out_dir, "kappa_traces"), exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create report directory {out_dir}: {exc}") from exc
    records = list(records)
    violations = check_invariants(records)
    results = {"records": [r.to_dict() for r in records], "violations": violations}
    _write(os.path.join(out_dir, "results.json"), json.dumps(results, indent=1, sort_keys=True))
    timing = [{"record_kind": r.kind, "config": r.config, "wall_clock": r.wall_clock}
              for r in records]
    _write(os.path.join(out_dir, "timing.json"), json.dumps(timing, indent=1, sort_keys=True))

    table = success_table(records)
    rows1 = [[m, d, s, n, f"{100.0 * s / n:.2f}" if n else ""]
             for (m, d), (s, n) in sorted(table.items())]
    _write(os.path.join(out_dir, "table1.csv"),
           _csv(rows1, ["method", "defense", "successes", "runs", "success_pct"]))

    rows2 = []
    for r in records:
        if r.kind == "train":
            rows2.append([_defense_label(r.bound), r.config.get("seed"),
                          r.final_train_loss, r.test_loss, len(r.nonfinite_events)])
    _write(os.path.join(out_dir, "table2.csv"),
           _csv(rows2, ["defense", "seed", "final_train_loss", "test_loss",
                        "nonfinite_events"]))

    for r in records:
        if r.kind not in ("attack", "farkas"):
            continue
        tag = f"{r.config.get('method', r.kind)}_{_defense_label(r.bound).replace('=', '')}"
        for j, res in enumerate(r.attack_results):
            name = f"{tag}_m{res.get('model', 0)}_s{res.get('start', j)}.csv"
            _write(os.path.join(out_dir, "kappa_traces", name),
                   _csv([[int(e), repr(float(k))] for e, k in res["kappa_trajectory"]],
                        ["epoch", "kappa2"]))
    return violations


def load_records(in_dir):
    """Collect every JSON file under ``in_dir`` that holds records."""
    out = []
    for root, _, files in sorted(os.walk(in_dir)):
        for name in sorted(files):
            if not name.endswith(".json"):
                continue
            path = os.path.join(root, name)
            try:
                with open(path) as fh:
                    obj = json.load(fh)
            except (OSError, ValueError) as exc:
                raise OSError(f"cannot read records from {path}: {exc}") from exc
            items = obj.get("records", [obj]) if isinstance(obj, dict) else obj
            for item in items if isinstance(items, list) else []:
                if isinstance(item, dict) and item.get("kind") in ("train", "attack", "farkas"):
                    out.append(ExperimentRecord.from_dict(item))
    return out


# ---------------------------------------------------------------------------
# Full grid
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CampaignConfig:
    models: int = 10
    starts_per_model: int = 2
    dim: int = 50
    bins: int = 10
    train_count: int = 30
    test_count: int = 10
    arch: ArchConfig = ArchConfig()
    train_epochs: int = 300
    train_lr: float = 1e-3
    bounds: tuple = DEFAULT_BOUNDS
    methods: tuple = attack.METHODS
    attack_lr: float = 1e-2
    attack_epochs: int = 5000
    trace_every: int = 50
    seed: int = 0


def run_campaign(cfg: CampaignConfig = CampaignConfig()):
    """Train undefended and defended models per seed, then attack the undefended ones.

    Model ``i`` uses dataset and weight seed ``cfg.seed + i``. Attack starts
    are the first test inputs of each model's dataset.
    """
    if cfg.starts_per_model > cfg.test_count:
        raise InvalidInput("starts_per_model cannot exceed test_count")
    records, models, starts = [], [], []
    for i in range(cfg.models):
        seed = cfg.seed + i
        ds = gen_dataset(cfg.dim, cfg.bins, cfg.train_count, cfg.test_count, seed)
        net, rec = train(ds, cfg.arch, None, cfg.train_epochs, cfg.train_lr, seed)
        records.append(rec)
        models.append(net)
        starts.append(ds.test[0][:cfg.starts_per_model])
        for b in cfg.bounds:
            records.append(train(ds, cfg.arch, DefenseConfig(float(b)), cfg.train_epochs,
                                 cfg.train_lr, seed)[1])
    ids = [cfg.seed + i for i in range(cfg.models)]
    records += attack_campaign(models, np.stack(starts), cfg.methods,
                               (None,) + tuple(cfg.bounds), cfg.attack_lr, cfg.attack_epochs,
                               cfg.trace_every, model_ids=ids)
    return records
