"""Command-line entry point: ``optguard <subcommand> [--config FILE] [flags]``.

A YAML config may hold top-level keys (shared by every subcommand) and one
mapping per subcommand; flags given on the command line override both.
"""

import argparse
import json
import os
import sys

import numpy as np
import yaml

from . import attack, diffgraph, farkas, synthharness
from .defense import DEFAULT_BOUNDS, DefenseConfig
from .errors import OptGuardError
from .rng import make_rng

DEFAULTS = {
    "gen": {"dim": 50, "bins": 10, "train_count": 30, "test_count": 10, "seed": 0,
            "out": "dataset.csv"},
    "train": {"data": None, "bound": "off", "epochs": 300, "lr": "1e-3",
              "activation": "relu", "hidden": [64], "m": 8, "seed": 0, "out": "model"},
    "attack": {"model": None, "method": attack.ALL_ZERO_ROW_COL, "lr": 1e-2, "epochs": 5000,
               "linf_eps": None, "bound": "off", "data": None, "starts": 2, "seed": 0,
               "out": "attack.json"},
    "farkas-attack": {"size": 2, "gamma": 0.9, "nu": 1e-3, "eta": 1e-6, "lr": 0.05,
                      "epochs": 2000, "seed": 0, "out": "farkas.json"},
    "report": {"in": None, "out": "report"},
    "campaign": {"models": 10, "starts": 2, "train_epochs": 300, "attack_epochs": 5000,
                 "attack_lr": 1e-2, "seed": 0, "out": "campaign"},
}


def _parser():
    p = argparse.ArgumentParser(prog="optguard", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, help_text):
        sp = sub.add_parser(name, help=help_text, argument_default=argparse.SUPPRESS)
        sp.add_argument("--config", help="YAML config file")
        return sp

    g = add("gen", "generate a synthetic bin-assignment dataset (CSV)")
    g.add_argument("--dim", type=int)
    g.add_argument("--bins", type=int)
    g.add_argument("--train-count", type=int)
    g.add_argument("--test-count", type=int)
    g.add_argument("--seed", type=int)
    g.add_argument("--out")

    t = add("train", "train a model, optionally with the condition-number clamp")
    t.add_argument("--data")
    t.add_argument("--bound", help="B > 1, or 'off'")
    t.add_argument("--epochs", type=int)
    t.add_argument("--lr", help="rate, or 'auto' to sweep 1e-1, 1e-2, 1e-3")
    t.add_argument("--activation", choices=("relu", "celu", "tanh"))
    t.add_argument("--hidden", type=int, nargs="+")
    t.add_argument("--m", type=int, help="number of equality constraints")
    t.add_argument("--seed", type=int)
    t.add_argument("--out", help="output directory")

    a = add("attack", "attack a trained model")
    a.add_argument("--model")
    a.add_argument("--method", choices=attack.METHODS)
    a.add_argument("--lr", type=float)
    a.add_argument("--epochs", type=int)
    a.add_argument("--linf-eps", type=float)
    a.add_argument("--bound", help="deploy with clamp bound B, or 'off'")
    a.add_argument("--data", help="dataset CSV; starts are its first test rows")
    a.add_argument("--starts", type=int)
    a.add_argument("--seed", type=int)
    a.add_argument("--out")

    f = add("farkas-attack", "make a feasible inequality system infeasible")
    f.add_argument("--size", type=int)
    f.add_argument("--gamma", type=float)
    f.add_argument("--nu", type=float)
    f.add_argument("--eta", type=float)
    f.add_argument("--lr", type=float)
    f.add_argument("--epochs", type=int)
    f.add_argument("--seed", type=int)
    f.add_argument("--out")

    r = add("report", "aggregate records into tables")
    r.add_argument("--in", dest="in")
    r.add_argument("--out")

    c = add("campaign", "train, attack and report the full desk-scale grid")
    c.add_argument("--models", type=int)
    c.add_argument("--starts", type=int)
    c.add_argument("--train-epochs", type=int)
    c.add_argument("--attack-epochs", type=int)
    c.add_argument("--attack-lr", type=float)
    c.add_argument("--seed", type=int)
    c.add_argument("--out")
    return p


def resolve(command, flags):
    """Merge defaults, config file (top level, then section) and flags."""
    opts = dict(DEFAULTS[command])
    path = flags.pop("config", None)
    if path:
        try:
            with open(path) as fh:
                conf = yaml.safe_load(fh) or {}
        except OSError as exc:
            raise OSError(f"cannot read config {path}: {exc}") from exc
        for src in (conf, conf.get(command) or {}):
            for k, v in src.items():
                k = str(k).replace("-", "_")
                if k in opts:
                    opts[k] = v
    opts.update(flags)
    return opts


def _bound(value):
    if value is None or str(value).lower() in ("off", "none", "false"):
        return None
    return DefenseConfig(float(value))


def _dump(path, obj):
    parent = os.path.dirname(path)
    if parent:
        os.makedirs(parent, exist_ok=True)
    try:
        with open(path, "w") as fh:
            json.dump(obj, fh, indent=1, sort_keys=True)
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc}") from exc


def cmd_gen(o):
    synthharness.gen_dataset(o["dim"], o["bins"], o["train_count"], o["test_count"],
                             o["seed"], out=o["out"])
    print(o["out"])
    return 0


def cmd_train(o):
    if not o["data"]:
        raise OptGuardError("train needs --data")
    ds = synthharness.SyntheticDataset.load(o["data"])
    arch = synthharness.ArchConfig(tuple(o["hidden"]), int(o["m"]), o["activation"])
    lr = "auto" if str(o["lr"]) == "auto" else float(o["lr"])
    net, rec = synthharness.train(ds, arch, _bound(o["bound"]), int(o["epochs"]), lr,
                                  int(o["seed"]))
    os.makedirs(o["out"], exist_ok=True)
    _dump(os.path.join(o["out"], "model.json"), net.to_json())
    _dump(os.path.join(o["out"], "train_record.json"), rec.to_dict())
    print(f"final train loss {rec.final_train_loss}  test loss {rec.test_loss}  "
          f"non-finite epochs {len(rec.nonfinite_events)}")
    return 0


def _load_model(path):
    try:
        with open(path) as fh:
            return diffgraph.Network.from_json(json.load(fh))
    except OSError as exc:
        raise OSError(f"cannot read model {path}: {exc}") from exc


def cmd_attack(o):
    if not o["model"]:
        raise OptGuardError("attack needs --model")
    net = _load_model(o["model"]).with_defense(_bound(o["bound"]))
    k = int(o["starts"])
    if o["data"]:
        u0 = synthharness.SyntheticDataset.load(o["data"]).test[0][:k]
    else:
        u0 = make_rng(o["seed"], "attack", "starts").standard_normal((k, net.input_dim))
    cfg = attack.AttackConfig(o["method"], float(o["lr"]), int(o["epochs"]), o["linf_eps"],
                              seed=int(o["seed"]))
    stacked = diffgraph.Network.stack([net], repeats=u0.shape[0])
    results = attack.run_attack_batch(stacked, u0, cfg)
    dfn = _bound(o["bound"])
    rec = synthharness.ExperimentRecord(
        "attack", {"method": cfg.method, "defense": None if dfn is None else dfn.bound_b,
                   "attack": cfg.to_dict(), "model_path": o["model"]},
        attack_results=[dict(r.to_dict(), model=0, start=i) for i, r in enumerate(results)])
    _dump(o["out"], rec.to_dict())
    print(f"{cfg.method}: {rec.successes}/{len(results)} successful")
    return 0


def cmd_farkas(o):
    size = int(o["size"])
    b = -np.ones(size)
    net = farkas.init_farkas_network(m=size, n=size, b_ineq=b, seed=int(o["seed"]))
    u0 = make_rng(o["seed"], "farkas", "start").standard_normal(net.input_dim)
    inst = farkas.FarkasInstance(np.zeros((size, size)), b, o["nu"], o["gamma"], o["eta"])
    out = farkas.run_farkas_attack(net, u0, inst, lr=float(o["lr"]), epochs=int(o["epochs"]))
    cfg = {"size": size, "gamma": o["gamma"], "nu": o["nu"], "eta": o["eta"],
           "lr": o["lr"], "epochs": o["epochs"], "seed": o["seed"], "method": "farkas"}
    rec = synthharness.ExperimentRecord("farkas", cfg,
                                        attack_results=[out.result.to_dict()],
                                        extra=out.to_dict() | {"certificate":
                                                               out.certificate.to_dict()})
    _dump(o["out"], rec.to_dict())
    print(f"success {out.result.success}  certificate valid {out.certificate.valid}")
    return 0


def cmd_report(o):
    if not o["in"]:
        raise OptGuardError("report needs --in")
    records = synthharness.load_records(o["in"])
    bad = synthharness.report(records, o["out"])
    for line in bad:
        print("VIOLATION:", line, file=sys.stderr)
    print(f"{len(records)} records -> {o['out']}")
    return 1 if bad else 0


def cmd_campaign(o):
    cfg = synthharness.CampaignConfig(models=int(o["models"]),
                                      starts_per_model=int(o["starts"]),
                                      train_epochs=int(o["train_epochs"]),
                                      attack_epochs=int(o["attack_epochs"]),
                                      attack_lr=float(o["attack_lr"]), bounds=DEFAULT_BOUNDS,
                                      seed=int(o["seed"]))
    records = synthharness.run_campaign(cfg)
    bad = synthharness.report(records, o["out"])
    for (m, d), (s, n) in sorted(synthharness.success_table(records).items()):
        print(f"{m:22s} {d:8s} {s:3d}/{n}")
    for line in bad:
        print("VIOLATION:", line, file=sys.stderr)
    return 1 if bad else 0


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "attack": cmd_attack,
            "farkas-attack": cmd_farkas, "report": cmd_report, "campaign": cmd_campaign}


def main(argv=None):
    args = vars(_parser().parse_args(argv))
    command = args.pop("command")
    try:
        return COMMANDS[command](resolve(command, args))
    except (OptGuardError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
