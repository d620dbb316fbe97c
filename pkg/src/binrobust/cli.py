"""Experiment driver: config parsing, command dispatch, artifact output.

Commands: train, attack, curve, heatmap, defend, cam, bench, report.
Configs are strict JSON (unknown keys are errors); all randomness flows
from one top-level seed via a documented derivation (dataset = seed,
training = seed + 1, attacks = seed + 2).
"""
from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np
from jsonschema import Draft202012Validator

from . import defenses as D
from . import evalharness as E
from . import models as M
from .attacks import FAMILY, AttackSpec
from .binarize import SchemeId
from .bitkernel import bench_throughput

_ATTACK_SCHEMA = {
    "type": "object", "additionalProperties": False,
    "required": ["method"],
    "properties": {
        "method": {"type": "string"},
        "norm": {"enum": ["linf", "l2"]},
        "epsilon": {"type": "number"},
        "steps": {"type": "integer"},
        "query_budget": {"type": "integer"},
        "seed": {"type": "integer"},
        "constants": {"type": "object"},
    },
}

CONFIG_SCHEMA = {
    "type": "object", "additionalProperties": False,
    "required": ["dataset"],
    "properties": {
        "dataset": {
            "type": "object", "additionalProperties": False,
            "required": ["source"],
            "properties": {
                "source": {"enum": ["cifar10", "synth", "tensor_blob"]},
                "dir": {"type": "string"},
                "manifest": {"type": "string"},
                "split": {"enum": ["train", "test"]},
                "subsample": {"type": "integer"},
                "seed": {"type": "integer"},
                "num_classes": {"type": "integer"},
                "n": {"type": "integer"},
                "hw": {"type": "array", "items": {"type": "integer"}},
                "channels": {"type": "integer"},
                "noise": {"type": "number"},
                "template_seed": {"type": "integer"},
            },
        },
        "model": {
            "type": "object", "additionalProperties": False,
            "properties": {
                "architecture": {"type": "string"},
                "width": {"type": "number"},
                "num_classes": {"type": "integer"},
                "input_hw": {"type": "array", "items": {"type": "integer"}},
                "in_channels": {"type": "integer"},
                "scheme": {"enum": [s.value for s in SchemeId]},
                "checkpoint": {"type": "string"},
                "init_seed": {"type": "integer"},
            },
        },
        "models": {"type": "array",
                   "items": {"type": "object", "additionalProperties": False,
                             "required": ["checkpoint"],
                             "properties": {"checkpoint": {"type": "string"},
                                            "name": {"type": "string"}}}},
        "train": {
            "type": "object", "additionalProperties": False,
            "properties": {
                "epochs": {"type": "integer"},
                "optimizer": {"enum": ["adam", "sgd"]},
                "schedule": {"enum": ["multistep", "cosine"]},
                "lr": {"type": "number"},
                "lr_steps": {"type": "array", "items": {"type": "integer"}},
                "warmup_epochs": {"type": "integer"},
                "weight_decay": {"type": "number"},
                "batch_size": {"type": "integer"},
                "seed": {"type": "integer"},
                "augment": {"type": "boolean"},
                "eval_n": {"type": "integer"},
            },
        },
        "attacks": {"type": "array", "items": _ATTACK_SCHEMA},
        "defense": {
            "type": "object", "additionalProperties": False,
            "required": ["defense"],
            "properties": {
                "defense": {"enum": ["pgd_at", "trades", "jpeg", "bit_red",
                                     "rp", "identity"]},
                "epsilon": {"type": "number"},
                "steps": {"type": "integer"},
                "beta": {"type": "number"},
                "quality": {"type": "integer"},
                "bits": {"type": "integer"},
                "pad_range": {"type": "integer"},
                "seed": {"type": "integer"},
            },
        },
        "eps_grid": {"type": "array", "items": {"type": "number"}},
        "cam_images": {"type": "integer"},
        "output_dir": {"type": "string"},
    },
}


class ConfigFileError(ValueError):
    pass


def load_config(path):
    if not os.path.exists(path):
        raise ConfigFileError(f"config file not found: {path}")
    with open(path) as f:
        cfg = json.load(f)
    errors = sorted(Draft202012Validator(CONFIG_SCHEMA).iter_errors(cfg),
                    key=lambda e: list(e.path))
    if errors:
        msgs = "; ".join(f"{'/'.join(map(str, e.path)) or '<root>'}: {e.message}"
                         for e in errors)
        raise ConfigFileError(f"invalid config {path}: {msgs}")
    return cfg


def apply_seed(cfg, seed):
    """Top-level seed derivation: dataset=seed, train=seed+1, attacks=seed+2."""
    if seed is None:
        return cfg
    cfg.setdefault("dataset", {})["seed"] = seed
    cfg.setdefault("train", {})["seed"] = seed + 1
    for a in cfg.get("attacks", []):
        a["seed"] = seed + 2
    if "defense" in cfg:
        cfg["defense"]["seed"] = seed + 3
    return cfg


def build_dataset(dcfg):
    src = dcfg["source"]
    if src == "cifar10":
        if "dir" not in dcfg:
            raise ConfigFileError("cifar10 dataset needs 'dir'")
        ds = E.load_cifar10(dcfg["dir"], dcfg.get("split", "test"))
    elif src == "tensor_blob":
        ds = E.load_tensor_blob(dcfg["manifest"])
    else:
        ds = E.synth_dataset(
            num_classes=dcfg.get("num_classes", 10),
            n=dcfg.get("n", 1000),
            hw=tuple(dcfg.get("hw", [16, 16])),
            channels=dcfg.get("channels", 3),
            seed=dcfg.get("seed", 0),
            noise=dcfg.get("noise", 0.1),
            template_seed=dcfg.get("template_seed", 1234),
            split=dcfg.get("split", "train"),
        )
    if "subsample" in dcfg:
        ds = E.subsample(ds, dcfg["subsample"], dcfg.get("seed", 0))
    return ds


def build_or_load_model(mcfg):
    if "checkpoint" in mcfg:
        model, _ = M.load_checkpoint(mcfg["checkpoint"])
        return model
    fields = {k: v for k, v in mcfg.items() if k not in ("checkpoint", "init_seed")}
    if "input_hw" in fields:
        fields["input_hw"] = tuple(fields["input_hw"])
    return M.build_model(M.ModelConfig(**fields), mcfg.get("init_seed", 0))


def attack_spec_from(acfg) -> AttackSpec:
    return AttackSpec(
        method=acfg["method"], norm=acfg.get("norm", "linf"),
        epsilon=acfg.get("epsilon", 0.03), steps=acfg.get("steps", 20),
        query_budget=acfg.get("query_budget", 10000),
        seed=acfg.get("seed", 0), constants=acfg.get("constants", {}))


def train_config_from(tcfg) -> M.TrainConfig:
    fields = {k: v for k, v in tcfg.items() if k != "eval_n"}
    if "lr_steps" in fields:
        fields["lr_steps"] = tuple(fields["lr_steps"])
    return M.TrainConfig(**fields)


def _outdir(cfg, args):
    out = args.out or cfg.get("output_dir", "out")
    os.makedirs(out, exist_ok=True)
    return out


def _write_history_csv(history, path):
    cols = [k for k in ("train_loss", "train_acc", "eval_acc", "lr")
            if history.get(k)]
    with open(path, "w") as f:
        f.write("epoch," + ",".join(cols) + "\n")
        for i in range(len(history["train_loss"])):
            f.write(str(i) + "," + ",".join(f"{history[c][i]:.10g}" for c in cols)
                    + "\n")


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_train(cfg, args):
    out = _outdir(cfg, args)
    ds = build_dataset(cfg["dataset"])
    model = build_or_load_model(cfg.get("model", {}))
    tc = train_config_from(cfg.get("train", {}))
    history = M.train(model, ds, tc, log=print if args.verbose else None)
    ckpt = os.path.join(out, "model.ckpt")
    M.save_checkpoint(model, ckpt, class_names=ds.class_names,
                      extra={"history_epochs": tc.epochs})
    _write_history_csv(history, os.path.join(out, "history.csv"))
    print(f"wrote {ckpt} and history.csv")
    return [ckpt, os.path.join(out, "history.csv")]


def cmd_attack(cfg, args):
    out = _outdir(cfg, args)
    ds = build_dataset(cfg["dataset"])
    model = build_or_load_model(cfg.get("model", {}))
    if "defense" in cfg and cfg["defense"]["defense"] in ("jpeg", "bit_red",
                                                          "rp", "identity"):
        model = D.defended_model(model, D.DefenseSpec(**cfg["defense"]))
    clean = E.clean_accuracy(model, ds)
    report = {"config": cfg, "clean_accuracy": clean, "attacks": {}, "rs": {}}
    fam_vals = {}
    for acfg in cfg.get("attacks", []):
        spec = attack_spec_from(acfg)
        try:
            acc_star = E.adv_accuracy(model, ds, spec, workers=args.workers)
        except Exception as err:
            raise RuntimeError(f"attack {spec.method!r} failed: {err}") from err
        an = E.acc_norm(acc_star, clean)
        report["attacks"][spec.method] = {
            "epsilon": spec.epsilon, "norm": spec.norm,
            "acc_star": acc_star, "acc_norm": an}
        fam_vals.setdefault(FAMILY.get(spec.method, "other"), []).append(an)
    report["rs"] = {fam: E.robustness_score(v) for fam, v in fam_vals.items()}
    path = os.path.join(out, "report.json")
    E.report_to_json(report, path)
    print(f"wrote {path}")
    return [path]


def cmd_curve(cfg, args):
    out = _outdir(cfg, args)
    ds = build_dataset(cfg["dataset"])
    model = build_or_load_model(cfg.get("model", {}))
    grid = cfg.get("eps_grid", [0.0, 0.01, 0.03, 0.06])
    written = []
    for acfg in cfg.get("attacks", []):
        spec = attack_spec_from(acfg)
        points = E.curve(model, ds, spec, grid, workers=args.workers)
        path = os.path.join(out, f"curve_{spec.method}.csv")
        E.curve_to_csv(points, path)
        written.append(path)
        print(f"wrote {path}")
    return written


def cmd_heatmap(cfg, args):
    out = _outdir(cfg, args)
    ds = build_dataset(cfg["dataset"])
    entries = cfg.get("models", [])
    if len(entries) < 1:
        raise ConfigFileError("heatmap needs a 'models' list of checkpoints")
    models = {}
    for e in entries:
        model, meta = M.load_checkpoint(e["checkpoint"])
        name = e.get("name") or meta["config"]["scheme"]
        models[name] = model
    spec = attack_spec_from(cfg.get("attacks", [{"method": "si_ni_fgsm"}])[0])
    names, mat = E.transfer_heatmap(models, ds, spec, workers=args.workers)
    path = os.path.join(out, "heatmap.csv")
    E.heatmap_to_csv(names, mat, path)
    print(f"wrote {path}")
    return [path]


def cmd_defend(cfg, args):
    out = _outdir(cfg, args)
    if "defense" not in cfg:
        raise ConfigFileError("defend needs a 'defense' block")
    dspec = D.DefenseSpec(**cfg["defense"])
    if dspec.defense in ("pgd_at", "trades"):
        ds = build_dataset(cfg["dataset"])
        model = build_or_load_model(cfg.get("model", {}))
        tc = train_config_from(cfg.get("train", {}))
        loss_fn = D.pgd_at_loss(dspec) if dspec.defense == "pgd_at" \
            else D.trades_loss(dspec)
        history = M.train(model, ds, tc, loss_fn=loss_fn,
                          log=print if args.verbose else None)
        ckpt = os.path.join(out, f"model_{dspec.defense}.ckpt")
        M.save_checkpoint(model, ckpt, class_names=ds.class_names)
        _write_history_csv(history, os.path.join(out, "history.csv"))
        print(f"wrote {ckpt}")
        return [ckpt]
    # input transforms: evaluate the wrapped model like cmd_attack
    return cmd_attack(cfg, args)


def cmd_cam(cfg, args):
    out = _outdir(cfg, args)
    ds = build_dataset(cfg["dataset"])
    model = build_or_load_model(cfg.get("model", {}))
    n = min(cfg.get("cam_images", 16), len(ds))
    cams = np.stack([E.compute_cam(model, ds.images[i], int(ds.labels[i]))
                     for i in range(n)])
    npy = os.path.join(out, "cams.npy")
    np.save(npy, cams)
    csv = os.path.join(out, "cam_concentration.csv")
    with open(csv, "w") as f:
        f.write("index,label,roi_concentration\n")
        for i in range(n):
            f.write(f"{i},{int(ds.labels[i])},"
                    f"{E.roi_concentration(cams[i]):.10g}\n")
    print(f"wrote {npy} and {csv}")
    return [npy, csv]


def cmd_bench(cfg, args):
    out = _outdir(cfg or {}, args)
    report = bench_throughput()
    path = os.path.join(out, "bench.csv")
    with open(path, "w") as f:
        f.write("inner_dim,packed_ops_per_s,float_ops_per_s,speedup\n")
        for r in report:
            f.write(f"{r['inner_dim']},{r['packed_ops_per_s']:.6g},"
                    f"{r['float_ops_per_s']:.6g},{r['speedup']:.6g}\n")
    E.report_to_json(report, os.path.join(out, "bench.json"))
    print(f"wrote {path}")
    return [path]


def cmd_report(cfg, args):
    """Merge attack report JSONs into one."""
    out = _outdir(cfg or {}, args)
    merged = {"reports": []}
    for path in args.inputs:
        with open(path) as f:
            merged["reports"].append(json.load(f))
    path = os.path.join(out, "merged_report.json")
    E.report_to_json(merged, path)
    print(f"wrote {path}")
    return [path]


COMMANDS = {
    "train": cmd_train, "attack": cmd_attack, "curve": cmd_curve,
    "heatmap": cmd_heatmap, "defend": cmd_defend, "cam": cmd_cam,
    "bench": cmd_bench, "report": cmd_report,
}


def main(argv=None):
    ap = argparse.ArgumentParser(prog="binrobust",
                                 description="Binarized-network robustness bench")
    ap.add_argument("command", choices=sorted(COMMANDS))
    ap.add_argument("--config", default=None, help="experiment config JSON")
    ap.add_argument("--seed", type=int, default=None,
                    help="top-level seed overriding per-block seeds")
    ap.add_argument("--workers", type=int, default=1)
    ap.add_argument("--out", default=None, help="output directory")
    ap.add_argument("--deterministic", action="store_true",
                    help="pin a canonical serial execution order")
    ap.add_argument("--verbose", action="store_true")
    ap.add_argument("inputs", nargs="*", help="input files (report command)")
    args = ap.parse_args(argv)
    if args.deterministic:
        args.workers = 1
    try:
        cfg = load_config(args.config) if args.config else {}
        cfg = apply_seed(cfg, args.seed)
        if args.command not in ("bench", "report") and "dataset" not in cfg:
            raise ConfigFileError(f"command {args.command!r} requires --config "
                                  "with a dataset block")
        COMMANDS[args.command](cfg, args)
    except Exception as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
