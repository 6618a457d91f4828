"""Command-line entry point: ``quadranet <command> [options]``.

Commands
--------
xor        train a quadratic and a linear neuron on generalized XOR, emit a decision-surface grid
count      parameters, MACs, intermediate states and proxy latency of a network (or --compare blocks)
train      train a network from a config, write metrics CSV and a weight snapshot
evaluate   reload a snapshot and report its accuracy on the configured validation split
search     latency-constrained architecture search, write the result JSON
gradcheck  finite-difference check of every op and block kind

Exit codes: 0 success, 1 check failure, 2 input error, 3 infeasible search.

Config files are JSON objects with optional sections ``network``, ``train``,
``search`` and ``data``; unknown keys are rejected with their JSON path.
"""
from __future__ import annotations

import argparse
import io
import json
import sys
from pathlib import Path

import numpy as np

from . import costmodel, data, nas, quadneuron
from . import network as netmod
from . import train as trainmod
from .config import ConfigError, check_keys, get_float, get_int, get_str, load_json

EXIT_OK, EXIT_FAIL, EXIT_INPUT, EXIT_INFEASIBLE = 0, 1, 2, 3

# toy-scale defaults used when a config omits a section
DEFAULT_NETWORK = {"base_channels": 8, "depths": [1, 1, 1, 1],
                   "block": {"kind": "quadra", "kernel": 7, "expansion": 4},
                   "num_classes": 4, "input_size": 32, "in_channels": 3}
DEFAULT_DATA = {"generator": "interaction", "n_train": 2000, "n_val": 500, "seed": 0}
DEFAULT_SEARCH = {"budget": None, "population": 16, "sample": 4, "generations": 30,
                  "slots": [0, 1, 1, 0], "kernels": [3, 5, 7], "expansions": [2, 4],
                  "train_steps": 200, "n_train": 400, "n_val": 200, "batch_size": 32, "lr": 2e-3}
DATA_KEYS = {"generator", "n_train", "n_val", "seed", "noise", "n_per_quadrant", "spread",
             "train_images", "train_labels", "val_images", "val_labels", "num_classes"}
SEARCH_KEYS = set(DEFAULT_SEARCH) | {"seed"}
CONFIG_SECTIONS = {"network", "train", "search", "data"}


class InputError(Exception):
    pass


# ---------------------------------------------------------------------------
# config

def load_config(path) -> dict:
    if path is None:
        return {}
    cfg = load_json(path)
    check_keys(cfg, CONFIG_SECTIONS, "")
    return cfg


def network_spec(cfg: dict, args) -> netmod.NetworkSpec:
    if getattr(args, "preset", None):
        try:
            spec = netmod.preset(args.preset)
        except ValueError as exc:
            raise InputError(str(exc)) from None
        if "network" in cfg:
            spec = netmod.NetworkSpec.from_dict({"preset": args.preset, **cfg["network"]}, "network")
    else:
        section = cfg.get("network", DEFAULT_NETWORK)
        spec = netmod.NetworkSpec.from_dict(section, "network")
    if getattr(args, "input_size", None):
        spec = netmod.NetworkSpec(spec.base_channels, spec.depths, spec.block, spec.slots,
                                  spec.num_classes, args.input_size, spec.in_channels)
    return spec


def optim_config(cfg: dict, args) -> trainmod.OptimConfig:
    section = dict(cfg.get("train", {}))
    oc = trainmod.OptimConfig.from_dict(section, "train")
    if args.seed is not None:
        oc.seed = args.seed
    if getattr(args, "clip_mode", None):
        oc.clip_mode = args.clip_mode
    if getattr(args, "epochs", None) is not None:
        oc.epochs = args.epochs
    return oc


def load_data(cfg: dict, spec: netmod.NetworkSpec):
    section = cfg.get("data", DEFAULT_DATA)
    check_keys(section, DATA_KEYS, "data")
    gen = get_str(section, "generator", "data", "interaction", ("interaction", "xor_images", "idx"))
    if gen == "idx":
        for key in ("train_images", "train_labels", "val_images", "val_labels"):
            get_str(section, key, "data")
        nc = get_int(section, "num_classes", "data", spec.num_classes, 1)
        try:
            train = data.read_idx(section["train_images"], section["train_labels"], nc)
            val = data.read_idx(section["val_images"], section["val_labels"], nc)
        except (OSError, data.IdxError, ValueError) as exc:
            raise InputError(f"data: {exc}") from None
        return train, val
    seed = get_int(section, "seed", "data", 0, 0)
    if gen == "xor_images":
        n = get_int(section, "n_per_quadrant", "data", 25, 1)
        spread = get_float(section, "spread", "data", 2.0, 1e-9)
        ds = data.gen_xor_images(n, spec.input_size, spread, seed)
        return ds.split_stride(5)
    n_train = get_int(section, "n_train", "data", 2000, 1)
    n_val = get_int(section, "n_val", "data", 500, 1)
    noise = get_float(section, "noise", "data", 0.05, 0.0)
    ds = data.gen_interaction_images(n_train + n_val, spec.input_size, spec.num_classes, seed,
                                     spec.in_channels, noise)
    idx = np.arange(len(ds))
    return ds.subset(idx[:n_train], "train"), ds.subset(idx[n_train:], "val")


def _check_data_fits(spec, train):
    expected = (spec.in_channels, spec.input_size, spec.input_size)
    if tuple(train.inputs.shape[1:]) != expected:
        raise InputError(f"data: inputs have shape {train.inputs.shape[1:]}, network expects {expected}")
    if train.num_classes > spec.num_classes:
        raise InputError(f"data: {train.num_classes} classes but network.num_classes={spec.num_classes}")


def _out_dir(args) -> Path:
    out = Path(args.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    return out


# ---------------------------------------------------------------------------
# commands

def cmd_xor(args) -> int:
    ds = data.gen_xor(args.n_per_quadrant, args.spread, args.seed)
    y = data.xor_signed_labels(ds)
    quad, qacc = quadneuron.train_xor("quadratic", ds.inputs, y, args.steps, args.lr, args.seed)
    _, lacc = quadneuron.train_xor("linear", ds.inputs, y, args.steps, args.lr, args.seed)
    res = args.resolution
    axis = np.linspace(-args.spread, args.spread, res)
    gx, gy = np.meshgrid(axis, axis)
    grid = np.stack([gx.ravel(), gy.ravel()], axis=1)
    values = quadneuron.forward_lowrank(quad, grid)
    buf = io.StringIO()
    buf.write(f"# seed={args.seed}\n# quadratic_acc={qacc!r}\n# linear_acc={lacc!r}\nx,y,value\n")
    for (a, b), v in zip(grid, values):
        buf.write(f"{float(a)!r},{float(b)!r},{float(v)!r}\n")
    if args.out:
        path = _out_dir(args) / "xor_grid.csv"
        path.write_text(buf.getvalue())
        print(f"# seed={args.seed}\nquadratic_acc={qacc}\nlinear_acc={lacc}\ngrid={path}")
    else:
        sys.stdout.write(buf.getvalue())
    return EXIT_OK if qacc == 1.0 and lacc < 1.0 else EXIT_FAIL


def cmd_count(args) -> int:
    seed = 0 if args.seed is None else args.seed
    bpe = args.bytes or 1
    if args.compare:
        size = args.input_size or 14
        reports = costmodel.compare_blocks(size, size, args.channels, window=args.window)
        if args.format == "table":
            print(f"# seed={seed}")
            unit = "bytes" if args.bytes else "elems"
            print(f"{'block':<8}{'params':>12}{'MACs':>14}{'fwd ' + unit:>16}{'bwd ' + unit:>16}")
            for kind, r in reports.items():
                print(f"{kind:<8}{r.params:>12d}{r.macs:>14d}{r.fwd_states * bpe:>16d}"
                      f"{r.bwd_retained_states * bpe:>16d}")
        else:
            out = {"seed": seed, "shape": [size, size, args.channels], "window": args.window,
                   "blocks": {k: (r.scaled(bpe) if args.bytes else r.to_dict(False)) for k, r in reports.items()}}
            print(json.dumps(out, indent=2))
        return EXIT_OK
    spec = network_spec(load_config(args.config), args)
    rep = costmodel.report(spec)
    if args.format == "table":
        print(f"# seed={seed}")
        print(rep.to_table(bpe))
    else:
        out = {"seed": seed, "spec": spec.to_dict(), **(rep.scaled(bpe) if args.bytes else rep.to_dict(False))}
        print(json.dumps(out, indent=2))
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    spec = network_spec(cfg, args)
    oc = optim_config(cfg, args)
    train, val = load_data(cfg, spec)
    _check_data_fits(spec, train)
    net = netmod.build(spec, oc.seed)
    history = trainmod.fit(net, train, val, oc)
    out = _out_dir(args)
    (out / "metrics.csv").write_bytes(trainmod.metrics_csv(history, oc.seed).encode("ascii"))
    netmod.save_snapshot(net, out / "model.qnet", oc.seed, {"train": oc.to_dict(), "data": cfg.get("data", DEFAULT_DATA)})
    last = history[-1] if history else {"loss": float("nan"), "train_acc": float("nan"), "val_acc": float("nan")}
    print(f"# seed={oc.seed}")
    print(f"epochs={len(history)} loss={last['loss']:.6f} train_acc={last['train_acc']:.4f} "
          f"val_acc={last['val_acc']:.4f}")
    print(f"metrics={out / 'metrics.csv'}\nsnapshot={out / 'model.qnet'}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    try:
        net, header = netmod.load_snapshot(args.snapshot)
    except (OSError, netmod.SnapshotError) as exc:
        raise InputError(str(exc)) from None
    cfg = load_config(args.config) if args.config else {"data": header["meta"].get("data", DEFAULT_DATA)}
    _, val = load_data(cfg, net.spec)
    _check_data_fits(net.spec, val)
    acc = trainmod.accuracy(net, val)
    print(f"# seed={header.get('seed')}")
    print(f"val_acc={acc!r}")
    return EXIT_OK


def search_space(cfg: dict, args) -> tuple[nas.SearchSpace, dict]:
    section = {**DEFAULT_SEARCH, **cfg.get("search", {})}
    check_keys(cfg.get("search", {}), SEARCH_KEYS, "search")
    spec = network_spec({"network": cfg.get("network", DEFAULT_NETWORK)}, args)
    for key in ("slots", "kernels", "expansions"):
        value = section[key]
        if not isinstance(value, list) or not all(isinstance(v, int) and not isinstance(v, bool) for v in value):
            raise ConfigError(f"search.{key}", "expected a list of integers")
    try:
        space = nas.SearchSpace(spec, tuple(section["slots"]), tuple(section["kernels"]),
                                tuple(section["expansions"]))
    except ValueError as exc:
        raise ConfigError("search", str(exc)) from None
    return space, section


def cmd_search(args) -> int:
    cfg = load_config(args.config)
    space, section = search_space(cfg, args)
    seed = args.seed if args.seed is not None else section.get("seed", 0)
    budget = args.budget if args.budget is not None else section["budget"]
    budget = float("inf") if budget is None else float(budget)
    for key in ("population", "sample", "generations", "train_steps", "n_train", "n_val", "batch_size"):
        get_int(section, key, "search", minimum=0 if key in ("generations", "train_steps") else 1)
    ev_cfg = nas.EvalConfig(section["train_steps"], section["batch_size"], get_float(section, "lr", "search"),
                            section["n_train"], section["n_val"], data_seed=seed, seed=seed)
    try:
        result = nas.search(space, budget, nas.Evaluator(space, ev_cfg), seed, section["population"],
                            section["sample"], section["generations"])
    except nas.InfeasibleBudgetError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    out = _out_dir(args)
    doc = result.to_dict(space)
    doc["budget"] = budget if budget != float("inf") else None
    doc["eval"] = ev_cfg.to_dict()
    (out / "search.json").write_text(json.dumps(doc, indent=2) + "\n")
    print(f"# seed={seed}")
    print(f"best={doc['genome']} fitness={result.best.fitness:.4f} "
          f"proxy_latency={result.best.cost.proxy_latency:.6g} evaluations={result.evaluations}")
    print(f"result={out / 'search.json'}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from . import gradcheck
    seed = 0 if args.seed is None else args.seed
    results = gradcheck.run_suite(seeds=tuple(range(seed, seed + args.seeds)))
    print(f"# seed={seed}")
    for r in results:
        if args.verbose or not r.passed:
            print(f"{'ok  ' if r.passed else 'FAIL'} {r.name} seed={r.seed} rel_err={r.max_relative_error:.3e}")
    worst = max(r.max_relative_error for r in results)
    failed = sum(not r.passed for r in results)
    print(f"checks={len(results)} failed={failed} max_relative_error={worst:.3e} tolerance={gradcheck.TOLERANCE:g}")
    return EXIT_OK if failed == 0 else EXIT_FAIL


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="quadranet", description=__doc__.split("\n\n")[0],
                                     formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, seed_default=None):
        p.add_argument("--seed", type=int, default=seed_default, help="RNG seed (written into every artifact)")
        p.add_argument("--out", default=None, help="output directory")

    p = sub.add_parser("xor", help="quadratic vs linear neuron on generalized XOR",
                       formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    common(p, 0)
    p.add_argument("--steps", type=int, default=2000)
    p.add_argument("--lr", type=float, default=0.05)
    p.add_argument("--n-per-quadrant", type=int, default=10)
    p.add_argument("--spread", type=float, default=2.0)
    p.add_argument("--resolution", type=int, default=41, help="grid points per axis")
    p.set_defaults(func=cmd_xor)

    p = sub.add_parser("count", help="analytic cost report",
                       formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    common(p)
    p.add_argument("--config", help="JSON config with a 'network' section")
    p.add_argument("--preset", help=f"named network, one of {', '.join(netmod.preset_names())}")
    p.add_argument("--input-size", type=int, default=None, help="input resolution (network) or H=W (--compare)")
    p.add_argument("--bytes", type=int, nargs="?", const=8, default=None,
                   help="report states in bytes at this many bytes per element (bare flag: 8, float64)")
    p.add_argument("--compare", action="store_true", help="four-block comparison at --input-size x --channels")
    p.add_argument("--channels", type=int, default=64, help="channels for --compare")
    p.add_argument("--window", type=int, default=7, help="attention window for --compare")
    p.add_argument("--format", choices=("json", "table"), default="json")
    p.set_defaults(func=cmd_count)

    p = sub.add_parser("train", help="train from a config",
                       formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    common(p)
    p.add_argument("--config", help="JSON config (network/train/data sections)")
    p.add_argument("--preset", help="named network instead of the config's network section")
    p.add_argument("--input-size", type=int, default=None)
    p.add_argument("--epochs", type=int, default=None, help="override train.epochs")
    p.add_argument("--clip-mode", choices=("value", "norm"), default=None, help="override train.clip_mode")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="accuracy of a saved snapshot",
                       formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    common(p)
    p.add_argument("snapshot", help="path to a .qnet snapshot")
    p.add_argument("--config", help="config whose data section to evaluate on (default: the training data)")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("search", help="latency-constrained architecture search",
                       formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    common(p)
    p.add_argument("--config", help="JSON config (network/search sections)")
    p.add_argument("--preset", help="named skeleton network")
    p.add_argument("--input-size", type=int, default=None)
    p.add_argument("--budget", type=float, default=None, help="proxy-latency budget (default: unlimited)")
    p.set_defaults(func=cmd_search)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite",
                       formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    common(p, 0)
    p.add_argument("--seeds", type=int, default=5, help="number of consecutive seeds to check")
    p.add_argument("--verbose", action="store_true")
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: config {exc}", file=sys.stderr)
    except (InputError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
    return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
