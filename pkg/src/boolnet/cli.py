"""Command line interface.

    boolnet train   --preset dense-mnist-desk --data-dir data --out runs/a
    boolnet compile runs/a/best.npz --out model.bnet
    boolnet prune   model.bnet --out model.pruned.bnet
    boolnet eval    model.bnet --data-dir data
    boolnet bench   model.pruned.bnet
    boolnet plot    runs/a/metrics.jsonl --out curves.png

Exit codes: 0 success, 1 user error, 2 internal abort.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import circuit as circ
from . import data as data_mod
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .models import PRESETS, architecture_from_run, build_network, describe, discretized_copy, restore_network
from .training import TrainConfig, Trainer, TrainingAborted, evaluate, train

log = logging.getLogger("boolnet")

EXIT_OK, EXIT_USER, EXIT_ABORT = 0, 1, 2

RUN_DEFAULTS = {
    "dataset": "mnist",
    "arch": "dense",
    "k": None,
    "widths": None,
    "layers": None,
    "thresholds": 1,
    "tau": 10.0,
    "K": 16,
    "channels_per_kernel": 1,
    "init": None,
    "learning_rate": 0.01,
    "batch_size": 128,
    "total_steps": 1000,
    "eval_interval": 1000,
    "rho": 0.99,
    "epsilon": 5e-4,
    "patience": 100,
    "discretize_patience": 200,
    "resample": True,
    "resample_until": None,
    "adaptive_discretization": False,
    "augment": True,
    "seed": 0,
    "val_size": 5000,
    "select_on": "val",
    "train_limit": None,
    "data_dir": None,
    "out": "runs/latest",
}

TRAIN_KEYS = ("learning_rate", "batch_size", "total_steps", "eval_interval", "rho", "epsilon",
              "patience", "discretize_patience", "resample", "resample_until",
              "adaptive_discretization", "augment", "thresholds", "seed")


class UserError(Exception):
    pass


def resolve_run(config_path=None, preset=None, overrides=None) -> dict:
    """Merge defaults, a preset, a JSON config file and CLI overrides, in
    that order. Unknown keys are rejected."""
    run = dict(RUN_DEFAULTS)
    sources = []
    if config_path:
        with open(config_path, encoding="utf-8") as f:
            file_cfg = json.load(f)
        preset = file_cfg.pop("preset", None) or preset
        sources.append(file_cfg)
    if preset:
        if preset not in PRESETS:
            raise UserError(f"unknown preset {preset!r}; choose from {', '.join(PRESETS)}")
        sources.insert(0, PRESETS[preset])
    sources.append({k: v for k, v in (overrides or {}).items() if v is not None})
    for src in sources:
        unknown = set(src) - set(RUN_DEFAULTS)
        if unknown:
            raise UserError(f"unknown configuration keys: {', '.join(sorted(unknown))}")
        run.update(src)
    if run["select_on"] not in ("val", "test"):
        raise UserError("select_on must be 'val' or 'test'")
    if run["dataset"] not in data_mod.DATASET_LOADERS:
        raise UserError(f"unknown dataset {run['dataset']!r}")
    return run


def train_config(run: dict) -> TrainConfig:
    kw = {k: run[k] for k in TRAIN_KEYS}
    return TrainConfig(dataset=run["dataset"], **kw)


def _load_split(run, split):
    root = data_mod.data_root(run.get("data_dir"))
    try:
        return data_mod.DATASET_LOADERS[run["dataset"]](root, split)
    except FileNotFoundError as e:
        raise UserError(str(e)) from None


def cmd_train(args) -> int:
    overrides = {"seed": args.seed, "total_steps": args.steps, "data_dir": args.data_dir, "out": args.out}
    if args.no_aug:
        overrides["augment"] = False
    if args.no_resample:
        overrides["resample"] = False
    run = resolve_run(args.config, args.preset, overrides)
    out = Path(run["out"])
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "config.json", "w", encoding="utf-8") as f:
        json.dump(run, f, indent=2, sort_keys=True)
        f.write("\n")

    cfg = train_config(run)
    train_set = _load_split(run, "train")
    rng = np.random.default_rng(np.random.SeedSequence(run["seed"]).spawn(2)[1])
    if run["train_limit"]:
        train_set = train_set.subset(np.arange(min(run["train_limit"], len(train_set))))
    if run["select_on"] == "test":
        val_set = _load_split(run, "test")
    else:
        train_set, val_set = train_set.split(min(run["val_size"], len(train_set) // 2), rng)

    input_shape, layers = architecture_from_run(run)
    init_rng = np.random.default_rng(np.random.SeedSequence(run["seed"]).spawn(2)[0])
    network = build_network(input_shape, layers, init_rng, run["init"])
    trainer = Trainer(network, cfg)

    metrics = open(out / "metrics.jsonl", "w", encoding="utf-8")

    def emit(rec):
        metrics.write(json.dumps(rec, sort_keys=True) + "\n")
        metrics.flush()
        log.info("step %d loss %.4f relaxed %.4f discretized %.4f",
                 rec["step"], rec["loss"], rec["relaxed_acc"], rec["discretized_acc"])

    try:
        result = train(network, train_set, val_set, cfg, on_record=emit, trainer=trainer)
    finally:
        metrics.close()
    save_checkpoint(out / "last.npz", network, trainer, {"run": run})
    best = restore_network(network.input_shape, describe(network), result.best_state)
    save_checkpoint(out / "best.npz", best, None, {"run": run, "best_step": result.best_step,
                                                   "best_discretized_acc": result.best_accuracy})
    print(f"best_step={result.best_step} best_discretized_acc={result.best_accuracy:.4f}")
    return EXIT_OK


def _load_artifact(path):
    """(circuit, network or None, run metadata)."""
    path = Path(path)
    if path.suffix == ".npz":
        network, _, extra = load_checkpoint(path)
        return circ.compile_network(discretized_copy(network)), network, extra.get("run", {})
    try:
        return circ.import_netlist(path), None, {}
    except circ.NetlistError as e:
        raise UserError(f"{path}: {e}") from None


def cmd_compile(args) -> int:
    network, _, _ = load_checkpoint(args.checkpoint)
    c = circ.compile_network(discretized_copy(network))
    circ.export_netlist(c, args.out)
    print(f"neurons={c.num_gates}")
    return EXIT_OK


def cmd_prune(args) -> int:
    c, _, _ = _load_artifact(args.netlist)
    pruned, bops = circ.prune(c)
    verdict = circ.check_equivalence(c, pruned, args.samples, np.random.default_rng(args.seed))
    if not verdict.equivalent:
        print(f"error: pruned circuit differs on input {verdict.counterexample.tolist()}", file=sys.stderr)
        return EXIT_ABORT
    circ.export_netlist(pruned, args.out)
    print(circ.CircuitMetrics(c.num_gates, bops).report())
    return EXIT_OK


def cmd_eval(args) -> int:
    c, network, run = _load_artifact(args.artifact)
    run = {**RUN_DEFAULTS, **run}
    if args.dataset:
        run["dataset"] = args.dataset
    if args.thresholds:
        run["thresholds"] = args.thresholds
    if args.data_dir:
        run["data_dir"] = args.data_dir
    ds = _load_split(run, args.split)
    bits = data_mod.encode(ds.images, run["thresholds"]).reshape(len(ds), -1)
    if bits.shape[1] != c.num_inputs:
        raise UserError(f"encoded inputs have {bits.shape[1]} bits, circuit expects {c.num_inputs}")
    _, preds = circ.predict_bitpacked(c, bits)
    acc = float(np.mean(preds == ds.labels))
    C = c.num_classes
    confusion = np.zeros((C, C), dtype=np.int64)
    np.add.at(confusion, (ds.labels, preds), 1)
    result = {"discretized_acc": acc}
    if network is not None:
        x = bits.reshape(len(ds), *network.input_shape)
        relaxed = evaluate(network, x, ds.labels, "relaxed")
        result.update(relaxed_acc=relaxed, gap=relaxed - acc)
    for k, v in result.items():
        print(f"{k}={v:.4f}")
    print("confusion=" + json.dumps(confusion.tolist()))
    return EXIT_OK


def cmd_bench(args) -> int:
    c, _, _ = _load_artifact(args.netlist)
    res = circ.benchmark(c, args.samples, args.scalar_samples, np.random.default_rng(args.seed))
    print(json.dumps({"gates": c.num_gates, **{k: round(v, 3) for k, v in res.items()}}, sort_keys=True))
    return EXIT_OK


def cmd_plot(args) -> int:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    recs = [json.loads(line) for line in open(args.metrics, encoding="utf-8") if line.strip()]
    if not recs:
        raise UserError(f"{args.metrics} holds no records")
    steps = [r["step"] for r in recs]
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(10, 4))
    ax1.plot(steps, [r["relaxed_acc"] for r in recs], label="relaxed")
    ax1.plot(steps, [r["discretized_acc"] for r in recs], label="discretized")
    ax1.set_xlabel("step")
    ax1.set_ylabel("validation accuracy")
    ax1.legend()
    ent = np.array([r["entropy"] for r in recs])
    for j in range(ent.shape[1]):
        ax2.plot(steps, ent[:, j], label=f"logic layer {j}")
    ax2.set_xlabel("step")
    ax2.set_ylabel("mean weight entropy")
    ax2.legend(fontsize="small")
    fig.tight_layout()
    fig.savefig(args.out, dpi=120)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="boolnet", description=__doc__.split("\n")[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a network")
    t.add_argument("--config")
    t.add_argument("--preset", choices=sorted(PRESETS))
    t.add_argument("--data-dir")
    t.add_argument("--seed", type=int)
    t.add_argument("--steps", type=int)
    t.add_argument("--no-aug", action="store_true")
    t.add_argument("--no-resample", action="store_true")
    t.add_argument("--out")
    t.set_defaults(func=cmd_train)

    c = sub.add_parser("compile", help="compile a checkpoint into a netlist")
    c.add_argument("checkpoint")
    c.add_argument("--out", required=True)
    c.set_defaults(func=cmd_compile)

    pr = sub.add_parser("prune", help="prune a netlist and report #neurons / #BOPs")
    pr.add_argument("netlist")
    pr.add_argument("--out", required=True)
    pr.add_argument("--samples", type=int, default=10000)
    pr.add_argument("--seed", type=int, default=0)
    pr.set_defaults(func=cmd_prune)

    e = sub.add_parser("eval", help="accuracy of a netlist or checkpoint")
    e.add_argument("artifact")
    e.add_argument("--data-dir")
    e.add_argument("--dataset", choices=sorted(data_mod.DATASET_LOADERS))
    e.add_argument("--thresholds", type=int)
    e.add_argument("--split", default="test", choices=["train", "test"])
    e.set_defaults(func=cmd_eval)

    b = sub.add_parser("bench", help="scalar vs bit-packed inference throughput")
    b.add_argument("netlist")
    b.add_argument("--samples", type=int, default=4096)
    b.add_argument("--scalar-samples", type=int, default=64)
    b.add_argument("--seed", type=int, default=0)
    b.set_defaults(func=cmd_bench)

    pl = sub.add_parser("plot", help="plot accuracy and entropy curves from metrics")
    pl.add_argument("metrics")
    pl.add_argument("--out", required=True)
    pl.set_defaults(func=cmd_plot)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UserError, FileNotFoundError, CheckpointError, data_mod.DatasetFormatError,
            json.JSONDecodeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USER
    except TrainingAborted as e:
        print(f"aborted: {e}", file=sys.stderr)
        return EXIT_ABORT


if __name__ == "__main__":
    sys.exit(main())
