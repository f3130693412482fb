"""Command-line entry point: train, gradcheck, flops, export-plotdata, eval."""

from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
from dataclasses import dataclass
from typing import Any, Callable, Optional

from . import __version__
from .data import load_mnist, stratified_subset
from .emp import kept_count
from .flops import backward_flops, flops_error_prop, flops_forward, flops_weight_grad
from .tensor_core import Rng

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 1, 2


class ConfigError(ValueError):
    pass


# --------------------------------------------------------------------------
# value parsers


def parse_bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {s!r}")


def parse_optional_int(s: str) -> Optional[int]:
    v = s.strip().lower()
    return None if v in ("", "none", "auto") else int(v)


def parse_optional_float(s: str) -> Optional[float]:
    v = s.strip().lower()
    return None if v in ("", "none", "auto") else float(v)


def parse_schedule(s: str) -> tuple:
    """``"2000:0.1,4000:0.1"`` -> ((2000, 0.1), (4000, 0.1)); empty for none."""
    s = s.strip()
    if s in ("", "none"):
        return ()
    out = []
    for part in s.split(","):
        at, _, factor = part.partition(":")
        if not factor:
            raise ConfigError(f"schedule entries look like iteration:factor, got {part!r}")
        out.append((int(at), float(factor)))
    return tuple(out)


def _show(v) -> str:
    if isinstance(v, bool):
        return "on" if v else "off"
    if v is None:
        return "auto"
    if isinstance(v, tuple):
        return ",".join(f"{a}:{b}" for a, b in v) or "none"
    return str(v)


@dataclass(frozen=True)
class Key:
    name: str
    parse: Callable[[str], Any]
    default: Any
    help: str
    field: Optional[str] = None  # TrainConfig field, if any


KEYS = [
    # data and output
    Key("data_dir", str, "data/mnist", "directory holding the MNIST IDX files"),
    Key("train_subset", int, 10000, "stratified training subset size (0: all)"),
    Key("test_subset", int, 0, "stratified test subset size (0: all)"),
    Key("subset_seed", int, 0, "seed of the subset draw"),
    Key("out_dir", str, "runs/default", "where metrics.csv and model.ckpt go"),
    # optimisation
    Key("seed", int, 0, "run seed (init, shuffle, filter)", "seed"),
    Key("epochs", int, 5, "passes over the training set", "epochs"),
    Key("batch_size", int, 64, "mini-batch size m", "batch_size"),
    Key("lr", float, 0.01, "main-network learning rate", "lr"),
    Key("lr_schedule", parse_schedule, (), "step decay as iteration:factor,...", "lr_schedule"),
    Key("momentum", float, 0.5, "SGD momentum", "momentum"),
    Key("weight_decay", float, 0.0, "coupled L2 weight decay", "weight_decay"),
    Key("shuffle", parse_bool, True, "reshuffle the training set every epoch", "shuffle"),
    Key("eval_every", int, 0, "test interval in iterations (0: every epoch)", "eval_every"),
    # instance filter
    Key("eif", parse_bool, True, "enable the early instance filter", "eif"),
    Key("r_set", float, 0.3, "target high-loss fraction", "r_set"),
    Key("warmup_iters", parse_optional_int, None, "warm-up iterations (auto: warmup_epochs)",
        "warmup_iters"),
    Key("warmup_epochs", float, 1.0, "warm-up length in epochs", "warmup_epochs"),
    Key("alpha1", float, 1.1, "threshold growth factor", "alpha1"),
    Key("alpha2", float, 0.9, "threshold shrink factor", "alpha2"),
    Key("window_batches", int, 5, "batches per threshold update", "window_batches"),
    Key("entropy_t", float, 0.5, "uncertainty-sampling entropy threshold", "entropy_t"),
    Key("t_init", parse_optional_float, None, "initial loss threshold (auto: ln K)", "t_init"),
    Key("adaptive_threshold", parse_bool, True, "adapt the loss threshold", "adaptive_threshold"),
    Key("weighted_loss", parse_bool, True, "class-weighted filter loss", "weighted_loss"),
    Key("filter_lr", float, 0.1, "filter learning rate", "filter_lr"),
    Key("filter_momentum", float, 0.5, "filter SGD momentum", "filter_momentum"),
    Key("filter_lr_decay", float, 0.5, "filter learning-rate decay factor", "filter_lr_decay"),
    Key("filter_lr_decay_epochs", float, 1.0, "epochs before the filter decay (0: never)",
        "filter_lr_decay_epochs"),
    Key("filter_first_stride", int, 2, "stride of the filter's first conv", "filter_first_stride"),
    Key("train_on_sampled", parse_bool, False, "also train the main net on sampled instances",
        "train_on_sampled"),
    # error-map pruning
    Key("emp", parse_bool, True, "enable error-map pruning", "emp"),
    Key("emp_alpha", float, 0.7, "kept fraction of error-map channels", "alpha"),
    Key("gamma1", float, 1.0, "weight-norm term of the channel score", "gamma1"),
    Key("gamma2", float, 1.0, "error-map term of the channel score", "gamma2"),
]
KEY_BY_NAME = {k.name: k for k in KEYS}


def defaults() -> dict:
    return {k.name: k.default for k in KEYS}


def parse_config_text(text: str, source: str = "<config>") -> dict:
    """key = value lines; '#' starts a comment. Unknown keys are errors."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key = key.strip()
        if not sep:
            raise ConfigError(f"{source}:{lineno}: expected key = value")
        if key not in KEY_BY_NAME:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        if key in out:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        try:
            out[key] = KEY_BY_NAME[key].parse(value.strip())
        except (ValueError, ConfigError) as e:
            raise ConfigError(f"{source}:{lineno}: bad value for {key}: {e}") from None
    return out


def load_config(path: Optional[str], overrides: dict) -> dict:
    cfg = defaults()
    if path:
        try:
            with open(path) as f:
                cfg.update(parse_config_text(f.read(), path))
        except OSError as e:
            raise ConfigError(f"cannot read config: {e}") from None
    cfg.update({k: v for k, v in overrides.items() if v is not None})
    return cfg


def train_config(cfg: dict):
    from .trainer import TrainConfig

    kw = {k.field: cfg[k.name] for k in KEYS if k.field}
    return TrainConfig(**kw)


def format_config(cfg: dict) -> str:
    return "".join(f"{k.name} = {_show(cfg[k.name])}\n" for k in KEYS)


# --------------------------------------------------------------------------
# argument parsing


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _flag(key: Key) -> str:
    return "--" + key.name.replace("_", "-")


def _add_keys(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key = value config file")
    g = p.add_argument_group("config keys (flags override the file)")
    for k in KEYS:
        g.add_argument(_flag(k), dest=k.name, type=_wrap(k), default=None, metavar="V",
                       help=f"{k.help} [default: {_show(k.default)}]")


def _wrap(key: Key):
    def conv(s):
        try:
            return key.parse(s)
        except (ValueError, ConfigError) as e:
            raise argparse.ArgumentTypeError(str(e)) from None
    conv.__name__ = key.name
    return conv


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="trimtrain", description=__doc__)
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    t = sub.add_parser("train", help="train LeNet-5 on MNIST")
    _add_keys(t)

    g = sub.add_parser("gradcheck", help="finite-difference check of all backward passes")
    g.add_argument("--seed", type=int, default=0)

    f = sub.add_parser("flops", help="per-layer FLOP table and predicted savings")
    _add_keys(f)

    e = sub.add_parser("export-plotdata", help="two-column files from a metrics CSV")
    e.add_argument("metrics")
    e.add_argument("--out-dir", default=None, help="default: next to the metrics file")

    v = sub.add_parser("eval", help="test accuracy of a checkpoint")
    v.add_argument("checkpoint")
    _add_keys(v)
    return p


# --------------------------------------------------------------------------
# commands


def _datasets(cfg: dict, need_train: bool = True):
    rng = Rng(cfg["subset_seed"])
    train_set = None
    if need_train:
        train_set = load_mnist(cfg["data_dir"], "train")
        if cfg["train_subset"]:
            train_set = train_set.subset(stratified_subset(train_set.labels,
                                                           cfg["train_subset"], rng.spawn(1)))
    test_set = load_mnist(cfg["data_dir"], "test")
    if cfg["test_subset"]:
        test_set = test_set.subset(stratified_subset(test_set.labels, cfg["test_subset"],
                                                     rng.spawn(2)))
    return train_set, test_set


def cmd_train(cfg: dict) -> int:
    from .trainer import save_checkpoint, train

    tc = train_config(cfg)
    train_set, test_set = _datasets(cfg)
    os.makedirs(cfg["out_dir"], exist_ok=True)
    with open(os.path.join(cfg["out_dir"], "config.cfg"), "w") as f:
        f.write(format_config(cfg))
    metrics = os.path.join(cfg["out_dir"], "metrics.csv")
    res = train(tc, train_set, test_set, metrics_path=metrics)
    save_checkpoint(os.path.join(cfg["out_dir"], "model.ckpt"), res.net)
    inc, exc = res.remaining
    print(f"test_acc={res.test_acc:.4f} test_loss={res.test_loss:.4f} "
          f"remaining_inclusive={inc:.4f} remaining_exclusive={exc:.4f} "
          f"preserved={res.preserved}/{res.arrivals} total_flops={res.ledger.total} "
          f"baseline_flops={res.baseline_flops}")
    return EXIT_OK


def cmd_gradcheck(seed: int) -> int:
    from .gradcheck import run_suite

    results = run_suite(seed)
    for r in results:
        print(r)
    bad = [r for r in results if not r.passed]
    print(f"{len(results) - len(bad)}/{len(results)} tensors within tolerance")
    return EXIT_NUMERIC if bad else EXIT_OK


def flops_table(net, alpha: float):
    rows = []
    for layer, d in zip(net.layers, net.profile()):
        if d.kind not in ("conv", "fc"):
            continue
        kept = kept_count(d.n, alpha) if d.prunable else None
        rows.append({
            "layer": d.name, "kind": d.kind, "kept": kept if kept is not None else d.n, "n": d.n,
            "forward": flops_forward(d),
            "errorprop": 0 if d.first else flops_error_prop(d),
            "weightgrad": flops_weight_grad(d),
            "errorprop_pruned": 0 if d.first else flops_error_prop(d, kept),
            "weightgrad_pruned": flops_weight_grad(d, kept),
        })
    return rows


def predicted_remaining(net, alpha: float, r_set: float, filter_net=None) -> tuple[float, float]:
    """(inclusive, exclusive) predicted remaining ratio per arriving instance.

    Exclusive: only a fraction ``r_set`` is trained, with pruned backward.
    Inclusive adds the filter's forward pass on every instance and its
    training on the preserved fraction.
    """
    prof = net.profile()
    fwd = sum(flops_forward(d) for d in prof)
    bwd = sum(backward_flops(d) for d in prof)
    bwd_pruned = sum(backward_flops(d, kept_count(d.n, alpha) if d.prunable else None)
                     for d in prof)
    base = fwd + bwd
    exclusive = r_set * (fwd + bwd_pruned) / base
    inclusive = exclusive
    if filter_net is not None:
        fp = filter_net.flops_per_instance()
        inclusive += (fp["forward"] + r_set * fp["backward"]) / base
    return inclusive, exclusive


def cmd_flops(cfg: dict) -> int:
    from .network import lenet5, slim_lenet

    alpha = cfg["emp_alpha"] if cfg["emp"] else 1.0
    r_set = cfg["r_set"] if cfg["eif"] else 1.0
    if not 0.0 < r_set <= 1.0:
        raise ConfigError("r_set must be in (0, 1]")
    net = lenet5(Rng(0))
    filt = slim_lenet(Rng(0), first_stride=cfg["filter_first_stride"]) if cfg["eif"] else None
    rows = flops_table(net, alpha)
    cols = ("layer", "kind", "kept", "n", "forward", "errorprop", "weightgrad",
            "errorprop_pruned", "weightgrad_pruned")
    w = csv.writer(sys.stdout, lineterminator="\n")
    w.writerow(cols)
    for r in rows:
        w.writerow([r[c] for c in cols])
    tot = {c: sum(r[c] for r in rows) for c in cols[4:]}
    w.writerow(["total", "", "", ""] + [tot[c] for c in cols[4:]])
    inc, exc = predicted_remaining(net, alpha, r_set, filt)
    print(f"alpha={alpha} r_set={r_set} predicted_remaining_exclusive={exc:.6f} "
          f"predicted_remaining_inclusive={inc:.6f}")
    return EXIT_OK


PLOT_COLUMNS = ("iteration", "total", "test_acc", "T_l", "preserved_count")


def export_plotdata(metrics: str, out_dir: Optional[str] = None) -> dict:
    """Write flops_vs_error.txt, threshold.txt, preserved.txt; returns their paths."""
    with open(metrics) as f:
        lines = [ln for ln in f if not ln.startswith("#")]
    out_dir = out_dir or os.path.dirname(os.path.abspath(metrics))
    os.makedirs(out_dir, exist_ok=True)
    rows = list(csv.DictReader(lines)) if lines else []
    header = lines[0].strip().split(",") if lines else []
    if lines:
        missing = [c for c in PLOT_COLUMNS if c not in header]
        if missing:
            raise ConfigError(f"{metrics}: missing columns {missing}")
    outputs = {
        "flops_vs_error.txt": [(r["total"], repr(1.0 - float(r["test_acc"])))
                               for r in rows if r["test_acc"] != ""],
        "threshold.txt": [(r["iteration"], r["T_l"]) for r in rows if r["T_l"] != ""],
        "preserved.txt": [(r["iteration"], r["preserved_count"]) for r in rows],
    }
    paths = {}
    for name, pairs in outputs.items():
        path = os.path.join(out_dir, name)
        with open(path, "w") as f:
            for a, b in pairs:
                f.write(f"{a} {b}\n")
        paths[name] = path
    return paths


def cmd_eval(checkpoint: str, cfg: dict) -> int:
    from .network import lenet5
    from .trainer import evaluate, load_checkpoint

    net = lenet5(Rng(0))
    net.load_state_dict(load_checkpoint(checkpoint))
    _, test_set = _datasets(cfg, need_train=False)
    acc, loss = evaluate(net, test_set)
    print(f"test_acc={acc:.4f} test_loss={loss:.4f} instances={len(test_set)}")
    return EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "gradcheck":
            return cmd_gradcheck(args.seed)
        if args.command == "export-plotdata":
            if not os.path.exists(args.metrics):
                raise ConfigError(f"no such metrics file: {args.metrics}")
            for path in export_plotdata(args.metrics, args.out_dir).values():
                print(path)
            return EXIT_OK
        overrides = {k.name: getattr(args, k.name) for k in KEYS}
        cfg = load_config(args.config, overrides)
        if args.command == "train":
            return cmd_train(cfg)
        if args.command == "flops":
            return cmd_flops(cfg)
        if args.command == "eval":
            return cmd_eval(args.checkpoint, cfg)
    except (ConfigError, FileNotFoundError, ValueError) as e:
        print(f"trimtrain: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except FloatingPointError as e:
        print(f"trimtrain: numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
