"""Mini-batch training loop composing the main network, the instance filter,
error-map pruning and the FLOP ledger."""

from __future__ import annotations

import io
import logging
import math
import os
import struct
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import emp
from .data import Dataset
from .eif import EarlyInstanceFilter, FilterConfig
from .flops import FIELDS, FlopCounter, remaining_ratios
from .layers import softmax_cross_entropy
from .network import Sequential, lenet5, slim_lenet
from .optim import SGD
from .tensor_core import Rng, check_finite

log = logging.getLogger(__name__)

METRICS_SCHEMA = 1
METRICS_COLUMNS = (
    "iteration", "epoch", "preserved_count", "sampled_count", "T_l", "R_TH",
    "wrong_ratio", "train_loss", "test_acc", *FIELDS, "total",
    "remaining_inclusive", "remaining_exclusive",
)

# RNG streams derived from the run seed; keeping them apart means switching
# the filter on or off does not perturb main-network init or data order
_MAIN_INIT, _FILTER_INIT, _SHUFFLE = 1, 2, 3


@dataclass
class TrainConfig:
    epochs: int = 5
    batch_size: int = 64
    lr: float = 0.01
    momentum: float = 0.5
    weight_decay: float = 0.0
    lr_schedule: tuple = ()  # (iteration, factor) pairs
    seed: int = 0
    shuffle: bool = True
    # instance filter
    eif: bool = True
    r_set: float = 0.3
    warmup_iters: Optional[int] = None  # None: warmup_epochs worth of iterations
    warmup_epochs: float = 1.0
    alpha1: float = 1.1
    alpha2: float = 0.9
    window_batches: int = 5
    entropy_t: float = 0.5
    t_init: Optional[float] = None
    adaptive_threshold: bool = True
    weighted_loss: bool = True
    filter_lr: float = 0.1
    filter_momentum: float = 0.5
    filter_lr_decay: float = 0.5
    filter_lr_decay_epochs: float = 1.0  # after this many epochs; 0 disables
    filter_first_stride: int = 2
    train_on_sampled: bool = False
    # error-map pruning
    emp: bool = True
    alpha: float = 0.7
    gamma1: float = 1.0
    gamma2: float = 1.0
    # evaluation
    eval_every: int = 0  # iterations; 0 means at the end of every epoch

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch size must be at least 1")
        if self.lr <= 0 or self.filter_lr <= 0:
            raise ValueError("learning rates must be positive")
        if self.epochs < 0:
            raise ValueError("epochs must be nonnegative")
        if (self.warmup_iters is not None and self.warmup_iters < 0) or self.warmup_epochs < 0:
            raise ValueError("warm-up must be nonnegative")
        if self.eval_every < 0:
            raise ValueError("eval_every must be nonnegative")
        emp.kept_count(1, self.alpha)

    def iterations_per_epoch(self, n: int) -> int:
        return math.ceil(n / self.batch_size)

    def warmup(self, n: int) -> int:
        if self.warmup_iters is not None:
            return self.warmup_iters
        return int(round(self.warmup_epochs * self.iterations_per_epoch(n)))

    def filter_config(self, n: int) -> FilterConfig:
        sched = ()
        if self.filter_lr_decay_epochs > 0 and self.filter_lr_decay != 1.0:
            at = int(round(self.filter_lr_decay_epochs * self.iterations_per_epoch(n)))
            sched = ((at, self.filter_lr_decay),)
        return FilterConfig(r_set=self.r_set, alpha1=self.alpha1, alpha2=self.alpha2,
                            window_batches=self.window_batches, entropy_t=self.entropy_t,
                            t_init=self.t_init, adaptive=self.adaptive_threshold,
                            weighted_loss=self.weighted_loss, lr=self.filter_lr,
                            momentum=self.filter_momentum, lr_schedule=sched)

    def prune_config(self) -> emp.PruneConfig:
        return emp.PruneConfig(alpha=self.alpha, gamma1=self.gamma1, gamma2=self.gamma2)


@dataclass
class TrainResult:
    net: Sequential
    ledger: FlopCounter
    baseline_flops: int
    arrivals: int
    preserved: int
    skipped_updates: int
    test_acc: Optional[float]
    test_loss: Optional[float]
    filter: Optional[EarlyInstanceFilter] = None
    rows: list = field(default_factory=list, repr=False)

    @property
    def remaining(self) -> tuple[float, float]:
        return remaining_ratios(self.ledger, self.baseline_flops)

    @property
    def reduction(self) -> float:
        return 1.0 - self.remaining[0]


def evaluate(net: Sequential, dataset: Dataset, chunk: int = 1000) -> tuple[float, float]:
    """Top-1 accuracy and mean cross-entropy. Nothing is charged to a ledger."""
    if len(dataset) == 0:
        return float("nan"), float("nan")
    logits = net.predict(dataset.images, chunk)
    losses, _, _ = softmax_cross_entropy(logits, dataset.labels)
    acc = float(np.mean(np.argmax(logits, axis=1) == dataset.labels))
    return acc, float(np.mean(losses))


class _MainAdapter:
    """Lets the filter ask the main network for per-instance losses."""

    def __init__(self, net: Sequential):
        self.net = net
        self.cache = None  # (rows, logits, caches) of the last preserved forward

    def instance_losses(self, x, y, ledger, phase):
        logits, caches = self.net.forward(x, ledger, phase)
        losses, _, _ = softmax_cross_entropy(logits, y)
        if phase == "forward_main":
            self.cache = (logits, caches)
        return losses


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    v = float(v)
    return "" if math.isnan(v) else repr(v)


class MetricsWriter:
    def __init__(self, path):
        self.path = path
        self._f = open(path, "w", newline="\n") if path is not None else None
        if self._f:
            self._f.write(f"# metrics-schema: {METRICS_SCHEMA}\n")
            self._f.write(",".join(METRICS_COLUMNS) + "\n")

    def write(self, row: dict) -> None:
        if self._f:
            self._f.write(",".join(_fmt(row.get(c)) for c in METRICS_COLUMNS) + "\n")

    def close(self) -> None:
        if self._f:
            self._f.close()
            self._f = None


def build_main(config: TrainConfig, input_shape=(1, 28, 28), num_classes: int = 10) -> Sequential:
    return lenet5(Rng(config.seed).spawn(_MAIN_INIT), input_shape, num_classes)


def build_filter(config: TrainConfig, input_shape=(1, 28, 28)) -> Sequential:
    return slim_lenet(Rng(config.seed).spawn(_FILTER_INIT), input_shape,
                      first_stride=config.filter_first_stride)


def train(config: TrainConfig, train_set: Dataset, test_set: Optional[Dataset] = None,
          metrics_path=None, net: Optional[Sequential] = None,
          num_classes: int = 10) -> TrainResult:
    n = len(train_set)
    if n == 0:
        raise ValueError("empty training set")
    input_shape = train_set.images.shape[1:]
    net = net if net is not None else build_main(config, input_shape, num_classes)
    ledger = FlopCounter()
    opt = SGD(net.params(), config.lr, config.momentum, config.weight_decay, config.lr_schedule)
    prune = config.prune_config() if config.emp else None
    select = None
    if prune is not None:
        select = lambda layer, delta: emp.decide(layer, delta, prune, ledger)  # noqa: E731

    filt = None
    if config.eif:
        filt = EarlyInstanceFilter(build_filter(config, input_shape), config.filter_config(n),
                                   num_classes, ledger)
    main = _MainAdapter(net)
    warmup = config.warmup(n)
    per_instance = sum(net.flops_per_instance().values())
    shuffle_rng = Rng(config.seed).spawn(_SHUFFLE)
    iters_per_epoch = config.iterations_per_epoch(n)
    eval_every = config.eval_every or iters_per_epoch

    writer = MetricsWriter(metrics_path)
    arrivals = preserved_total = skipped = 0
    test_acc = test_loss = None
    rows = []
    it = 0
    try:
        for epoch in range(config.epochs):
            order = shuffle_rng.permutation(n) if config.shuffle else np.arange(n)
            for start in range(0, n, config.batch_size):
                idx = order[start:start + config.batch_size]
                x, y = train_set.images[idx], train_set.labels[idx]
                row = {"iteration": it, "epoch": epoch}
                keep, caches, logits = _screen(config, filt, main, net, x, y, it, warmup,
                                               ledger, row)
                arrivals += len(idx)
                preserved_total += len(keep)
                row["preserved_count"] = len(keep)
                if len(keep) == 0:
                    skipped += 1
                    log.info("iteration %d: nothing preserved, main update skipped", it)
                else:
                    losses, delta, _ = softmax_cross_entropy(logits, y[keep])
                    row["train_loss"] = float(np.mean(losses))
                    grads = net.backward(delta, caches, select=select, ledger=ledger)
                    opt.step(grads, it)
                it += 1
                if it % eval_every == 0 and test_set is not None:
                    test_acc, test_loss = evaluate(net, test_set)
                    row["test_acc"] = test_acc
                snap = ledger.snapshot()
                row.update(snap)
                inc, exc = remaining_ratios(ledger, arrivals * per_instance)
                row["remaining_inclusive"], row["remaining_exclusive"] = inc, exc
                writer.write(row)
                rows.append(row)
    finally:
        writer.close()
    for name, w in net.params().items():
        check_finite(w, name)
    if test_set is not None and (test_acc is None or it % eval_every):
        test_acc, test_loss = evaluate(net, test_set)
    return TrainResult(net, ledger, arrivals * per_instance, arrivals, preserved_total, skipped,
                       test_acc, test_loss, filt, rows)


def _screen(config, filt, main, net, x, y, it, warmup, ledger, row):
    """Decide which rows of the batch train the main network.

    Returns (kept row indices, forward caches of those rows, their logits).
    """
    if filt is None:
        logits, caches = net.forward(x, ledger, "forward_main")
        return np.arange(len(x)), caches, logits
    main.cache = None
    verdict = filt.process_batch(x, y, main, force_all=it < warmup, iteration=it)
    keep = np.flatnonzero((verdict.role == 0) | (verdict.role == 3))
    row["sampled_count"] = verdict.sampled_count
    row["T_l"] = verdict.threshold
    row["R_TH"] = filt.state.last_r_th
    row["wrong_ratio"] = verdict.wrong_ratio
    if config.train_on_sampled and verdict.sampled_count:
        # re-run the union so the backward sees one consistent cache set; both
        # parts were already charged when the filter asked for their losses
        keep = np.flatnonzero(verdict.role != 2)
        logits, caches = net.forward(x[keep])
        return keep, caches, logits
    if len(keep) == 0:
        return keep, None, None
    logits, caches = main.cache
    return keep, caches, logits


# --------------------------------------------------------------------------
# checkpoints

CKPT_MAGIC = b"TRIMCKPT"
CKPT_VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, net: Sequential) -> None:
    buf = io.BytesIO()
    buf.write(CKPT_MAGIC)
    params = net.params()
    buf.write(struct.pack("<II", CKPT_VERSION, len(params)))
    for name in sorted(params):
        w = np.ascontiguousarray(params[name], dtype="<f8")
        key = name.encode()
        buf.write(struct.pack("<I", len(key)))
        buf.write(key)
        buf.write(struct.pack("<I", w.ndim))
        buf.write(struct.pack(f"<{w.ndim}q", *w.shape))
        buf.write(w.tobytes())
    tmp = f"{os.fspath(path)}.tmp"
    with open(tmp, "wb") as f:
        f.write(buf.getvalue())
    os.replace(tmp, path)


def load_checkpoint(path) -> dict:
    with open(path, "rb") as f:
        data = f.read()
    if not data.startswith(CKPT_MAGIC):
        raise CheckpointError(f"{path}: not a checkpoint")
    pos = len(CKPT_MAGIC)

    def take(fmt):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(data):
            raise CheckpointError(f"{path}: truncated")
        out = struct.unpack_from(fmt, data, pos)
        pos += size
        return out

    version, count = take("<II")
    if version != CKPT_VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    state = {}
    for _ in range(count):
        (klen,) = take("<I")
        name = data[pos:pos + klen].decode()
        pos += klen
        (ndim,) = take("<I")
        shape = take(f"<{ndim}q")
        size = int(np.prod(shape)) * 8
        if pos + size > len(data):
            raise CheckpointError(f"{path}: truncated tensor {name}")
        state[name] = np.frombuffer(data, "<f8", int(np.prod(shape)), pos).reshape(shape).copy()
        pos += size
    return state
