"""Early instance filter.

A small companion network predicts, before the main forward pass, whether
an instance would incur high (H) or low (L) loss on the main network. Only
predicted-H instances are trained on. The filter supervises itself:

* labels come from an adaptive loss threshold, nudged multiplicatively so
  that the true-high ratio over a window of batches tracks ``r_set``;
* predicted-L instances the filter is unsure about (entropy above a
  threshold) are sent through the main network anyway, to get labels;
* the filter loss weights H and L labels by ``1/r_set`` and
  ``1/(1 - r_set)`` so both label classes contribute equally.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Protocol

import numpy as np
from scipy.special import entr

from .flops import FlopCounter
from .layers import softmax, softmax_cross_entropy
from .network import Sequential
from .optim import SGD

HIGH, LOW = 0, 1  # filter output columns

PRESERVED, SAMPLED, DROPPED, FORCED = 0, 1, 2, 3
ROLE_NAMES = {PRESERVED: "PRESERVED", SAMPLED: "SAMPLED", DROPPED: "DROPPED", FORCED: "FORCED"}

NONE, TH, FH, TL, FL = 0, 1, 2, 3, 4
CLASS_NAMES = {NONE: "", TH: "TH", FH: "FH", TL: "TL", FL: "FL"}


class WarmingUp(Exception):
    """The monitoring window does not yet hold n*m records."""


class MainModel(Protocol):
    def instance_losses(self, x: np.ndarray, y: np.ndarray,
                        ledger: Optional[FlopCounter], phase: str) -> np.ndarray: ...


# --------------------------------------------------------------------------
# elementary rules


def binary_entropy(p_high) -> np.ndarray:
    p = np.clip(np.asarray(p_high, dtype=np.float64), 0.0, 1.0)
    return entr(p) + entr(1.0 - p)


def label_loss(loss, threshold: float):
    """High-loss label: True iff loss >= threshold."""
    return np.asarray(loss) >= threshold


def true_high_ratio(pred_high, label_high, capacity: Optional[int] = None) -> float:
    """Fraction of window records both predicted and labelled H.

    ``label_high`` may hold None for dropped instances; they count in the
    denominator only.
    """
    n = len(pred_high)
    if capacity is not None and n < capacity:
        raise WarmingUp(f"{n} of {capacity} records")
    if n == 0:
        raise WarmingUp("empty window")
    hits = sum(1 for p, y in zip(pred_high, label_high) if p and y)
    return hits / n


def update_threshold(threshold: float, r_th: float, r_set: float,
                     alpha1: float, alpha2: float) -> float:
    return alpha1 * threshold if r_th >= r_set else alpha2 * threshold


def uncertainty_sample(pred_high, entropy, entropy_t: float) -> np.ndarray:
    """Indices of predicted-L instances whose entropy exceeds the threshold."""
    pred_high = np.asarray(pred_high, dtype=bool)
    entropy = np.asarray(entropy)
    return np.flatnonzero(~pred_high & (entropy > entropy_t))


def class_weights(r_set: float) -> tuple[float, float]:
    return 1.0 / r_set, 1.0 / (1.0 - r_set)


def instance_weights(label_high, r_set: float, weighted: bool = True) -> np.ndarray:
    """Per-instance loss weights normalised to sum to one."""
    label_high = np.asarray(label_high, dtype=bool)
    if label_high.size == 0:
        return np.zeros(0)
    if weighted:
        w_h, w_l = class_weights(r_set)
        w = np.where(label_high, w_h, w_l)
    else:
        w = np.ones(label_high.size)
    return w / w.sum()


def filter_loss(logits: np.ndarray, label_high, r_set: float, weighted: bool = True):
    """Weighted two-class cross-entropy and its error map w.r.t. the logits."""
    label_high = np.asarray(label_high, dtype=bool)
    if label_high.size == 0:
        raise ValueError("no labelled instances")
    target = np.where(label_high, HIGH, LOW)
    w = instance_weights(label_high, r_set, weighted)
    losses, delta, _ = softmax_cross_entropy(logits, target, weights=w)
    return float(np.dot(w, losses)), delta


# --------------------------------------------------------------------------
# stateful filter


@dataclass
class FilterConfig:
    r_set: float = 0.3
    alpha1: float = 1.1
    alpha2: float = 0.9
    window_batches: int = 5
    entropy_t: float = 0.5
    t_init: Optional[float] = None  # None: ln(num_classes)
    adaptive: bool = True
    weighted_loss: bool = True
    lr: float = 0.1
    momentum: float = 0.5
    weight_decay: float = 0.0
    lr_schedule: tuple = ()

    def __post_init__(self):
        if not 0.0 < self.r_set < 1.0:
            raise ValueError("r_set must be in (0, 1)")
        if not (self.alpha1 > 1.0 and 0.0 < self.alpha2 < 1.0):
            raise ValueError("need alpha1 > 1 and 0 < alpha2 < 1")
        if not 0.0 <= self.entropy_t <= math.log(2):
            raise ValueError("entropy threshold must be in [0, ln 2]")
        if self.window_batches < 1:
            raise ValueError("window must span at least one batch")


@dataclass
class FilterState:
    threshold: float
    window_pred: list = field(default_factory=list)
    window_label: list = field(default_factory=list)
    batches_in_window: int = 0
    last_r_th: Optional[float] = None
    updates: int = 0
    skipped_updates: int = 0


@dataclass
class Screening:
    """Filter output for one arriving batch, before any main-network work."""

    pred_high: np.ndarray
    p_high: np.ndarray
    entropy: np.ndarray
    role: np.ndarray
    logits: np.ndarray
    caches: list

    @property
    def preserved(self) -> np.ndarray:
        return np.flatnonzero((self.role == PRESERVED) | (self.role == FORCED))

    @property
    def sampled(self) -> np.ndarray:
        return np.flatnonzero(self.role == SAMPLED)

    @property
    def labelled(self) -> np.ndarray:
        return np.flatnonzero(self.role != DROPPED)


@dataclass
class BatchVerdict:
    pred_high: np.ndarray
    p_high: np.ndarray
    entropy: np.ndarray
    role: np.ndarray
    loss: np.ndarray  # NaN where unknown
    label_high: np.ndarray  # meaningful only where role != DROPPED
    classification: np.ndarray
    threshold: float
    filter_loss: Optional[float] = None

    def count(self, role: int) -> int:
        return int(np.sum(self.role == role))

    @property
    def preserved_count(self) -> int:
        return self.count(PRESERVED) + self.count(FORCED)

    @property
    def sampled_count(self) -> int:
        return self.count(SAMPLED)

    @property
    def labelled_count(self) -> int:
        return int(np.sum(self.role != DROPPED))

    @property
    def wrong_ratio(self) -> float:
        """Share of labelled instances whose H/L prediction disagrees with the label."""
        n = self.labelled_count
        if n == 0:
            return float("nan")
        wrong = np.sum((self.classification == FH) | (self.classification == FL))
        return float(wrong) / n


def classify(pred_high, label_high) -> np.ndarray:
    pred_high = np.asarray(pred_high, dtype=bool)
    label_high = np.asarray(label_high, dtype=bool)
    return np.select([pred_high & label_high, pred_high & ~label_high,
                      ~pred_high & ~label_high], [TH, FH, TL], FL)


class EarlyInstanceFilter:
    def __init__(self, net: Sequential, config: FilterConfig, num_classes: int,
                 ledger: Optional[FlopCounter] = None):
        if net.output_shape != (2,):
            raise ValueError("filter network must have a 2-way output")
        self.net = net
        self.config = config
        self.ledger = ledger
        t0 = config.t_init if config.t_init is not None else math.log(num_classes)
        if t0 <= 0:
            raise ValueError("initial loss threshold must be positive")
        self.state = FilterState(threshold=float(t0))
        self.optimizer = SGD(net.params(), config.lr, config.momentum,
                             config.weight_decay, config.lr_schedule)

    # ------------------------------------------------------------------
    def predict(self, x: np.ndarray):
        """(pred_high, p_high, entropy, logits, caches) for a batch."""
        logits, caches = self.net.forward(x, self.ledger, "filter_forward")
        p_high = softmax(logits)[:, HIGH]
        return p_high >= 0.5, p_high, binary_entropy(p_high), logits, caches

    def screen(self, x: np.ndarray, force_all: bool = False) -> Screening:
        """Decide per instance: train on it, sample it for a label, or drop it.

        ``force_all`` keeps every instance (warm-up).
        """
        pred_high, p_high, ent, logits, caches = self.predict(x)
        if force_all:
            role = np.full(len(x), FORCED)
        else:
            role = np.where(pred_high, PRESERVED, DROPPED)
            role[uncertainty_sample(pred_high, ent, self.config.entropy_t)] = SAMPLED
        return Screening(pred_high, p_high, ent, role, logits, caches)

    def learn(self, scr: Screening, losses: np.ndarray, iteration=None) -> BatchVerdict:
        """Label the screened batch from true losses and train the filter one step.

        ``losses`` has one entry per instance; entries of dropped instances
        are ignored.
        """
        cfg, st = self.config, self.state
        losses = np.asarray(losses, dtype=np.float64)
        labelled = scr.labelled
        label_high = np.zeros(len(scr.role), dtype=bool)
        label_high[labelled] = label_loss(losses[labelled], st.threshold)
        cls = np.zeros(len(scr.role), dtype=np.int64)
        cls[labelled] = classify(scr.pred_high[labelled], label_high[labelled])
        known = np.full(len(scr.role), np.nan)
        known[labelled] = losses[labelled]
        verdict = BatchVerdict(scr.pred_high, scr.p_high, scr.entropy, scr.role, known,
                               label_high, cls, st.threshold)

        if labelled.size == 0:
            st.skipped_updates += 1
        else:
            rows = labelled
            caches = scr.caches
            if rows.size != len(scr.role):
                caches = [c.take(rows) for c in caches]
            loss, delta = filter_loss(scr.logits[rows], label_high[rows], cfg.r_set,
                                      cfg.weighted_loss)
            grads = self.net.backward(delta, caches, ledger=self.ledger,
                                      phases=("filter_train", "filter_train"))
            self.optimizer.step(grads, iteration)
            verdict.filter_loss = loss
            st.updates += 1

        self._record(scr.pred_high, np.where(scr.role != DROPPED, label_high, False))
        return verdict

    def _record(self, pred_high, label_high) -> None:
        st, cfg = self.state, self.config
        st.window_pred.extend(bool(p) for p in pred_high)
        st.window_label.extend(bool(y) for y in label_high)
        st.batches_in_window += 1
        if st.batches_in_window < cfg.window_batches:
            return
        # disjoint windows: one threshold update per window
        r_th = true_high_ratio(st.window_pred, st.window_label)
        st.last_r_th = r_th
        if cfg.adaptive:
            st.threshold = update_threshold(st.threshold, r_th, cfg.r_set,
                                            cfg.alpha1, cfg.alpha2)
        st.window_pred.clear()
        st.window_label.clear()
        st.batches_in_window = 0

    def process_batch(self, x: np.ndarray, y: np.ndarray, main: MainModel,
                      force_all: bool = False, iteration=None) -> BatchVerdict:
        """Screen a batch, obtain true losses from ``main``, train the filter.

        Losses of preserved instances are charged to the main forward pass;
        those of uncertainty-sampled instances exist only to label the
        filter and are charged to filter training.
        """
        scr = self.screen(x, force_all)
        losses = np.full(len(x), np.nan)
        keep, samp = scr.preserved, scr.sampled
        if keep.size:
            losses[keep] = main.instance_losses(x[keep], y[keep], self.ledger, "forward_main")
        if samp.size:
            losses[samp] = main.instance_losses(x[samp], y[samp], self.ledger, "filter_train")
        return self.learn(scr, losses, iteration)
