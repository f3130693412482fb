"""Run the instance filter against a synthetic stream with a fixed loss oracle.

The oracle's per-instance loss is a known function of the input, so the
filter's control loop and prediction quality can be studied in isolation
from main-network training.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import PrototypeClassifier, SyntheticStream
from .eif import EarlyInstanceFilter, FilterConfig
from .flops import FlopCounter
from .network import slim_lenet
from .tensor_core import Rng


@dataclass
class StreamRun:
    preserved: np.ndarray
    sampled: np.ndarray
    threshold: np.ndarray
    wrong_ratio: np.ndarray  # over labelled instances; NaN if none
    audit_wrong: np.ndarray  # over every instance, against oracle labels
    ledger: FlopCounter = field(repr=False)

    def running_mean(self, width: int = 50) -> np.ndarray:
        """Entry i is the mean preserved count of batches i .. i+width-1."""
        return np.convolve(self.preserved, np.ones(width) / width, "valid")


def run_stream(r_set: float = 0.4, batch: int = 128, batches: int = 800, warmup: int = 100,
               adaptive: bool = True, weighted: bool = True, seed: int = 0,
               stream: SyntheticStream | None = None, filter_lr_decay_at: int = 200,
               **filter_kw) -> StreamRun:
    """Feed ``batches`` batches through a fresh filter.

    The first ``warmup`` batches are labelled in full. The filter learning
    rate halves at ``filter_lr_decay_at`` (0 keeps it constant).
    """
    stream = stream if stream is not None else SyntheticStream(noise=0.02, seed=seed)
    oracle = PrototypeClassifier(stream)
    sched = ((filter_lr_decay_at, 0.5),) if filter_lr_decay_at else ()
    cfg = FilterConfig(r_set=r_set, adaptive=adaptive, weighted_loss=weighted,
                       lr_schedule=sched, **filter_kw)
    net = slim_lenet(Rng(seed).spawn(7), stream.input_shape, first_stride=1)
    ledger = FlopCounter()
    filt = EarlyInstanceFilter(net, cfg, stream.num_classes, ledger)
    out = {k: np.zeros(batches) for k in ("preserved", "sampled", "threshold",
                                          "wrong_ratio", "audit_wrong")}
    for i in range(batches):
        x, y, _ = stream.batch(batch)
        v = filt.process_batch(x, y, oracle, force_all=i < warmup, iteration=i)
        truth = oracle.instance_losses(x, y) >= v.threshold
        out["preserved"][i] = v.preserved_count
        out["sampled"][i] = v.sampled_count
        out["threshold"][i] = v.threshold
        out["wrong_ratio"][i] = v.wrong_ratio
        out["audit_wrong"][i] = np.mean(truth != v.pred_high)
    return StreamRun(ledger=ledger, **out)
