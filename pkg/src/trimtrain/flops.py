"""Analytic FLOP accounting.

One multiply-accumulate counts as one FLOP. Only convolution and fully
connected layers perform products; ReLU, max-pooling, flatten and the loss
are charged zero. Convolution error propagation uses the full-correlation
count ``W_in * H_in * c * n' * k_w * k_h`` and weight gradients
``W * H * c * n' * k_w * k_h`` where ``n'`` is the number of kept
error-map channels.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

FIELDS = (
    "forward_main",
    "errorprop_main",
    "weightgrad_main",
    "filter_forward",
    "filter_train",
    "selection_overhead",
)
MAIN_FIELDS = FIELDS[:3]
FILTER_FIELDS = ("filter_forward", "filter_train")


@dataclass(frozen=True)
class LayerDims:
    """Per-instance geometry of one layer.

    For fc layers ``c`` is the input width and ``n`` the output width, with
    unit spatial extent.
    """

    name: str
    kind: str
    c: int = 0
    n: int = 0
    k_h: int = 1
    k_w: int = 1
    h_in: int = 1
    w_in: int = 1
    h: int = 1
    w: int = 1
    first: bool = False  # input-side error map not needed

    @property
    def prunable(self) -> bool:
        return self.kind == "conv"


def _kept(d: LayerDims, kept: Optional[int]) -> int:
    if kept is None:
        return d.n
    kept = int(kept)
    if kept < 1 or kept > d.n:
        raise ValueError(f"{d.name}: kept channels must be in [1, {d.n}], got {kept}")
    if kept != d.n and not d.prunable:
        raise ValueError(f"{d.name}: only conv layers can be pruned")
    return kept


def flops_forward(d: LayerDims) -> int:
    if d.kind == "conv":
        return d.h * d.w * d.c * d.n * d.k_h * d.k_w
    if d.kind == "fc":
        return d.c * d.n
    return 0


def flops_error_prop(d: LayerDims, kept: Optional[int] = None) -> int:
    n = _kept(d, kept)
    if d.kind == "conv":
        return d.w_in * d.h_in * d.c * n * d.k_w * d.k_h
    if d.kind == "fc":
        return d.c * d.n
    return 0


def flops_weight_grad(d: LayerDims, kept: Optional[int] = None) -> int:
    n = _kept(d, kept)
    if d.kind == "conv":
        return d.w * d.h * d.c * n * d.k_w * d.k_h
    if d.kind == "fc":
        return d.c * d.n
    return 0


def flops_selection_overhead(d: LayerDims, batch: int = 1) -> int:
    """Cost of scoring and ranking the error-map channels of one mini-batch.

    l1 sums over every kernel (n*c*k_w*k_h) and every error-map channel of
    every instance (m*n*W*H), plus an n*log2(n) sort.
    """
    if d.kind != "conv" or d.n == 0:
        return 0
    weight_norms = d.n * d.c * d.k_w * d.k_h
    map_norms = batch * d.n * d.w * d.h
    sort = math.ceil(d.n * math.log2(d.n)) if d.n > 1 else 0
    return weight_norms + map_norms + sort


def backward_flops(d: LayerDims, kept: Optional[int] = None) -> int:
    ep = 0 if d.first else flops_error_prop(d, kept)
    return ep + flops_weight_grad(d, kept)


@dataclass
class FlopCounter:
    forward_main: int = 0
    errorprop_main: int = 0
    weightgrad_main: int = 0
    filter_forward: int = 0
    filter_train: int = 0
    selection_overhead: int = 0
    by_layer: dict = field(default_factory=dict, repr=False)

    def add(self, phase: str, amount: int, layer: Optional[str] = None) -> None:
        if phase not in FIELDS:
            raise KeyError(phase)
        amount = int(amount)
        if amount < 0:
            raise ValueError("FLOP counts only grow")
        setattr(self, phase, getattr(self, phase) + amount)
        if layer is not None:
            key = (phase, layer)
            self.by_layer[key] = self.by_layer.get(key, 0) + amount

    @property
    def total(self) -> int:
        return sum(getattr(self, f) for f in FIELDS)

    @property
    def main_total(self) -> int:
        return sum(getattr(self, f) for f in MAIN_FIELDS)

    @property
    def backward_main(self) -> int:
        return self.errorprop_main + self.weightgrad_main

    @property
    def filter_total(self) -> int:
        return self.filter_forward + self.filter_train

    def layer_total(self, phase: str, layers) -> int:
        return sum(self.by_layer.get((phase, name), 0) for name in layers)

    def snapshot(self) -> dict:
        snap = {f: getattr(self, f) for f in FIELDS}
        snap["total"] = self.total
        return snap


def remaining_ratios(counter: FlopCounter, baseline: int) -> tuple[float, float]:
    """(inclusive, exclusive) of filter overhead; both relative to plain SGD."""
    if baseline <= 0:
        return float("nan"), float("nan")
    inclusive = counter.total / baseline
    exclusive = (counter.total - counter.filter_total) / baseline
    return inclusive, exclusive
