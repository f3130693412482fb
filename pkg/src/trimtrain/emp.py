"""Error-map pruning for convolution backward passes.

Per mini-batch and per conv layer: score every output channel of the error
map, keep the ``n' = max(1, round(alpha * n))`` best, and run error
propagation and weight-gradient computation over the kept channels only.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .flops import (FlopCounter, LayerDims, flops_error_prop,
                    flops_selection_overhead, flops_weight_grad)
from .layers import Conv2d, LayerCache, conv_backward_error, conv_backward_weights
from .tensor_core import l1_norm


def kept_count(n: int, alpha: float) -> int:
    if not 0.0 < alpha <= 1.0:
        raise ValueError(f"alpha must be in (0, 1], got {alpha}")
    # round half up; Python's round() is banker's rounding
    return max(1, min(n, int(math.floor(alpha * n + 0.5))))


@dataclass
class PruneConfig:
    alpha: float = 1.0
    gamma1: float = 1.0
    gamma2: float = 1.0
    normalize: bool = True  # mean absolute value instead of raw l1 sums
    layers: Optional[tuple] = None  # None prunes every conv layer
    layer_alpha: dict = field(default_factory=dict)

    def __post_init__(self):
        kept_count(1, self.alpha)
        if self.gamma1 < 0 or self.gamma2 < 0:
            raise ValueError("score weights must be nonnegative")
        for a in self.layer_alpha.values():
            kept_count(1, a)

    def alpha_for(self, layer: str) -> float:
        return self.layer_alpha.get(layer, self.alpha)

    def applies_to(self, layer: str) -> bool:
        return self.layers is None or layer in self.layers


@dataclass
class PruneDecision:
    layer: str
    kept: np.ndarray  # sorted channel indices
    scores: np.ndarray

    @property
    def n(self) -> int:
        return len(self.scores)

    @property
    def n_kept(self) -> int:
        return len(self.kept)


def channel_score(w_j, delta_j, gamma1=1.0, gamma2=1.0, normalize=True) -> float:
    """Importance of one output channel for one instance."""
    w_term = l1_norm(w_j)
    d_term = l1_norm(delta_j)
    if normalize:
        w_term /= np.size(w_j)
        d_term /= np.size(delta_j)
    return gamma1 * w_term + gamma2 * d_term


def instance_scores(layer: Conv2d, delta: np.ndarray, config: PruneConfig) -> np.ndarray:
    """Score matrix of shape (m, n): one row per instance."""
    w_term = np.abs(layer.weight).sum(axis=(1, 2, 3))
    d_term = np.abs(delta).sum(axis=(2, 3))
    if config.normalize:
        w_term = w_term / layer.weight[0].size
        d_term = d_term / (delta.shape[2] * delta.shape[3])
    return config.gamma1 * w_term[None, :] + config.gamma2 * d_term


def batch_scores(layer: Conv2d, delta: np.ndarray, config: PruneConfig) -> np.ndarray:
    if delta.shape[0] == 0:
        raise ValueError("cannot score an empty batch")
    return instance_scores(layer, delta, config).sum(axis=0)


def select_channels(scores, alpha: float, layer: str = "") -> PruneDecision:
    """Keep the highest-scoring channels; equal scores favour the lower index."""
    scores = np.asarray(scores, dtype=np.float64)
    n = scores.size
    if n < 1:
        raise ValueError("need at least one channel")
    k = kept_count(n, alpha)
    order = np.lexsort((np.arange(n), -scores))
    return PruneDecision(layer, np.sort(order[:k]), scores)


def decide(layer: Conv2d, delta: np.ndarray, config: PruneConfig,
           ledger: Optional[FlopCounter] = None) -> Optional[PruneDecision]:
    """Pick the channels to keep for this batch; None means prune nothing."""
    if not config.applies_to(layer.name):
        return None
    alpha = config.alpha_for(layer.name)
    if alpha >= 1.0:
        return None
    if ledger is not None:
        kh, kw = layer.kernel
        dims = LayerDims(layer.name, "conv", c=layer.in_channels, n=layer.out_channels,
                         k_h=kh, k_w=kw, h=delta.shape[2], w=delta.shape[3])
        ledger.add("selection_overhead", flops_selection_overhead(dims, delta.shape[0]),
                   layer.name)
    return select_channels(batch_scores(layer, delta, config), alpha, layer.name)


def pruned_backward(layer: Conv2d, cache: LayerCache, delta: np.ndarray,
                    decision: Optional[PruneDecision] = None,
                    ledger: Optional[FlopCounter] = None, need_input_grad: bool = True,
                    phases=("errorprop_main", "weightgrad_main")):
    """Masked backward for one conv layer, charging the FLOPs actually spent.

    Returns ``(delta_in, weight_grad, bias_grad)``; ``delta_in`` is None when
    the input-side error map is not needed.
    """
    if decision is not None and decision.layer != layer.name:
        raise ValueError(f"decision for {decision.layer!r} applied to {layer.name!r}")
    mask = None if decision is None else decision.kept
    gw, gb = conv_backward_weights(layer, cache, delta, mask)
    dx = None
    if need_input_grad:
        dx = conv_backward_error(layer, delta, mask, input_hw=cache.x.shape[2:])
    if ledger is not None:
        m = delta.shape[0]
        dims = layer.dims(cache.x.shape[1:])
        kept = None if decision is None else decision.n_kept
        if need_input_grad:
            ledger.add(phases[0], m * flops_error_prop(dims, kept), layer.name)
        ledger.add(phases[1], m * flops_weight_grad(dims, kept), layer.name)
    return dx, gw, gb
