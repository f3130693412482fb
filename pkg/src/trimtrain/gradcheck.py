"""Central finite-difference checks of every analytic backward pass."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .layers import Conv2d, Linear, MaxPool2d, ReLU, softmax_cross_entropy
from .network import Sequential, lenet5
from .tensor_core import Rng

STEP = 1e-6
TOLERANCE = 1e-4


@dataclass
class CheckResult:
    case: str
    tensor: str
    error: float
    tol: float = TOLERANCE

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.error) and self.error < self.tol)

    def __str__(self):
        mark = "ok  " if self.passed else "FAIL"
        return f"{mark} {self.case:<28} {self.tensor:<14} max rel err {self.error:.3e}"


def relative_error(analytic, numeric) -> float:
    """max|a - n| / max|n|, guarded against an all-zero reference."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    scale = max(float(np.max(np.abs(numeric), initial=0.0)), 1e-12)
    return float(np.max(np.abs(analytic - numeric), initial=0.0)) / scale


def numeric_grad(f: Callable[[], float], x: np.ndarray, h: float = STEP, coords=None) -> np.ndarray:
    """Central differences of scalar ``f`` w.r.t. ``x`` (perturbed in place).

    With ``coords`` (flat indices) only those entries are estimated; the
    rest of the result is zero.
    """
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in (range(flat.size) if coords is None else coords):
        old = flat[i]
        flat[i] = old + h
        up = f()
        flat[i] = old - h
        down = f()
        flat[i] = old
        gflat[i] = (up - down) / (2 * h)
    return g


def _compare(case, name, analytic, numeric, coords=None) -> CheckResult:
    if coords is not None:
        analytic = analytic.reshape(-1)[coords]
        numeric = numeric.reshape(-1)[coords]
    return CheckResult(case, name, relative_error(analytic, numeric))


def check_layer(layer, x: np.ndarray, rng: Rng, case: str,
                backward: Optional[Callable] = None) -> list[CheckResult]:
    """Check dL/dx and parameter grads for L = sum(R * layer(x)), R random.

    ``backward(layer, cache, delta)`` may replace the layer's own backward
    (used to inject faults for the negative control).
    """
    out, cache = layer.forward(x)
    proj = rng.normal(out.shape)
    backward = backward or (lambda l, c, d: l.backward(c, d))
    dx, grads = backward(layer, cache, proj)

    def loss():
        return float(np.sum(proj * layer.forward(x)[0]))

    results = [_compare(case, "input", dx, numeric_grad(loss, x))]
    for name, w in layer.params().items():
        results.append(_compare(case, name, grads[name], numeric_grad(loss, w)))
    return results


def check_softmax_ce(rng: Rng, m: int = 4, k: int = 5) -> list[CheckResult]:
    logits = rng.normal((m, k), 0.0, 2.0)
    labels = rng.integers(0, k, size=m)
    _, delta, _ = softmax_cross_entropy(logits, labels)

    def loss():
        return float(np.mean(softmax_cross_entropy(logits, labels)[0]))

    return [_compare("softmax-ce", "logits", delta, numeric_grad(loss, logits))]


def check_network(net: Sequential, x: np.ndarray, y: np.ndarray, rng: Rng,
                  case: str = "network", samples: Optional[int] = 25) -> list[CheckResult]:
    """Parameter grads of mean cross-entropy through the whole network.

    ``samples`` random entries per tensor are checked (None: all of them).
    """
    logits, caches = net.forward(x)
    _, delta, _ = softmax_cross_entropy(logits, y)
    grads = net.backward(delta, caches)

    def loss():
        return float(np.mean(softmax_cross_entropy(net.predict(x), y)[0]))

    results = []
    for name, w in net.params().items():
        coords = None
        if samples is not None and w.size > samples:
            coords = np.sort(rng.permutation(w.size)[:samples])
        num = numeric_grad(loss, w, coords=coords)
        results.append(_compare(case, name, grads[name], num, coords))
    return results


def _distinct(rng: Rng, shape) -> np.ndarray:
    """Random values with no near-ties, so max-pool windows have one winner."""
    n = int(np.prod(shape))
    vals = (rng.permutation(n) + rng.uniform(n, 0.1, 0.9)) / n * 4.0 - 2.0
    return vals.reshape(shape)


def _away_from_zero(rng: Rng, shape) -> np.ndarray:
    x = rng.normal(shape)
    return np.where(np.abs(x) < 0.05, np.sign(x) * 0.05 + x, x)


def run_suite(seed: int = 0, backward_override: Optional[dict] = None,
              include_network: bool = True) -> list[CheckResult]:
    """All layer cases plus LeNet end to end.

    ``backward_override`` maps a case name to a replacement backward.
    """
    rng = Rng(seed)
    over = backward_override or {}
    results = []
    for stride, pad in ((1, 0), (1, 1), (2, 0), (2, 1)):
        case = f"conv s={stride} p={pad}"
        layer = Conv2d(2, 3, 3, stride=stride, padding=pad, name="conv", rng=rng)
        layer.bias[...] = rng.normal(layer.bias.shape)
        results += check_layer(layer, rng.normal((2, 2, 7, 7)), rng, case, over.get(case))
    fc = Linear(6, 4, name="fc", rng=rng)
    fc.bias[...] = rng.normal(fc.bias.shape)
    results += check_layer(fc, rng.normal((3, 6)), rng, "fc", over.get("fc"))
    results += check_layer(ReLU(), _away_from_zero(rng, (2, 3, 4, 4)), rng, "relu",
                           over.get("relu"))
    results += check_layer(MaxPool2d(2), _distinct(rng, (2, 2, 6, 6)), rng, "maxpool",
                           over.get("maxpool"))
    results += check_softmax_ce(rng)
    if include_network:
        net = lenet5(rng)
        x = rng.normal((2, 1, 28, 28))
        y = rng.integers(0, 10, size=2)
        results += check_network(net, x, y, rng, "lenet5")
    return results


def corrupted_conv_backward(layer, cache, delta):
    """Deliberately wrong: error propagation without the kernel flip."""
    from .layers import conv_backward_error

    saved = layer.weight.copy()
    layer.weight[...] = saved[:, :, ::-1, ::-1]
    try:
        dx = conv_backward_error(layer, delta, input_hw=cache.x.shape[2:])
    finally:
        layer.weight[...] = saved
    _, grads = layer.backward(cache, delta, need_input_grad=False)
    return dx, grads
