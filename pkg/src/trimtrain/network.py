"""Sequential networks: the LeNet main model and the slim loss-prediction filter."""

from __future__ import annotations

from typing import Callable, Optional

import numpy as np

from . import emp
from .flops import FlopCounter, LayerDims, backward_flops, flops_forward
from .layers import Conv2d, Flatten, Linear, MaxPool2d, ReLU, ShapeError
from .tensor_core import Rng


class Sequential:
    def __init__(self, layers, input_shape):
        self.layers = list(layers)
        self.input_shape = tuple(input_shape)
        names = [layer.name for layer in self.layers]
        if len(set(names)) != len(names):
            raise ValueError(f"layer names must be unique: {names}")
        self._shapes = [self.input_shape]
        for layer in self.layers:
            self._shapes.append(tuple(layer.output_shape(self._shapes[-1])))
        # the first layer with parameters needs no input-side error map
        self._first_param = next((i for i, l in enumerate(self.layers) if l.params()), 0)
        self._profile = [layer.dims(self._shapes[i], first=(i <= self._first_param))
                         for i, layer in enumerate(self.layers)]

    @property
    def output_shape(self):
        return self._shapes[-1]

    def profile(self) -> list[LayerDims]:
        return list(self._profile)

    def conv_layers(self):
        return [l for l in self.layers if l.kind == "conv"]

    def flops_per_instance(self) -> dict:
        prof = self.profile()
        return {
            "forward": sum(flops_forward(d) for d in prof),
            "backward": sum(backward_flops(d) for d in prof),
        }

    # ------------------------------------------------------------------
    def params(self) -> dict:
        out = {}
        for layer in self.layers:
            for k, v in layer.params().items():
                out[f"{layer.name}.{k}"] = v
        return out

    def forward(self, x: np.ndarray, ledger: Optional[FlopCounter] = None,
                phase: str = "forward_main"):
        if tuple(x.shape[1:]) != self.input_shape:
            raise ShapeError("input", f"expected instances of shape {self.input_shape}, "
                             f"got {tuple(x.shape[1:])}")
        caches = []
        for layer, dims in zip(self.layers, self._profile):
            x, cache = layer.forward(x)
            caches.append(cache)
            if ledger is not None:
                ledger.add(phase, x.shape[0] * flops_forward(dims), layer.name)
        return x, caches

    def predict(self, x: np.ndarray, chunk: int = 1000) -> np.ndarray:
        """Logits without caches or FLOP charges; for evaluation."""
        outs = []
        for s in range(0, x.shape[0], chunk):
            out = x[s:s + chunk]
            for layer in self.layers:
                out, _ = layer.forward(out)
            outs.append(out)
        if not outs:
            return np.zeros((0, *self.output_shape))
        return np.concatenate(outs)

    def backward(self, delta: np.ndarray, caches, *,
                 select: Optional[Callable] = None,
                 ledger: Optional[FlopCounter] = None,
                 phases=("errorprop_main", "weightgrad_main")) -> dict:
        """Back-propagate ``delta`` (error map of the output) and return grads.

        ``select(layer, delta)`` may return a PruneDecision for a conv layer;
        the layer's backward then runs over the kept channels only.
        """
        grads = {}
        prof = self._profile
        for i in range(len(self.layers) - 1, -1, -1):
            layer, cache, dims = self.layers[i], caches[i], prof[i]
            need_dx = i > self._first_param
            if layer.kind == "conv":
                decision = select(layer, delta) if select is not None else None
                dx, gw, gb = emp.pruned_backward(layer, cache, delta, decision, ledger,
                                                 need_input_grad=need_dx, phases=phases)
                g = {"weight": gw, "bias": gb}
            else:
                dx, g = layer.backward(cache, delta, need_input_grad=need_dx)
                if ledger is not None and layer.kind == "fc":
                    m = delta.shape[0]
                    if need_dx:
                        ledger.add(phases[0], m * dims.c * dims.n, layer.name)
                    ledger.add(phases[1], m * dims.c * dims.n, layer.name)
            for k, v in g.items():
                grads[f"{layer.name}.{k}"] = v
            if not need_dx:
                break
            delta = dx
        return grads

    # ------------------------------------------------------------------
    def state_dict(self) -> dict:
        return {k: v.copy() for k, v in self.params().items()}

    def load_state_dict(self, state: dict) -> None:
        params = self.params()
        if set(state) != set(params):
            raise KeyError(f"parameter names differ: {sorted(set(state) ^ set(params))}")
        for k, v in state.items():
            if params[k].shape != v.shape:
                raise ShapeError(k, f"shape {v.shape} != {params[k].shape}")
            params[k][...] = v


def lenet5(rng: Rng, input_shape=(1, 28, 28), num_classes: int = 10) -> Sequential:
    """LeNet-5 with ReLU and max-pooling: conv5x5x6 (pad 2), conv5x5x16, fc 120-84-K."""
    c, h, w = input_shape
    layers = [
        Conv2d(c, 6, 5, padding=2, name="conv1", rng=rng),
        ReLU(name="relu1"),
        MaxPool2d(2, name="pool1"),
        Conv2d(6, 16, 5, name="conv2", rng=rng),
        ReLU(name="relu2"),
        MaxPool2d(2, name="pool2"),
        Flatten(name="flatten"),
    ]
    probe = Sequential(layers, input_shape)
    flat = probe.output_shape[0]
    layers += [
        Linear(flat, 120, name="fc1", rng=rng),
        ReLU(name="relu3"),
        Linear(120, 84, name="fc2", rng=rng),
        ReLU(name="relu4"),
        Linear(84, num_classes, name="fc3", rng=rng, gain=1.0),
    ]
    return Sequential(layers, input_shape)


def slim_lenet(rng: Rng, input_shape=(1, 28, 28), outputs: int = 2,
               filters=(6, 16), first_stride: int = 2) -> Sequential:
    """Loss-prediction filter: 3x3 convs with {6, 16} filters and a 2-way head.

    The strided first conv keeps its forward cost near 2% of LeNet-5.
    """
    c = input_shape[0]
    layers = [
        Conv2d(c, filters[0], 3, stride=first_stride, name="f_conv1", rng=rng),
        ReLU(name="f_relu1"),
        MaxPool2d(2, name="f_pool1"),
        Conv2d(filters[0], filters[1], 3, name="f_conv2", rng=rng),
        ReLU(name="f_relu2"),
        MaxPool2d(2, name="f_pool2"),
        Flatten(name="f_flatten"),
    ]
    flat = Sequential(layers, input_shape).output_shape[0]
    layers.append(Linear(flat, outputs, name="f_fc", rng=rng, gain=1.0))
    return Sequential(layers, input_shape)


def small_cnn(rng: Rng, input_shape, num_classes: int, channels=(4, 6), stride2: int = 1,
              padding: int = 0) -> Sequential:
    """Two convs plus one fc; used for gradient checks and quick tests."""
    c = input_shape[0]
    layers = [
        Conv2d(c, channels[0], 3, padding=padding, name="conv1", rng=rng),
        ReLU(name="relu1"),
        Conv2d(channels[0], channels[1], 3, stride=stride2, padding=padding, name="conv2", rng=rng),
        ReLU(name="relu2"),
        MaxPool2d(2, name="pool"),
        Flatten(name="flatten"),
    ]
    flat = Sequential(layers, input_shape).output_shape[0]
    layers.append(Linear(flat, num_classes, name="fc", rng=rng, gain=1.0))
    return Sequential(layers, input_shape)
