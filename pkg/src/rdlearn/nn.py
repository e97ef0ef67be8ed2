"""A small float64 network engine: layer chain, named taps, reverse-mode
gradients and SGD with classical momentum.

Tensors are plain ``numpy.ndarray`` objects of dtype float64. Image batches
use NCHW layout. Fully connected layers flatten whatever they receive.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import NumericError, ShapeError
from .rng import substream

DTYPE = np.float64

LAYER_KINDS = (
    "Conv",
    "MaxPool",
    "FullyConnected",
    "ReLU",
    "Dropout",
    "Softmax",
    "LinearReadout",
)


@dataclass(frozen=True)
class LayerSpec:
    """Declarative description of one layer.

    ``kernel``/``stride`` apply to Conv and MaxPool, ``features`` to Conv,
    FullyConnected and LinearReadout, ``dropout_p`` to Dropout. ``tap``
    names the layer's output so auxiliary losses can attach there.
    """

    kind: str
    kernel: int = 0
    stride: int = 1
    features: int = 0
    dropout_p: float = 0.0
    tap: str | None = None

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ShapeError(f"unknown layer kind {self.kind!r}")
        if self.kind in ("Conv", "MaxPool"):
            if self.kernel <= 0 or self.stride <= 0:
                raise ShapeError(f"{self.kind}: kernel and stride must be positive")
        if self.kind in ("Conv", "FullyConnected", "LinearReadout") and self.features <= 0:
            raise ShapeError(f"{self.kind}: features must be positive")
        if not 0.0 <= self.dropout_p <= 1.0:
            raise ShapeError("dropout_p must lie in [0, 1]")


def mnist_table1_specs(num_classes: int = 10) -> list[LayerSpec]:
    """The MNIST CNN: two conv/pool stages, a 200-unit FC layer with
    dropout 0.5, a linear readout and a softmax. Taps: pool1, pool2, fc."""
    return [
        LayerSpec("Conv", kernel=5, stride=1, features=32),
        LayerSpec("ReLU"),
        LayerSpec("MaxPool", kernel=3, stride=3, tap="pool1"),
        LayerSpec("Conv", kernel=5, stride=1, features=64),
        LayerSpec("ReLU"),
        LayerSpec("MaxPool", kernel=2, stride=2, tap="pool2"),
        LayerSpec("FullyConnected", features=200),
        LayerSpec("ReLU", tap="fc"),
        LayerSpec("Dropout", dropout_p=0.5),
        LayerSpec("LinearReadout", features=num_classes),
        LayerSpec("Softmax"),
    ]


def glorot_uniform(rng: np.random.Generator, shape, fan_in: int, fan_out: int) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(DTYPE)


# ---------------------------------------------------------------------------
# Layers
# ---------------------------------------------------------------------------


class Layer:
    """Stateless apart from its parameters; forward returns ``(out, ctx)``
    and backward consumes that ``ctx``."""

    kind = ""
    spec: LayerSpec

    def __init__(self, spec: LayerSpec, input_shape: tuple[int, ...]):
        self.spec = spec
        self.input_shape = tuple(input_shape)
        self.params: dict[str, np.ndarray] = {}

    @property
    def output_shape(self) -> tuple[int, ...]:
        return self.input_shape

    def init_params(self, rng: np.random.Generator) -> None:
        pass

    def forward(self, x, train: bool, rng: np.random.Generator | None):
        raise NotImplementedError

    def backward(self, ctx, grad, need_input_grad: bool = True):
        """Return ``(input_grad or None, {param name: grad})``."""
        raise NotImplementedError

    def param_count(self) -> int:
        return sum(p.size for p in self.params.values())


class Conv(Layer):
    """Valid (unpadded) 2-D convolution, weights shaped (F, C, k, k)."""

    kind = "Conv"

    def __init__(self, spec, input_shape):
        super().__init__(spec, input_shape)
        if len(input_shape) != 3:
            raise ShapeError(f"Conv expects (C, H, W) input, got {input_shape}")
        c, h, w = input_shape
        k, s = spec.kernel, spec.stride
        if h < k or w < k:
            raise ShapeError(f"Conv kernel {k} larger than input {h}x{w}")
        self.out_h = (h - k) // s + 1
        self.out_w = (w - k) // s + 1
        self.params = {
            "W": np.zeros((spec.features, c, k, k), DTYPE),
            "b": np.zeros(spec.features, DTYPE),
        }

    @property
    def output_shape(self):
        return (self.spec.features, self.out_h, self.out_w)

    def init_params(self, rng):
        f, c, k, _ = self.params["W"].shape
        self.params["W"] = glorot_uniform(rng, (f, c, k, k), c * k * k, f * k * k)
        self.params["b"] = np.zeros(f, DTYPE)

    def forward(self, x, train, rng):
        n = x.shape[0]
        k, s = self.spec.kernel, self.spec.stride
        win = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::s, ::s]
        win = win[:, :, : self.out_h, : self.out_w]
        cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * self.out_h * self.out_w, -1)
        w = self.params["W"]
        out = cols @ w.reshape(w.shape[0], -1).T + self.params["b"]
        out = out.reshape(n, self.out_h, self.out_w, -1).transpose(0, 3, 1, 2)
        return np.ascontiguousarray(out), (cols, x.shape)

    def backward(self, ctx, grad, need_input_grad=True):
        cols, xshape = ctx
        w = self.params["W"]
        f = w.shape[0]
        g2 = grad.transpose(0, 2, 3, 1).reshape(-1, f)
        grads = {"W": (g2.T @ cols).reshape(w.shape), "b": g2.sum(axis=0)}
        if not need_input_grad:
            return None, grads
        n, c, h, wd = xshape
        k, s = self.spec.kernel, self.spec.stride
        oh, ow = self.out_h, self.out_w
        dcols = (g2 @ w.reshape(f, -1)).reshape(n, oh, ow, c, k, k)
        dx = np.zeros(xshape, DTYPE)
        for ki in range(k):
            for kj in range(k):
                dx[:, :, ki : ki + s * oh : s, kj : kj + s * ow : s] += dcols[
                    :, :, :, :, ki, kj
                ].transpose(0, 3, 1, 2)
        return dx, grads


class MaxPool(Layer):
    """Max pooling; ties go to the lowest flat index inside the window."""

    kind = "MaxPool"

    def __init__(self, spec, input_shape):
        super().__init__(spec, input_shape)
        if len(input_shape) != 3:
            raise ShapeError(f"MaxPool expects (C, H, W) input, got {input_shape}")
        c, h, w = input_shape
        k, s = spec.kernel, spec.stride
        if h < k or w < k:
            raise ShapeError(f"MaxPool window {k} larger than input {h}x{w}")
        self.out_h = (h - k) // s + 1
        self.out_w = (w - k) // s + 1

    @property
    def output_shape(self):
        return (self.input_shape[0], self.out_h, self.out_w)

    def forward(self, x, train, rng):
        k, s = self.spec.kernel, self.spec.stride
        n, c = x.shape[:2]
        win = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::s, ::s]
        win = win[:, :, : self.out_h, : self.out_w].reshape(n, c, self.out_h, self.out_w, k * k)
        idx = win.argmax(axis=-1)
        out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
        return out, (idx, x.shape)

    def backward(self, ctx, grad, need_input_grad=True):
        if not need_input_grad:
            return None, {}
        idx, xshape = ctx
        n, c, h, w = xshape
        k, s = self.spec.kernel, self.spec.stride
        rows = np.arange(self.out_h)[:, None] * s + idx // k
        cols = np.arange(self.out_w)[None, :] * s + idx % k
        flat = (rows * w + cols).reshape(n, c, -1)
        dx = np.zeros((n, c, h * w), DTYPE)
        g = grad.reshape(n, c, -1)
        if s >= k:
            # windows do not overlap, every target index is unique
            np.put_along_axis(dx, flat, g, axis=-1)
        else:
            ni, ci = np.meshgrid(np.arange(n), np.arange(c), indexing="ij")
            np.add.at(dx, (ni[..., None], ci[..., None], flat), g)
        return dx.reshape(xshape), {}


class FullyConnected(Layer):
    """Affine map on the flattened input, weights shaped (in, out)."""

    kind = "FullyConnected"

    def __init__(self, spec, input_shape):
        super().__init__(spec, input_shape)
        self.fan_in = int(np.prod(input_shape))
        self.params = {
            "W": np.zeros((self.fan_in, spec.features), DTYPE),
            "b": np.zeros(spec.features, DTYPE),
        }

    @property
    def output_shape(self):
        return (self.spec.features,)

    def init_params(self, rng):
        self.params["W"] = glorot_uniform(
            rng, (self.fan_in, self.spec.features), self.fan_in, self.spec.features
        )
        self.params["b"] = np.zeros(self.spec.features, DTYPE)

    def forward(self, x, train, rng):
        x2 = x.reshape(x.shape[0], -1)
        return x2 @ self.params["W"] + self.params["b"], (x2, x.shape)

    def backward(self, ctx, grad, need_input_grad=True):
        x2, xshape = ctx
        grads = {"W": x2.T @ grad, "b": grad.sum(axis=0)}
        dx = (grad @ self.params["W"].T).reshape(xshape) if need_input_grad else None
        return dx, grads


class LinearReadout(FullyConnected):
    kind = "LinearReadout"


class ReLU(Layer):
    kind = "ReLU"

    def forward(self, x, train, rng):
        mask = x > 0
        return x * mask, mask

    def backward(self, ctx, grad, need_input_grad=True):
        return (grad * ctx if need_input_grad else None), {}


class Dropout(Layer):
    """Inverted dropout: survivors are scaled by 1/(1-p) at train time and
    eval mode is the identity."""

    kind = "Dropout"

    def forward(self, x, train, rng):
        p = self.spec.dropout_p
        if not train or p == 0.0:
            return x, None
        if p == 1.0:
            return np.zeros_like(x), np.zeros_like(x)
        if rng is None:
            raise ValueError("train-mode dropout needs an rng seed")
        scale = (rng.random(x.shape) >= p) / (1.0 - p)
        return x * scale, scale

    def backward(self, ctx, grad, need_input_grad=True):
        if not need_input_grad:
            return None, {}
        return (grad if ctx is None else grad * ctx), {}


class Softmax(Layer):
    kind = "Softmax"

    def forward(self, x, train, rng):
        y = softmax(x)
        return y, y

    def backward(self, ctx, grad, need_input_grad=True):
        if not need_input_grad:
            return None, {}
        y = ctx
        return y * (grad - np.sum(grad * y, axis=1, keepdims=True)), {}


LAYER_CLASSES = {
    cls.kind: cls for cls in (Conv, MaxPool, FullyConnected, LinearReadout, ReLU, Dropout, Softmax)
}


def softmax(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def build_layer(spec: LayerSpec, input_shape) -> Layer:
    return LAYER_CLASSES[spec.kind](spec, input_shape)


# ---------------------------------------------------------------------------
# Network
# ---------------------------------------------------------------------------


@dataclass
class ForwardResult:
    outputs: np.ndarray
    taps: dict[str, np.ndarray]
    logits: np.ndarray
    ctxs: list = field(repr=False, default_factory=list)
    input_shape: tuple = ()


@dataclass
class Gradients:
    params: list[dict[str, np.ndarray]]
    input_grad: np.ndarray | None = None


class Network:
    """Linear chain of layers with named output taps.

    Shapes are propagated and validated at construction; ``shapes`` holds the
    output shape of every layer (per example, without the batch axis).
    """

    def __init__(self, specs: Iterable[LayerSpec], input_shape, seed: int | None = 0):
        self.specs = list(specs)
        self.input_shape = tuple(int(d) for d in input_shape)
        self.layers: list[Layer] = []
        self.shapes: list[tuple[int, ...]] = []
        self.taps: dict[str, int] = {}
        shape = self.input_shape
        for i, spec in enumerate(self.specs):
            try:
                layer = build_layer(spec, shape)
            except ShapeError as exc:
                raise ShapeError(f"layer {i} ({spec.kind}): {exc}") from None
            shape = layer.output_shape
            self.layers.append(layer)
            self.shapes.append(shape)
            if spec.tap is not None:
                if spec.tap in self.taps:
                    raise ShapeError(f"duplicate tap name {spec.tap!r}")
                self.taps[spec.tap] = i
        if not self.layers:
            raise ShapeError("network has no layers")
        last = len(self.layers) - 1
        self.logits_index = last - 1 if self.layers[last].kind == "Softmax" else last
        if seed is not None:
            self.init_params(seed)

    # -- parameters --------------------------------------------------------

    def init_params(self, seed: int) -> None:
        for i, layer in enumerate(self.layers):
            layer.init_params(substream(seed, "init", i))

    def parameters(self) -> list[tuple[int, str, np.ndarray]]:
        return [(i, name, p) for i, layer in enumerate(self.layers) for name, p in layer.params.items()]

    def param_count(self) -> int:
        return sum(layer.param_count() for layer in self.layers)

    def copy(self) -> "Network":
        net = Network(self.specs, self.input_shape, seed=None)
        for dst, src in zip(net.layers, self.layers):
            dst.params = {k: v.copy() for k, v in src.params.items()}
        return net

    def tap_shape(self, tap: str) -> tuple[int, ...]:
        return self.shapes[self.resolve_tap(tap)]

    def resolve_tap(self, tap: str) -> int:
        if tap == "logits":
            return self.logits_index
        try:
            return self.taps[tap]
        except KeyError:
            raise ShapeError(f"unknown tap {tap!r}; known taps: {sorted(self.taps)}") from None

    # -- passes ------------------------------------------------------------

    def forward(self, batch: np.ndarray, mode: str = "eval", rng_seed: int | None = None,
                stop_at: int | None = None) -> ForwardResult:
        """Run the chain on ``batch`` (N, *input_shape).

        ``mode`` is ``"train"`` or ``"eval"``; dropout masks in train mode
        come from ``substream(rng_seed, "dropout", layer index)``.
        ``stop_at`` truncates the pass after that layer index.
        """
        if mode not in ("train", "eval"):
            raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
        x = np.asarray(batch, dtype=DTYPE)
        if x.shape[1:] != self.input_shape:
            raise ShapeError(f"batch shape {x.shape[1:]} does not match input shape {self.input_shape}")
        train = mode == "train"
        last = len(self.layers) - 1 if stop_at is None else stop_at
        ctxs = []
        taps: dict[str, np.ndarray] = {}
        logits = None
        for i, layer in enumerate(self.layers[: last + 1]):
            rng = substream(rng_seed, "dropout", i) if (train and layer.kind == "Dropout" and rng_seed is not None) else None
            x, ctx = layer.forward(x, train, rng)
            if not np.isfinite(x).all():
                raise NumericError(f"non-finite activation at layer {i} ({layer.kind})")
            ctxs.append(ctx)
            if layer.spec.tap is not None:
                taps[layer.spec.tap] = x
            if i == self.logits_index:
                logits = x
        return ForwardResult(outputs=x, taps=taps, logits=logits, ctxs=ctxs, input_shape=batch.shape)

    def backward(self, result: ForwardResult, output_grad: np.ndarray | None = None,
                 tap_grads: dict[str, np.ndarray] | None = None,
                 tap_weights: dict[str, float] | None = None,
                 wrt: str = "logits", need_input_grad: bool = False) -> Gradients:
        """Reverse pass.

        ``output_grad`` is the loss gradient w.r.t. the logits (``wrt="logits"``,
        the Softmax layer is then skipped) or w.r.t. the final output
        (``wrt="output"``). Each ``tap_grads[name]`` is added into the
        backward stream at that tap, weighted by ``tap_weights[name]``
        (default 1). Without ``output_grad`` the pass starts at the deepest
        tap that carries a gradient.
        """
        from .rdl import combine_gradients

        tap_grads = dict(tap_grads or {})
        tap_weights = tap_weights or {}
        tap_at = {}
        for name, g in tap_grads.items():
            if name not in self.taps:
                raise ShapeError(f"gradient supplied for unknown tap {name!r}")
            idx = self.taps[name]
            if idx >= len(result.ctxs):
                raise ShapeError(f"tap {name!r} was not reached by the forward pass")
            expected = (result.input_shape[0],) + self.shapes[idx]
            if g.shape != expected:
                raise ShapeError(f"tap gradient {name!r} has shape {g.shape}, expected {expected}")
            tap_at[idx] = name

        if output_grad is not None:
            start = self.logits_index if wrt == "logits" else len(result.ctxs) - 1
            expected = (result.input_shape[0],) + self.shapes[start]
            if output_grad.shape != expected:
                raise ShapeError(f"output gradient has shape {output_grad.shape}, expected {expected}")
            grad = np.asarray(output_grad, DTYPE)
        elif tap_at:
            start = max(tap_at)
            grad = np.zeros((result.input_shape[0],) + self.shapes[start], DTYPE)
        else:
            start = -1
            grad = None

        param_grads = [{k: np.zeros_like(v) for k, v in layer.params.items()} for layer in self.layers]
        for i in range(start, -1, -1):
            if i in tap_at:
                name = tap_at[i]
                grad = combine_gradients(grad, tap_grads[name], tap_weights.get(name, 1.0))
            layer = self.layers[i]
            need = need_input_grad or i > 0
            grad, pg = layer.backward(result.ctxs[i], grad, need_input_grad=need)
            for k, g in pg.items():
                if not np.isfinite(g).all():
                    raise NumericError(f"non-finite gradient for {k} at layer {i} ({layer.kind})")
                param_grads[i][k] = g
            if grad is not None and not np.isfinite(grad).all():
                raise NumericError(f"non-finite gradient entering layer {i} ({layer.kind})")
        input_grad = grad if need_input_grad else None
        return Gradients(params=param_grads, input_grad=input_grad)

    def predict(self, images: np.ndarray, batch_size: int = 500) -> np.ndarray:
        """Eval-mode class predictions (argmax of logits)."""
        out = [self.forward(images[s : s + batch_size]).logits.argmax(axis=1)
               for s in range(0, len(images), batch_size)]
        return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)

    def activations(self, images: np.ndarray, taps: Iterable[str], batch_size: int = 500) -> dict[str, np.ndarray]:
        """Eval-mode activations at the given taps (``"logits"`` allowed)."""
        taps = list(taps)
        idx = [self.resolve_tap(t) for t in taps]
        chunks = {t: [] for t in taps}
        for s in range(0, len(images), batch_size):
            res = self.forward(images[s : s + batch_size], stop_at=max(idx))
            for t in taps:
                chunks[t].append(res.logits if t == "logits" else res.taps[t])
        return {t: np.concatenate(v) for t, v in chunks.items()}


# ---------------------------------------------------------------------------
# Loss and optimiser
# ---------------------------------------------------------------------------


def softmax_xent(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean softmax cross-entropy and its gradient w.r.t. ``logits``."""
    labels = np.asarray(labels)
    n, k = logits.shape
    if labels.shape != (n,):
        raise ShapeError(f"labels shape {labels.shape} does not match batch {n}")
    if n and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"label out of range [0, {k})")
    z = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(n)
    loss = float(np.mean(lse - z[rows, labels]))
    grad = softmax(logits)
    grad[rows, labels] -= 1.0
    return loss, grad / n


@dataclass
class SgdState:
    """Classical (heavy-ball) momentum: ``v <- m*v - lr*g; p <- p + v``."""

    learning_rate: float
    momentum: float = 0.9
    velocity: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")


def sgd_step(state: SgdState, params: list[tuple[object, np.ndarray]], grads: list[np.ndarray]) -> None:
    """Update ``params`` in place. ``params`` pairs a stable key with each
    array; velocities are kept per key in ``state``."""
    if len(params) != len(grads):
        raise ShapeError("parameter and gradient lists differ in length")
    updates = []
    for (key, p), g in zip(params, grads):
        if p.shape != g.shape:
            raise ShapeError(f"gradient shape {g.shape} does not match parameter {key} {p.shape}")
        v = state.velocity.get(key)
        if v is None:
            v = np.zeros_like(p)
        elif v.shape != p.shape:
            raise ShapeError(f"velocity shape {v.shape} does not match parameter {key} {p.shape}")
        v = state.momentum * v - state.learning_rate * g
        if not np.isfinite(v).all():
            raise NumericError(f"non-finite update for parameter {key}")
        updates.append((key, p, v))
    for key, p, v in updates:
        state.velocity[key] = v
        p += v


def network_sgd_step(state: SgdState, net: Network, grads: Gradients, layers: Iterable[int] | None = None,
                     prefix: str = "") -> None:
    """Apply ``sgd_step`` to the parameters of ``net`` (optionally only the given layer indices)."""
    keep = None if layers is None else set(layers)
    params, gs = [], []
    for i, name, p in net.parameters():
        if keep is not None and i not in keep:
            continue
        params.append(((prefix, i, name), p))
        gs.append(grads.params[i][name])
    sgd_step(state, params, gs)
