"""Small float64 neural-network engine with reverse-mode gradients.

A :class:`Network` is a sequence of layer specs plus a flat, ordered dict of
parameters named ``"<layer index>.<name>"``. :func:`forward` returns logits and
a :class:`Tape`; :func:`backward` turns a gradient on the logits into
gradients for every parameter *and* for the input batch, which is what the
evasion attacks consume.

Shape conventions (per batch of ``n``):

* a 2-D input ``(n, L)`` feeding ``Conv1d`` is read as one channel, ``(n, 1, L)``;
* a 2-D input ``(n, T)`` feeding ``Lstm`` is read as ``T`` steps of size 1;
* ``Lstm`` emits the full hidden sequence ``(n, T, H)``; ``TakeLastStep`` keeps ``[:, -1]``.
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass, field
from typing import Any, Mapping, Sequence

import numpy as np

Params = dict[str, np.ndarray]


class GraphError(ValueError):
    pass


class TapeError(RuntimeError):
    pass


class NonFiniteGradientError(FloatingPointError):
    pass


# ----------------------------------------------------------------------- layers


@dataclass(frozen=True)
class Dense:
    in_features: int
    out_features: int

    def out_shape(self, shape: tuple[int, ...]) -> tuple[int, ...]:
        if shape != (self.in_features,):
            raise GraphError(f"{self} expects per-sample shape ({self.in_features},), got {shape}")
        return (self.out_features,)

    def init(self, rng: np.random.Generator) -> Params:
        bound = math.sqrt(6.0 / self.in_features)
        return {
            "weight": rng.uniform(-bound, bound, (self.in_features, self.out_features)),
            "bias": np.zeros(self.out_features),
        }

    def forward(self, p: Params, x: np.ndarray):
        return x @ p["weight"] + p["bias"], x

    def backward(self, p: Params, x, dy: np.ndarray, want_params: bool):
        grads = {"weight": x.T @ dy, "bias": dy.sum(axis=0)} if want_params else {}
        return dy @ p["weight"].T, grads


@dataclass(frozen=True)
class Relu:
    def out_shape(self, shape):
        return shape

    def init(self, rng):
        return {}

    def forward(self, p, x):
        mask = x > 0
        return np.where(mask, x, 0.0), mask

    def backward(self, p, mask, dy, want_params):
        return np.where(mask, dy, 0.0), {}


@dataclass(frozen=True)
class Conv1d:
    """Valid (unpadded) stride-1 convolution over ``(n, channels, length)``."""

    in_channels: int
    out_channels: int
    kernel: int

    def out_shape(self, shape):
        if len(shape) == 1 and self.in_channels == 1:
            shape = (1, shape[0])
        if len(shape) != 2 or shape[0] != self.in_channels:
            raise GraphError(f"{self} expects ({self.in_channels}, length), got {shape}")
        if shape[1] < self.kernel:
            raise GraphError(f"{self}: length {shape[1]} shorter than kernel")
        return (self.out_channels, shape[1] - self.kernel + 1)

    def init(self, rng):
        fan_in = self.in_channels * self.kernel
        bound = math.sqrt(6.0 / fan_in)
        return {
            "weight": rng.uniform(-bound, bound, (self.out_channels, self.in_channels, self.kernel)),
            "bias": np.zeros(self.out_channels),
        }

    def forward(self, p, x):
        squeeze = x.ndim == 2
        if squeeze:
            x = x[:, None, :]
        n, c, length = x.shape
        lout = length - self.kernel + 1
        windows = np.lib.stride_tricks.sliding_window_view(x, self.kernel, axis=2)  # n, c, lout, k
        patches = windows.transpose(0, 2, 1, 3).reshape(n, lout, c * self.kernel)
        w = p["weight"].reshape(self.out_channels, -1)
        y = patches @ w.T + p["bias"]
        return y.transpose(0, 2, 1), (patches, x.shape, squeeze)

    def backward(self, p, cache, dy, want_params):
        patches, xshape, squeeze = cache
        n, c, length = xshape
        lout = length - self.kernel + 1
        dyt = dy.transpose(0, 2, 1)  # n, lout, out
        w = p["weight"].reshape(self.out_channels, -1)
        grads = {}
        if want_params:
            flat = dyt.reshape(-1, self.out_channels)
            grads["weight"] = (flat.T @ patches.reshape(-1, c * self.kernel)).reshape(p["weight"].shape)
            grads["bias"] = flat.sum(axis=0)
        dpatch = (dyt @ w).reshape(n, lout, c, self.kernel)
        dx = np.zeros(xshape)
        for j in range(self.kernel):
            dx[:, :, j : j + lout] += dpatch[:, :, :, j].transpose(0, 2, 1)
        return (dx[:, 0, :] if squeeze else dx), grads


@dataclass(frozen=True)
class MaxPool1d:
    """Non-overlapping max pooling (stride = window); a ragged tail is dropped."""

    window: int = 2

    def out_shape(self, shape):
        if len(shape) != 2:
            raise GraphError(f"{self} expects (channels, length), got {shape}")
        if shape[1] < self.window:
            raise GraphError(f"{self}: length {shape[1]} shorter than window")
        return (shape[0], shape[1] // self.window)

    def init(self, rng):
        return {}

    def forward(self, p, x):
        n, c, length = x.shape
        lp = length // self.window
        xr = x[:, :, : lp * self.window].reshape(n, c, lp, self.window)
        arg = xr.argmax(axis=3)
        y = np.take_along_axis(xr, arg[..., None], axis=3)[..., 0]
        return y, (arg, x.shape)

    def backward(self, p, cache, dy, want_params):
        arg, xshape = cache
        n, c, length = xshape
        lp = length // self.window
        hit = arg[..., None] == np.arange(self.window)
        dx = np.zeros(xshape)
        dx[:, :, : lp * self.window] = (hit * dy[..., None]).reshape(n, c, lp * self.window)
        return dx, {}


@dataclass(frozen=True)
class Flatten:
    def out_shape(self, shape):
        return (int(np.prod(shape)),)

    def init(self, rng):
        return {}

    def forward(self, p, x):
        return x.reshape(x.shape[0], -1), x.shape

    def backward(self, p, shape, dy, want_params):
        return dy.reshape(shape), {}


@dataclass(frozen=True)
class Lstm:
    """Single-layer LSTM, gates ordered input/forget/cell/output.

    Zero initial state. Emits every hidden state, ``(n, T, hidden)``.
    """

    input_size: int
    hidden_size: int

    def out_shape(self, shape):
        if len(shape) == 1 and self.input_size == 1:
            shape = (shape[0], 1)
        if len(shape) != 2 or shape[1] != self.input_size:
            raise GraphError(f"{self} expects (steps, {self.input_size}), got {shape}")
        return (shape[0], self.hidden_size)

    def init(self, rng):
        h = self.hidden_size
        bound = 1.0 / math.sqrt(h)
        bias = rng.uniform(-bound, bound, 4 * h)
        bias[h : 2 * h] = 1.0
        return {
            "w_input": rng.uniform(-bound, bound, (self.input_size, 4 * h)),
            "w_hidden": rng.uniform(-bound, bound, (h, 4 * h)),
            "bias": bias,
        }

    def forward(self, p, x):
        squeeze = x.ndim == 2
        if squeeze:
            x = x[:, :, None]
        n, steps, _ = x.shape
        h = self.hidden_size
        xs = np.ascontiguousarray(x.transpose(1, 0, 2))  # time-major
        # sigmoid(z) = 0.5 tanh(z / 2) + 0.5, so all four gates take one tanh per step
        scale = np.full(4 * h, 0.5)
        scale[2 * h : 3 * h] = 1.0
        shift = 1.0 - scale
        pre_in = (xs @ p["w_input"] + p["bias"]) * scale  # T, n, 4h
        w_hidden = p["w_hidden"] * scale
        hs = np.zeros((steps + 1, n, h))
        cs = np.zeros((steps + 1, n, h))
        acts = np.empty((steps, n, 4 * h))
        tanh_c = np.empty((steps, n, h))
        for t in range(steps):
            a = acts[t]
            np.matmul(hs[t], w_hidden, out=a)
            a += pre_in[t]
            np.tanh(a, out=a)
            a *= scale
            a += shift
            c = cs[t + 1]
            np.multiply(a[:, h : 2 * h], cs[t], out=c)
            c += a[:, :h] * a[:, 2 * h : 3 * h]
            np.tanh(c, out=tanh_c[t])
            np.multiply(a[:, 3 * h :], tanh_c[t], out=hs[t + 1])
        y = hs[1:].transpose(1, 0, 2)
        return y, (xs, hs, cs, acts, tanh_c, squeeze)

    def backward(self, p, cache, dy, want_params):
        xs, hs, cs, acts, tanh_c, squeeze = cache
        steps, n, _ = xs.shape
        h = self.hidden_size
        w_hidden_t = np.ascontiguousarray(p["w_hidden"].T)
        dys = dy.transpose(1, 0, 2)
        live = np.any(dys != 0, axis=(1, 2))
        # local gate derivatives for every step at once; the recurrence only rescales them
        i, f, g, o = (acts[..., k * h : (k + 1) * h] for k in range(4))
        dz = np.empty((steps, n, 4 * h))
        dz[..., :h] = g * i * (1.0 - i)
        dz[..., h : 2 * h] = cs[:-1] * f * (1.0 - f)
        dz[..., 2 * h : 3 * h] = i * (1.0 - g * g)
        dz[..., 3 * h :] = tanh_c * o * (1.0 - o)
        dc_gain = o * (1.0 - tanh_c * tanh_c)
        gates = dz.reshape(steps, n, 4, h)
        dh = np.zeros((n, h))
        dc = np.zeros((n, h))
        for t in range(steps - 1, -1, -1):
            if live[t]:
                dh += dys[t]
            dc += dh * dc_gain[t]
            gates[t, :, :3] *= dc[:, None, :]
            gates[t, :, 3] *= dh
            dc *= f[t]
            dh = dz[t] @ w_hidden_t
        dx = (dz @ p["w_input"].T).transpose(1, 0, 2)
        grads = {}
        if want_params:
            flat_dz = dz.reshape(-1, 4 * h)
            grads["w_input"] = xs.reshape(-1, xs.shape[2]).T @ flat_dz
            grads["w_hidden"] = hs[:-1].reshape(-1, h).T @ flat_dz
            grads["bias"] = flat_dz.sum(axis=0)
        return (dx[:, :, 0] if squeeze else dx), grads


@dataclass(frozen=True)
class TakeLastStep:
    def out_shape(self, shape):
        if len(shape) != 2:
            raise GraphError(f"{self} expects (steps, features), got {shape}")
        return (shape[1],)

    def init(self, rng):
        return {}

    def forward(self, p, x):
        return x[:, -1, :], x.shape

    def backward(self, p, shape, dy, want_params):
        dx = np.zeros(shape)
        dx[:, -1, :] = dy
        return dx, {}


LayerSpec = Dense | Relu | Conv1d | MaxPool1d | Flatten | Lstm | TakeLastStep
LAYER_TYPES = {cls.__name__: cls for cls in (Dense, Relu, Conv1d, MaxPool1d, Flatten, Lstm, TakeLastStep)}


def layer_to_dict(layer: LayerSpec) -> dict[str, Any]:
    return {"type": type(layer).__name__, **layer.__dict__}


def layer_from_dict(d: Mapping[str, Any]) -> LayerSpec:
    d = dict(d)
    return LAYER_TYPES[d.pop("type")](**d)


# ---------------------------------------------------------------------- network


def infer_shapes(layers: Sequence[LayerSpec], input_width: int) -> list[tuple[int, ...]]:
    """Per-sample output shape of every layer; raises GraphError naming the culprit."""
    shapes = []
    shape: tuple[int, ...] = (input_width,)
    for idx, layer in enumerate(layers):
        try:
            shape = layer.out_shape(shape)
        except GraphError as exc:
            raise GraphError(f"layer {idx} ({type(layer).__name__}): {exc}") from None
        shapes.append(shape)
    return shapes


@dataclass(frozen=True, eq=False)
class Network:
    layers: tuple[LayerSpec, ...]
    params: Params
    input_width: int

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        template = parameter_shapes(self.layers, self.input_width)
        if list(template) != list(self.params):
            raise GraphError(f"parameter names {list(self.params)} do not match template {list(template)}")
        frozen = {}
        for name, shape in template.items():
            arr = np.array(self.params[name], dtype=np.float64)
            if arr.shape != shape:
                raise GraphError(f"parameter {name} has shape {arr.shape}, expected {shape}")
            arr.flags.writeable = False
            frozen[name] = arr
        object.__setattr__(self, "params", frozen)

    @property
    def output_width(self) -> int:
        return infer_shapes(self.layers, self.input_width)[-1][0]

    def n_parameters(self) -> int:
        return sum(p.size for p in self.params.values())

    def layer_params(self, idx: int) -> Params:
        prefix = f"{idx}."
        return {k[len(prefix) :]: v for k, v in self.params.items() if k.startswith(prefix)}

    def with_params(self, params: Params) -> "Network":
        return Network(self.layers, params, self.input_width)

    def logits(self, x: np.ndarray) -> np.ndarray:
        return forward(self, x, record=False)[0]

    def predict(self, x: np.ndarray) -> np.ndarray:
        return self.logits(x).argmax(axis=1)


def parameter_shapes(layers: Sequence[LayerSpec], input_width: int) -> dict[str, tuple[int, ...]]:
    return dict(_parameter_shapes(tuple(layers), input_width))


@functools.lru_cache(maxsize=64)
def _parameter_shapes(layers: tuple[LayerSpec, ...], input_width: int) -> tuple[tuple[str, tuple[int, ...]], ...]:
    infer_shapes(layers, input_width)
    rng = np.random.default_rng(0)
    shapes = {}
    for idx, layer in enumerate(layers):
        for name, arr in layer.init(rng).items():
            shapes[f"{idx}.{name}"] = arr.shape
    return tuple(shapes.items())


def build_network(layers: Sequence[LayerSpec], input_width: int, seed: int) -> Network:
    infer_shapes(layers, input_width)
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    params = {}
    for idx, layer in enumerate(layers):
        for name, arr in layer.init(rng).items():
            params[f"{idx}.{name}"] = arr
    return Network(tuple(layers), params, input_width)


@dataclass
class Tape:
    network: Network
    caches: list
    input_shape: tuple[int, ...]
    output_shape: tuple[int, ...]
    consumed: bool = False


@dataclass
class Gradients:
    params: Params
    inputs: np.ndarray


def forward(network: Network, batch: np.ndarray, record: bool = True) -> tuple[np.ndarray, Tape | None]:
    x = np.asarray(batch, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != network.input_width:
        raise GraphError(f"batch of shape {x.shape} does not match input width {network.input_width}")
    caches = []
    out = x
    for idx, layer in enumerate(network.layers):
        out, cache = layer.forward(network.layer_params(idx), out)
        if record:
            caches.append(cache)
    tape = Tape(network, caches, x.shape, out.shape) if record else None
    return out, tape


def backward(tape: Tape, loss_grad: np.ndarray, want_params: bool = True) -> Gradients:
    """Propagate d(loss)/d(logits) back through a recorded forward pass.

    A tape can be replayed only once; ``want_params=False`` skips the
    parameter-gradient products when only input gradients are needed.
    """
    if tape.consumed:
        raise TapeError("tape already consumed by a previous backward()")
    g = np.asarray(loss_grad, dtype=np.float64)
    if g.shape != tape.output_shape:
        raise TapeError(f"loss gradient shape {g.shape} does not match recorded output {tape.output_shape}")
    net = tape.network
    grads: Params = {}
    for idx in range(len(net.layers) - 1, -1, -1):
        layer = net.layers[idx]
        g, layer_grads = layer.backward(net.layer_params(idx), tape.caches[idx], g, want_params)
        for name, arr in layer_grads.items():
            grads[f"{idx}.{name}"] = arr
    tape.consumed = True
    ordered = {k: grads[k] for k in net.params} if want_params else {}
    return Gradients(ordered, g)


# ------------------------------------------------------------------------- loss


def _check_labels(logits: np.ndarray, labels) -> np.ndarray:
    y = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or y.shape != (logits.shape[0],):
        raise GraphError(f"logits {logits.shape} and labels {y.shape} disagree")
    if y.size and (y.min() < 0 or y.max() >= logits.shape[1]):
        raise GraphError("label outside the class range")
    return y


def cross_entropy(logits: np.ndarray, labels) -> float:
    """Mean softmax cross-entropy, stabilised by subtracting the row max."""
    z = np.asarray(logits, dtype=np.float64)
    y = _check_labels(z, labels)
    z = z - z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    return float(np.mean(lse - z[np.arange(len(y)), y]))


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def cross_entropy_grad(logits: np.ndarray, labels) -> np.ndarray:
    """d(mean loss)/d(logits) = (softmax - one_hot) / n."""
    z = np.asarray(logits, dtype=np.float64)
    y = _check_labels(z, labels)
    g = softmax(z)
    g[np.arange(len(y)), y] -= 1.0
    return g / len(y)


def loss_and_gradients(network: Network, x: np.ndarray, labels, want_params: bool = True) -> tuple[float, Gradients]:
    logits, tape = forward(network, x)
    loss = cross_entropy(logits, labels)
    return loss, backward(tape, cross_entropy_grad(logits, labels), want_params)


# ------------------------------------------------------------------------- adam


@dataclass
class AdamState:
    first_moment: Params
    second_moment: Params
    step_count: int = 0
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps_stab: float = 1e-8

    @classmethod
    def zeros_like(cls, params: Params, **hyper) -> "AdamState":
        return cls(
            {k: np.zeros_like(v) for k, v in params.items()},
            {k: np.zeros_like(v) for k, v in params.items()},
            **hyper,
        )


def adam_step(params: Params, grads: Params, state: AdamState) -> tuple[Params, AdamState]:
    """One bias-corrected Adam update; inputs are left untouched."""
    if list(grads) != list(params):
        raise GraphError("gradient names do not match parameter names")
    for name, g in grads.items():
        if g.shape != params[name].shape:
            raise GraphError(f"gradient {name} has shape {g.shape}, parameter has {params[name].shape}")
        if not np.all(np.isfinite(g)):
            bad = int(np.size(g) - np.count_nonzero(np.isfinite(g)))
            raise NonFiniteGradientError(
                f"update rejected at step {state.step_count + 1}: {bad} non-finite entries in gradient {name}"
            )
    t = state.step_count + 1
    b1, b2 = state.beta1, state.beta2
    corr1 = 1.0 - b1**t
    corr2 = 1.0 - b2**t
    new_params, m_new, v_new = {}, {}, {}
    for name, p in params.items():
        g = grads[name]
        m = b1 * state.first_moment[name] + (1.0 - b1) * g
        v = b2 * state.second_moment[name] + (1.0 - b2) * (g * g)
        new_params[name] = p - state.lr * (m / corr1) / (np.sqrt(v / corr2) + state.eps_stab)
        m_new[name] = m
        v_new[name] = v
    return new_params, AdamState(m_new, v_new, t, state.lr, b1, b2, state.eps_stab)
