"""Networks, losses, and the momentum-SGD optimizer.

Networks are ordered stacks of dense/convolution/pooling/activation layers
over float64 tensors.  Forward passes are pure functions of (input, params),
so the same network object can be evaluated concurrently against read-only
parameter snapshots while a training thread owns the live parameters.

The stock activation is the half-Huber rectifier (``hhrelu``): zero for
negative inputs, a quadratic toe ``d*x^2`` up to ``1/(2d)``, linear above.
Its derivative is continuous, which keeps input-gradient penalties trainable.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Variable

__all__ = [
    "Dense",
    "Conv2d",
    "AvgPool",
    "GlobalAvgPool",
    "Activation",
    "Flatten",
    "Network",
    "ForwardPass",
    "run_forward",
    "build_mlp",
    "build_preset",
    "PRESETS",
    "softmax",
    "softmax_values",
    "cross_entropy",
    "ScheduleConfig",
    "lr_schedule",
    "OptimizerConfig",
    "OptimizerState",
    "init_optimizer",
    "sgd_step",
    "save_checkpoint",
    "load_checkpoint",
]


class ConfigError(ValueError):
    """Invalid layer/optimizer/schedule configuration."""


# ---------------------------------------------------------------------------
# Layers


@dataclass
class Dense:
    in_dim: int
    out_dim: int
    zero_init: bool = False
    kind: str = "dense"


@dataclass
class Conv2d:
    in_ch: int
    out_ch: int
    kernel: int = 3
    stride: int = 1
    pad: int = 1
    kind: str = "conv"


@dataclass
class AvgPool:
    k: int = 2
    kind: str = "avgpool"


@dataclass
class GlobalAvgPool:
    kind: str = "globalavgpool"


@dataclass
class Activation:
    fn: str = "hhrelu"  # or "relu"
    d: float = 1.0
    kind: str = "activation"

    def __post_init__(self):
        if self.fn == "hhrelu" and self.d <= 0:
            raise ConfigError("hhrelu activation requires d > 0")


@dataclass
class Flatten:
    kind: str = "flatten"


_LAYER_TYPES = {
    "dense": Dense,
    "conv": Conv2d,
    "avgpool": AvgPool,
    "globalavgpool": GlobalAvgPool,
    "activation": Activation,
    "flatten": Flatten,
}


def _layer_config(layer) -> dict:
    cfg = {k: v for k, v in layer.__dict__.items()}
    return cfg


def _layer_from_config(cfg: dict):
    cls = _LAYER_TYPES[cfg["kind"]]
    return cls(**{k: v for k, v in cfg.items() if k != "kind"})


class Network:
    """Ordered parameterized layers producing pre-softmax logits.

    Parameters are plain float64 arrays in ``params`` keyed by unique names;
    ``param_kinds`` tags each as "weight" or "bias" so weight decay can be
    applied per class.  ``forward`` works on batches shaped
    ``(N, *input_shape)``.
    """

    def __init__(self, layers, input_shape, n_classes, preset=None, rng=None):
        self.layers = list(layers)
        self.input_shape = tuple(int(s) for s in input_shape)
        self.n_classes = int(n_classes)
        self.preset = preset
        self.params: dict[str, np.ndarray] = {}
        self.param_kinds: dict[str, str] = {}
        self._check_composition()
        if rng is not None:
            self.init_params(rng)

    # -- construction -------------------------------------------------------

    def _check_composition(self):
        shape = self.input_shape
        for i, layer in enumerate(self.layers):
            shape = self._out_shape(layer, shape, i)
        if shape != (self.n_classes,):
            raise ConfigError(
                f"layers produce shape {shape}, expected ({self.n_classes},)")

    def _out_shape(self, layer, shape, i):
        if isinstance(layer, Dense):
            if shape != (layer.in_dim,):
                raise ConfigError(f"layer {i}: dense expects ({layer.in_dim},), got {shape}")
            return (layer.out_dim,)
        if isinstance(layer, Conv2d):
            if len(shape) != 3 or shape[0] != layer.in_ch:
                raise ConfigError(f"layer {i}: conv expects (C={layer.in_ch},H,W), got {shape}")
            c, h, w = shape
            oh = (h + 2 * layer.pad - layer.kernel) // layer.stride + 1
            ow = (w + 2 * layer.pad - layer.kernel) // layer.stride + 1
            return (layer.out_ch, oh, ow)
        if isinstance(layer, AvgPool):
            c, h, w = shape
            if h % layer.k or w % layer.k:
                raise ConfigError(f"layer {i}: pool {layer.k} does not divide {h}x{w}")
            return (c, h // layer.k, w // layer.k)
        if isinstance(layer, GlobalAvgPool):
            c, h, w = shape
            return (c,)
        if isinstance(layer, Flatten):
            return (int(np.prod(shape)),)
        if isinstance(layer, Activation):
            return shape
        raise ConfigError(f"unknown layer {layer!r}")

    def init_params(self, rng: np.random.Generator):
        """Uniform fan-in init for weights, zeros for biases; the final dense
        layer's weights start at zero so the network begins as a constant
        (uniform-softmax) predictor."""
        self.params.clear()
        self.param_kinds.clear()
        for i, layer in enumerate(self.layers):
            if isinstance(layer, Dense):
                bound = 1.0 / math.sqrt(layer.in_dim)
                w = np.zeros((layer.in_dim, layer.out_dim)) if layer.zero_init \
                    else rng.uniform(-bound, bound, size=(layer.in_dim, layer.out_dim))
                self._add_param(f"layer{i}.w", w, "weight")
                self._add_param(f"layer{i}.b", np.zeros(layer.out_dim), "bias")
            elif isinstance(layer, Conv2d):
                fan_in = layer.in_ch * layer.kernel * layer.kernel
                bound = 1.0 / math.sqrt(fan_in)
                w = rng.uniform(-bound, bound,
                                size=(layer.out_ch, layer.in_ch, layer.kernel, layer.kernel))
                self._add_param(f"layer{i}.w", w, "weight")
                self._add_param(f"layer{i}.b", np.zeros(layer.out_ch), "bias")

    def _add_param(self, name, value, kind):
        if name in self.params:
            raise ConfigError(f"duplicate parameter name {name}")
        self.params[name] = np.asarray(value, dtype=np.float64)
        self.param_kinds[name] = kind

    def clone(self) -> "Network":
        dup = Network(self.layers, self.input_shape, self.n_classes, preset=self.preset)
        dup.params = {k: v.copy() for k, v in self.params.items()}
        dup.param_kinds = dict(self.param_kinds)
        return dup

    # -- evaluation ---------------------------------------------------------

    def lift_params(self, graph: ad.DiffGraph) -> dict[str, Variable]:
        """Wrap current parameters as gradient-carrying leaves on ``graph``."""
        return {k: graph.leaf(v, requires_grad=True) for k, v in self.params.items()}

    def forward(self, x: Variable, params: dict[str, Variable]) -> Variable:
        """Batch forward to logits; ``x`` is (N, *input_shape)."""
        h = x
        for i, layer in enumerate(self.layers):
            if isinstance(layer, Dense):
                h = ad.add(ad.matmul(h, params[f"layer{i}.w"]), params[f"layer{i}.b"])
            elif isinstance(layer, Conv2d):
                h = ad.conv2d(h, params[f"layer{i}.w"], params[f"layer{i}.b"],
                              stride=layer.stride, pad=layer.pad)
            elif isinstance(layer, AvgPool):
                h = ad.avg_pool(h, layer.k)
            elif isinstance(layer, GlobalAvgPool):
                n, c, hh, ww = h.shape
                h = ad.mul(ad.reduce_sum(h, axis=(2, 3)), 1.0 / (hh * ww))
            elif isinstance(layer, Flatten):
                n = h.shape[0]
                h = ad.reshape(h, (n, int(np.prod(h.shape[1:]))))
            elif isinstance(layer, Activation):
                h = ad.hhrelu(h, layer.d) if layer.fn == "hhrelu" else ad.relu(h)
        return h

    def logits(self, X: np.ndarray) -> np.ndarray:
        """Fast inference path: no tape, constants only."""
        X = np.asarray(X, dtype=np.float64)
        squeeze = X.shape == self.input_shape
        if squeeze:
            X = X[None]
        consts = {k: ad.constant(v) for k, v in self.params.items()}
        out = self.forward(ad.constant(X), consts).data
        return out[0] if squeeze else out

    def predict_proba(self, X: np.ndarray) -> np.ndarray:
        return softmax_values(self.logits(X))

    def predict(self, X: np.ndarray) -> np.ndarray:
        return np.argmax(self.logits(X), axis=-1)


@dataclass
class ForwardPass:
    """One recorded batch pass: the tape, the gradient-carrying input leaf,
    the logits, and the lifted parameter Variables."""
    graph: ad.DiffGraph
    x: Variable
    y: Variable
    params: dict


def run_forward(net: Network, X) -> ForwardPass:
    """Record a forward pass with input and parameters as gradient leaves."""
    g = ad.DiffGraph()
    params = net.lift_params(g)
    x = g.leaf(np.asarray(X, dtype=np.float64), requires_grad=True)
    return ForwardPass(g, x, net.forward(x, params), params)


# ---------------------------------------------------------------------------
# Presets


def build_mlp(dims, n_classes, d=1.0, zero_init_last=True, activation="hhrelu"):
    """Fully-connected stack: dims[0] -> ... -> dims[-1] -> n_classes."""
    layers = []
    widths = list(dims) + [n_classes]
    for i in range(len(widths) - 1):
        last = i == len(widths) - 2
        layers.append(Dense(widths[i], widths[i + 1], zero_init=zero_init_last and last))
        if not last:
            layers.append(Activation(activation, d))
    return layers


def _build_cnn_tiny(input_shape, n_classes, d=1.0):
    c, h, w = input_shape
    if h != w or h not in (8, 16, 32):
        raise ConfigError(f"cnn-tiny supports square 8/16/32 inputs, got {input_shape}")
    layers = []
    channels = [8, 16, 32]
    in_ch = c
    size = h
    for out_ch in channels:
        layers.append(Conv2d(in_ch, out_ch, kernel=3, stride=1, pad=1))
        layers.append(Activation("hhrelu", d))
        if size % 2 == 0 and size > 2:
            layers.append(AvgPool(2))
            size //= 2
        in_ch = out_ch
    layers.append(GlobalAvgPool())
    layers.append(Dense(channels[-1], n_classes, zero_init=True))
    return layers


def build_preset(name, input_shape, n_classes, d=1.0, rng=None) -> Network:
    input_shape = tuple(int(s) for s in input_shape)
    if name == "mlp-2d":
        if input_shape != (2,):
            raise ConfigError("mlp-2d expects 2 input features")
        layers = build_mlp([2, 32, 32], n_classes, d=d)
    elif name == "cnn-tiny":
        layers = _build_cnn_tiny(input_shape, n_classes, d=d)
    else:
        raise ConfigError(f"unknown architecture preset {name!r}")
    return Network(layers, input_shape, n_classes, preset=name, rng=rng)


PRESETS = ("mlp-2d", "cnn-tiny")


# ---------------------------------------------------------------------------
# Losses


def softmax(y: Variable) -> Variable:
    """Row-wise softmax of logits, stabilized by (constant) max subtraction,
    which is exact because softmax is translation invariant."""
    vec = len(y.shape) == 1
    if vec:
        y = ad.reshape(y, (1, y.shape[0]))
    shift = np.broadcast_to(y.data.max(axis=1, keepdims=True), y.shape)
    e = ad.exp(ad.sub(y, ad.constant(shift.copy())))
    denom = ad.expand(ad.reduce_sum(e, axis=1, keepdims=True), e.shape)
    s = ad.div(e, denom)
    return ad.reshape(s, (s.shape[1],)) if vec else s


def softmax_values(y: np.ndarray) -> np.ndarray:
    y = np.asarray(y, dtype=np.float64)
    shifted = y - y.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def cross_entropy(s: Variable, t) -> Variable:
    """Mean negative log-likelihood of true classes ``t`` given softmax rows
    ``s``.  Probabilities are floored at 1e-12 before the log so extreme
    attacks cannot produce -inf."""
    vec = len(s.shape) == 1
    if vec:
        s = ad.reshape(s, (1, s.shape[0]))
    t = np.atleast_1d(np.asarray(t, dtype=np.int64))
    n, v = s.shape
    if t.shape != (n,):
        raise ConfigError(f"labels shape {t.shape} does not match batch {n}")
    if np.any(t < 0) or np.any(t >= v):
        raise ConfigError("class index out of range")
    onehot = np.zeros((n, v))
    onehot[np.arange(n), t] = 1.0
    picked = ad.reduce_sum(ad.mul(s, ad.constant(onehot)), axis=1)
    return ad.mul(ad.reduce_sum(ad.neg(ad.log(ad.clamp(picked, 1e-12, None)))), 1.0 / n)


# ---------------------------------------------------------------------------
# Optimizer and learning-rate schedule


@dataclass
class ScheduleConfig:
    base_lr: float = 0.2
    warmup_epochs: int = 10
    step_epochs: tuple = (45, 55)
    step_factor: float = 0.1


def lr_schedule(epoch: int, cfg: ScheduleConfig) -> float:
    """Linear warmup from base/10 to base, then multiply by ``step_factor``
    at each configured step epoch."""
    if cfg.warmup_epochs > 0 and epoch < cfg.warmup_epochs:
        frac = epoch / cfg.warmup_epochs
        return cfg.base_lr * (0.1 + 0.9 * frac)
    lr = cfg.base_lr
    for step in cfg.step_epochs:
        if epoch >= step:
            lr *= cfg.step_factor
    return lr


@dataclass
class OptimizerConfig:
    momentum: float = 0.9
    weight_decay_weights: float = 1e-4
    weight_decay_biases: float = 1e-4


@dataclass
class OptimizerState:
    lr: float
    momentum: float
    weight_decay_weights: float
    weight_decay_biases: float
    velocities: dict = field(default_factory=dict)


def init_optimizer(net: Network, cfg: OptimizerConfig, lr: float) -> OptimizerState:
    if not 0.0 <= cfg.momentum < 1.0:
        raise ConfigError("momentum must be in [0, 1)")
    vel = {k: np.zeros_like(v) for k, v in net.params.items()}
    return OptimizerState(lr=lr, momentum=cfg.momentum,
                          weight_decay_weights=cfg.weight_decay_weights,
                          weight_decay_biases=cfg.weight_decay_biases,
                          velocities=vel)


def sgd_step(net: Network, state: OptimizerState, grads: dict) -> None:
    """v <- mu*v + g + decay*theta; theta <- theta - lr*v, with the decay
    constant chosen per parameter class (weight vs bias)."""
    missing = set(net.params) - set(grads)
    if missing:
        raise ConfigError(f"gradients missing for {sorted(missing)}")
    for name, theta in net.params.items():
        g = grads[name]
        if g.shape != theta.shape:
            raise ConfigError(f"gradient shape {g.shape} != param shape {theta.shape} for {name}")
        decay = state.weight_decay_weights if net.param_kinds[name] == "weight" \
            else state.weight_decay_biases
        v = state.velocities[name]
        v *= state.momentum
        v += g
        if decay:
            v += decay * theta
        theta -= state.lr * v


# ---------------------------------------------------------------------------
# Checkpoints: manifest.json + one AETN file per parameter, in layer order.


def _param_filename(name: str) -> str:
    return name.replace(".", "_") + ".aetn"


def save_checkpoint(net: Network, directory) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    for name in net.params:  # insertion order == layer order
        fname = _param_filename(name)
        ad.save_tensor(directory / fname, net.params[name])
        entries.append({"name": name, "kind": net.param_kinds[name], "file": fname})
    manifest = {
        "format": "robustkit-checkpoint",
        "version": 1,
        "preset": net.preset,
        "input_shape": list(net.input_shape),
        "n_classes": net.n_classes,
        "layers": [_layer_config(l) for l in net.layers],
        "params": entries,
    }
    with open(directory / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    return directory


def load_checkpoint(directory) -> Network:
    directory = Path(directory)
    with open(directory / "manifest.json") as fh:
        manifest = json.load(fh)
    if manifest.get("format") != "robustkit-checkpoint":
        raise ConfigError(f"{directory} is not a checkpoint directory")
    layers = [_layer_from_config(cfg) for cfg in manifest["layers"]]
    net = Network(layers, manifest["input_shape"], manifest["n_classes"],
                  preset=manifest.get("preset"))
    for entry in manifest["params"]:
        net._add_param(entry["name"], ad.load_tensor(directory / entry["file"]),
                       entry["kind"])
    return net
