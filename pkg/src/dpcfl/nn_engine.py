"""Dense feed-forward networks with analytic backprop and plain SGD.

Used for the per-task FL classifiers (softmax output) and for the per-BS
Q-networks (identity output). Everything is float64 numpy.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

ACTIVATIONS = ("relu", "identity", "softmax")
_ACT_CODE = {name: i for i, name in enumerate(ACTIVATIONS)}


class ShapeError(ValueError):
    """Raised when vector or layer dimensions do not chain."""


class NonFiniteLossError(FloatingPointError):
    pass


@dataclass
class Layer:
    weight: np.ndarray  # [out, in]
    bias: np.ndarray  # [out]
    activation: str = "relu"

    @property
    def n_in(self) -> int:
        return self.weight.shape[1]

    @property
    def n_out(self) -> int:
        return self.weight.shape[0]


@dataclass
class ModelParams:
    layers: list[Layer] = field(default_factory=list)

    def __post_init__(self):
        for k, layer in enumerate(self.layers):
            if layer.activation not in ACTIVATIONS:
                raise ValueError(f"layer {k}: unknown activation {layer.activation!r}")
            if layer.bias.shape != (layer.n_out,):
                raise ShapeError(f"layer {k}: bias shape {layer.bias.shape} != ({layer.n_out},)")
        for k in range(len(self.layers) - 1):
            if self.layers[k].n_out != self.layers[k + 1].n_in:
                raise ShapeError(
                    f"layer {k} output dim {self.layers[k].n_out} != layer {k + 1} input dim "
                    f"{self.layers[k + 1].n_in}"
                )

    @property
    def n_in(self) -> int:
        return self.layers[0].n_in

    @property
    def n_out(self) -> int:
        return self.layers[-1].n_out

    @property
    def dim(self) -> int:
        return sum(l.weight.size + l.bias.size for l in self.layers)

    def shapes(self) -> list[tuple[int, int, str]]:
        return [(l.n_out, l.n_in, l.activation) for l in self.layers]

    def flatten(self) -> np.ndarray:
        parts = []
        for l in self.layers:
            parts.append(l.weight.ravel())
            parts.append(l.bias)
        return np.concatenate(parts)

    def with_flat(self, flat: np.ndarray) -> "ModelParams":
        """New model of the same architecture holding ``flat``."""
        flat = np.array(flat, dtype=np.float64)  # one copy; layers hold views into it
        if flat.shape != (self.dim,):
            raise ShapeError(f"flat vector length {flat.shape} != model dim {self.dim}")
        layers = []
        pos = 0
        for l in self.layers:
            nw = l.weight.size
            w = flat[pos:pos + nw].reshape(l.weight.shape)
            pos += nw
            b = flat[pos:pos + l.n_out]
            pos += l.n_out
            layers.append(Layer(w, b, l.activation))
        return ModelParams(layers)

    def copy(self) -> "ModelParams":
        return ModelParams([Layer(l.weight.copy(), l.bias.copy(), l.activation) for l in self.layers])

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(l.weight)) and np.all(np.isfinite(l.bias)) for l in self.layers)


@dataclass
class GradientVec:
    values: np.ndarray
    clip_applied: bool = False
    pre_clip_norm: float = 0.0

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if not self.pre_clip_norm:
            self.pre_clip_norm = float(np.linalg.norm(self.values))

    @property
    def norm(self) -> float:
        return float(np.linalg.norm(self.values))


def init_model(sizes: Sequence[int], rng: np.random.Generator, output: str = "softmax") -> ModelParams:
    """ReLU MLP with ``len(sizes) - 1`` layers, U(-1/sqrt(fan_in), 1/sqrt(fan_in)) init.

    ``sizes=(d_in, n_classes)`` gives multinomial logistic regression.
    """
    if len(sizes) < 2:
        raise ValueError("need at least input and output sizes")
    layers = []
    for k in range(len(sizes) - 1):
        fan_in, fan_out = sizes[k], sizes[k + 1]
        bound = 1.0 / np.sqrt(fan_in)
        w = rng.uniform(-bound, bound, size=(fan_out, fan_in))
        b = rng.uniform(-bound, bound, size=fan_out)
        act = output if k == len(sizes) - 2 else "relu"
        layers.append(Layer(w, b, act))
    return ModelParams(layers)


def zeros_like(model: ModelParams) -> ModelParams:
    return model.with_flat(np.zeros(model.dim))


def _softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _forward_cache(model: ModelParams, X: np.ndarray):
    acts = [X]
    h = X
    for layer in model.layers:
        z = h @ layer.weight.T + layer.bias
        if layer.activation == "relu":
            h = np.maximum(z, 0.0)
        elif layer.activation == "softmax":
            h = _softmax(z)
        else:
            h = z
        acts.append(h)
    return acts


def _as_batch(model: ModelParams, x) -> np.ndarray:
    X = np.asarray(x, dtype=np.float64)
    X = np.atleast_2d(X)
    if X.shape[1] != model.n_in:
        raise ShapeError(f"input length {X.shape[1]} != model input dim {model.n_in}")
    return X


def forward(model: ModelParams, x) -> np.ndarray:
    """Output for one input vector (1-d) or a batch (2-d, one row per sample)."""
    X = np.asarray(x, dtype=np.float64)
    out = _forward_cache(model, _as_batch(model, X))[-1]
    return out[0] if X.ndim == 1 else out


def backward(model: ModelParams, X: np.ndarray, d_out: np.ndarray, acts=None) -> np.ndarray:
    """Flat gradient of ``sum(d_out * pre_activation_output)`` w.r.t. all parameters.

    ``d_out`` is the gradient with respect to the last layer's pre-activation
    (logits for softmax heads, the outputs themselves for identity heads).
    """
    if acts is None:
        acts = _forward_cache(model, X)
    grads: list[np.ndarray] = []
    delta = d_out
    for k in range(len(model.layers) - 1, -1, -1):
        layer = model.layers[k]
        h_in = acts[k]
        grads.append(delta.sum(axis=0))
        grads.append((delta.T @ h_in).ravel())
        if k > 0:
            delta = (delta @ layer.weight) * (acts[k] > 0)
    grads.reverse()
    return np.concatenate(grads)


def loss_and_grad(model: ModelParams, batch, l2: float = 0.0) -> tuple[float, GradientVec]:
    """Summed cross-entropy over the batch and its exact gradient.

    ``batch`` is either a list of ``(input, label)`` pairs or a tuple
    ``(X, y)`` of arrays. ``l2`` adds ``l2/2 * ||w||^2`` (used by the convex
    analysis harness; the FL path keeps it at zero).
    """
    X, y = _unpack(batch)
    if len(y) == 0:
        raise ValueError("empty batch")
    if model.layers[-1].activation != "softmax":
        raise ValueError("cross-entropy needs a softmax output layer")
    X = _as_batch(model, X)
    acts = _forward_cache(model, X)
    p = acts[-1]
    idx = np.arange(len(y))
    loss = float(-np.sum(np.log(np.clip(p[idx, y], 1e-300, None))))
    if not np.isfinite(loss):
        raise NonFiniteLossError(f"non-finite loss {loss} (max |w| = {np.abs(model.flatten()).max():.3g})")
    d = p.copy()
    d[idx, y] -= 1.0
    g = backward(model, X, d, acts)
    if l2:
        w = model.flatten()
        loss += 0.5 * l2 * float(w @ w)
        g = g + l2 * w
    return loss, GradientVec(g)


def loss_value(model: ModelParams, batch) -> float:
    X, y = _unpack(batch)
    p = forward(model, np.atleast_2d(X))
    return float(-np.sum(np.log(np.clip(p[np.arange(len(y)), y], 1e-300, None))))


def _unpack(batch):
    if isinstance(batch, tuple) and len(batch) == 2 and isinstance(batch[0], np.ndarray):
        X, y = batch
        return X, np.asarray(y, dtype=np.int64)
    batch = list(batch)
    if not batch:
        return np.zeros((0, 0)), np.zeros(0, dtype=np.int64)
    X = np.array([np.asarray(b[0], dtype=np.float64) for b in batch])
    y = np.array([int(b[1]) for b in batch], dtype=np.int64)
    return X, y


def sgd_step(model: ModelParams, grad: GradientVec | np.ndarray, rate: float) -> ModelParams:
    if rate <= 0:
        raise ValueError("rate must be positive")
    g = grad.values if isinstance(grad, GradientVec) else np.asarray(grad, dtype=np.float64)
    if g.shape != (model.dim,):
        raise ShapeError(f"gradient length {g.shape} != model dim {model.dim}")
    return model.with_flat(model.flatten() - rate * g)


def clip(grad: GradientVec, clip_bound: float) -> GradientVec:
    if clip_bound <= 0:
        raise ValueError("clip_bound must be positive")
    norm = grad.norm
    if norm <= clip_bound:
        return GradientVec(grad.values.copy(), clip_applied=False, pre_clip_norm=norm)
    return GradientVec(grad.values * (clip_bound / norm), clip_applied=True, pre_clip_norm=norm)


# -- checkpoints -----------------------------------------------------------
# Layout (little-endian): u32 n_layers, then per layer u32 out, u32 in,
# u32 activation code; followed by float64 parameters in flatten() order.

def save_checkpoint(model: ModelParams, path: str | Path) -> None:
    header = struct.pack("<I", len(model.layers))
    for out, inp, act in model.shapes():
        header += struct.pack("<III", out, inp, _ACT_CODE[act])
    Path(path).write_bytes(header + model.flatten().astype("<f8").tobytes())


def load_checkpoint(path: str | Path) -> ModelParams:
    raw = Path(path).read_bytes()
    (n,) = struct.unpack_from("<I", raw, 0)
    pos = 4
    layers = []
    for _ in range(n):
        out, inp, code = struct.unpack_from("<III", raw, pos)
        pos += 12
        layers.append(Layer(np.zeros((out, inp)), np.zeros(out), ACTIVATIONS[code]))
    skeleton = ModelParams(layers)
    flat = np.frombuffer(raw, dtype="<f8", offset=pos)
    if flat.size != skeleton.dim:
        raise ShapeError(f"checkpoint holds {flat.size} values, header implies {skeleton.dim}")
    return skeleton.with_flat(flat.astype(np.float64))
