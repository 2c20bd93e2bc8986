"""ReLU multilayer perceptron with exact reverse-mode gradients.

A network of depth ``L`` is ``L + 1`` affine maps with a ReLU between
consecutive maps::

    x -> A_0 -> relu -> A_1 -> relu -> ... -> A_L -> output

Everything is float64. The same container type holds parameters and
gradients (``GradBuffer`` is an alias of ``MlpParams``).
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, ShapeError

DEFAULT_WIDTH = 32


@dataclass
class MlpParams:
    weights: list[np.ndarray]  # each [out, in]
    biases: list[np.ndarray]  # each [out]

    def __post_init__(self):
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ShapeError("weights and biases must be non-empty lists of equal length")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.shape != (w.shape[0],):
                raise ShapeError(f"layer {i}: weight {w.shape} incompatible with bias {b.shape}")
            if i and w.shape[1] != self.weights[i - 1].shape[0]:
                raise ShapeError(f"layer {i} input {w.shape[1]} != layer {i - 1} output")

    @property
    def depth(self) -> int:
        return len(self.weights) - 1

    @property
    def widths(self) -> list[int]:
        return [self.weights[0].shape[1]] + [w.shape[0] for w in self.weights]

    @property
    def in_dim(self) -> int:
        return self.weights[0].shape[1]

    @property
    def out_dim(self) -> int:
        return self.weights[-1].shape[0]

    def arrays(self) -> list[np.ndarray]:
        """Parameter arrays in a fixed order (w0, b0, w1, b1, ...)."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    def copy(self) -> MlpParams:
        return MlpParams([w.copy() for w in self.weights], [b.copy() for b in self.biases])

    def zeros_like(self) -> MlpParams:
        return MlpParams([np.zeros_like(w) for w in self.weights],
                         [np.zeros_like(b) for b in self.biases])

    @property
    def size(self) -> int:
        return sum(a.size for a in self.arrays())

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays()])

    def with_flat(self, vec: np.ndarray) -> MlpParams:
        """New params of the same shapes filled from a flat vector."""
        vec = np.asarray(vec, dtype=np.float64)
        if vec.shape != (self.size,):
            raise ShapeError(f"flat vector has shape {vec.shape}, expected ({self.size},)")
        ws, bs, pos = [], [], 0
        for w, b in zip(self.weights, self.biases):
            ws.append(vec[pos:pos + w.size].reshape(w.shape).copy())
            pos += w.size
            bs.append(vec[pos:pos + b.size].copy())
            pos += b.size
        return MlpParams(ws, bs)

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(a)) for a in self.arrays())


GradBuffer = MlpParams


def mlp_init(d: int, k: int, W: int, L: int, seed: int) -> MlpParams:
    """Uniform fan-in initialisation in [-sqrt(6/fan_in), sqrt(6/fan_in)], zero biases."""
    if min(d, k, W) < 1 or L < 1:
        raise ConfigError(f"invalid MLP dimensions d={d} k={k} W={W} L={L}")
    rng = np.random.default_rng(seed)
    dims = [d] + [W] * L + [k]
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        lim = np.sqrt(6.0 / fan_in)
        weights.append(rng.uniform(-lim, lim, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    return MlpParams(weights, biases)


def forward_batch(p: MlpParams, X: np.ndarray) -> tuple[np.ndarray, list[np.ndarray]]:
    """Forward pass on rows of ``X``; returns outputs and the cache for backward.

    The cache holds the input of every affine map (``X`` followed by each
    hidden activation).
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != p.in_dim:
        raise ShapeError(f"input of shape {X.shape} does not match network input dim {p.in_dim}")
    inputs = [X]
    h = X
    last = len(p.weights) - 1
    for i, (w, b) in enumerate(zip(p.weights, p.biases)):
        h = h @ w.T + b
        if i < last:
            h = np.maximum(h, 0.0)
            inputs.append(h)
    return h, inputs


def backward_batch(p: MlpParams, cache: list[np.ndarray], upstream: np.ndarray) -> GradBuffer:
    """Gradient of ``sum(upstream * output)`` summed over all rows."""
    g = np.asarray(upstream, dtype=np.float64)
    n = cache[0].shape[0]
    if g.shape != (n, p.out_dim):
        raise ShapeError(f"upstream shape {g.shape} != ({n}, {p.out_dim})")
    gw: list[np.ndarray] = [None] * len(p.weights)  # type: ignore[list-item]
    gb: list[np.ndarray] = [None] * len(p.weights)  # type: ignore[list-item]
    for i in range(len(p.weights) - 1, -1, -1):
        a = cache[i]
        gw[i] = g.T @ a
        gb[i] = g.sum(axis=0)
        if i:
            # relu'(0) = 0: activation equal to zero blocks the gradient
            g = (g @ p.weights[i]) * (a > 0.0)
    return MlpParams(gw, gb)


def mlp_forward(p: MlpParams, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ShapeError(f"expected a vector, got shape {x.shape}")
    out, _ = forward_batch(p, x[None, :])
    return out[0]


def mlp_backward(p: MlpParams, x: np.ndarray, upstream: np.ndarray) -> GradBuffer:
    x = np.asarray(x, dtype=np.float64)
    upstream = np.asarray(upstream, dtype=np.float64)
    if x.ndim != 1 or upstream.shape != (p.out_dim,):
        raise ShapeError(f"x {x.shape} / upstream {upstream.shape} do not match network")
    _, cache = forward_batch(p, x[None, :])
    return backward_batch(p, cache, upstream[None, :])


def add_scaled(a: MlpParams, b: MlpParams, scale: float = 1.0) -> MlpParams:
    """``a + scale * b`` as a new buffer."""
    return MlpParams([x + scale * y for x, y in zip(a.weights, b.weights)],
                     [x + scale * y for x, y in zip(a.biases, b.biases)])


def sq_norm(p: MlpParams) -> float:
    return float(sum(np.sum(a * a) for a in p.arrays()))


# -- checkpoints ---------------------------------------------------------------

def to_json_dict(p: MlpParams) -> dict:
    return {
        "depth": p.depth,
        "widths": p.widths,
        "layers": [{"w": w.tolist(), "b": b.tolist()} for w, b in zip(p.weights, p.biases)],
    }


def from_json_dict(obj: dict) -> MlpParams:
    try:
        layers = obj["layers"]
        ws = [np.array(layer["w"], dtype=np.float64).reshape(len(layer["w"]), -1) for layer in layers]
        bs = [np.array(layer["b"], dtype=np.float64) for layer in layers]
    except (KeyError, TypeError) as exc:
        raise ConfigError(f"malformed checkpoint: {exc}") from exc
    p = MlpParams(ws, bs)
    if obj.get("depth", p.depth) != p.depth or obj.get("widths", p.widths) != p.widths:
        raise ConfigError("checkpoint depth/widths disagree with its layers")
    return p


def save_checkpoint(p: MlpParams, path: str | Path) -> None:
    # json writes floats with repr(), the shortest string that round-trips exactly
    Path(path).write_text(json.dumps(to_json_dict(p)) + "\n", encoding="utf-8")


def load_checkpoint(path: str | Path) -> MlpParams:
    return from_json_dict(json.loads(Path(path).read_text(encoding="utf-8")))
