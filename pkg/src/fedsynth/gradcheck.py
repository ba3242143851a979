"""Central finite-difference checks for layers, models and losses (64-bit)."""

from __future__ import annotations

from collections.abc import Callable

import numpy as np

from .nn import Layer

EPS = 1e-5


def rel_error(a: np.ndarray, b: np.ndarray) -> float:
    a = np.ravel(a).astype(np.float64)
    b = np.ravel(b).astype(np.float64)
    scale = max(np.linalg.norm(a), np.linalg.norm(b))
    if scale == 0.0:
        return 0.0
    return float(np.linalg.norm(a - b) / scale)


def numeric_grad(f: Callable[[], float], arr: np.ndarray, eps: float = EPS) -> np.ndarray:
    """d f / d arr by central differences; ``arr`` is perturbed in place and restored."""
    out = np.zeros(arr.shape, dtype=np.float64)
    flat = arr.reshape(-1)
    g = out.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + eps
        fp = f()
        flat[i] = old - eps
        fm = f()
        flat[i] = old
        g[i] = (fp - fm) / (2 * eps)
    return out


def numeric_grad_at(f: Callable[[], float], arr: np.ndarray, idx: np.ndarray, eps: float = EPS) -> np.ndarray:
    """Central differences at the flat positions ``idx`` only (for large tensors)."""
    flat = arr.reshape(-1)
    g = np.zeros(len(idx), dtype=np.float64)
    for j, i in enumerate(idx):
        old = flat[i]
        flat[i] = old + eps
        fp = f()
        flat[i] = old - eps
        fm = f()
        flat[i] = old
        g[j] = (fp - fm) / (2 * eps)
    return g


def check_layer(layer: Layer, x: np.ndarray, rng: np.random.Generator, eps: float = EPS) -> dict[str, float]:
    """Relative errors of input and parameter gradients for ``L = sum(forward(x) * R)``."""
    for k in layer.params:
        layer.params[k] = layer.params[k].astype(np.float64)
    r = rng.normal(size=layer.output_shape(x.shape))

    def objective() -> float:
        return float((layer.forward(x) * r).sum())

    dx, grads = layer.backward(x, r)
    errors = {}
    if dx is not None:
        errors["input"] = rel_error(dx, numeric_grad(objective, x, eps))
    for k, arr in layer.params.items():
        errors[k] = rel_error(grads[k], numeric_grad(objective, arr, eps))
    return errors


LAYER_KINDS = (
    "dense",
    "conv2d",
    "conv_transpose2d",
    "relu",
    "leaky_relu",
    "sigmoid",
    "tanh",
    "batchless_norm",
    "embedding",
    "avg_pool2d",
    "flatten",
    "reshape",
)


def _away_from_zero(x: np.ndarray, margin: float = 1e-2) -> np.ndarray:
    return np.where(np.abs(x) < margin, np.sign(x + 1e-12) * margin, x)


def random_layer_case(kind: str, rng: np.random.Generator) -> tuple[Layer, np.ndarray]:
    """A randomly shaped, float64 instance of ``kind`` with a valid input."""
    from . import nn

    n = int(rng.integers(1, 4))
    c_in = int(rng.integers(1, 4))
    side = int(rng.integers(3, 7))
    img = rng.normal(size=(n, c_in, side, side))
    if kind == "dense":
        layer = nn.Dense(int(rng.integers(1, 8)), int(rng.integers(1, 6)), rng)
        x = rng.normal(size=(n, layer.params["weight"].shape[1]))
    elif kind == "conv2d":
        k = int(rng.integers(1, min(side, 4) + 1))
        layer = nn.Conv2d(c_in, int(rng.integers(1, 4)), k, rng, stride=int(rng.integers(1, 3)), padding=int(rng.integers(0, 2)))
        x = img
    elif kind == "conv_transpose2d":
        k = int(rng.integers(2, 5))
        layer = nn.ConvTranspose2d(c_in, int(rng.integers(1, 4)), k, rng, stride=int(rng.integers(1, 3)), padding=int(rng.integers(0, k // 2 + 1)))
        x = img
    elif kind == "relu":
        layer, x = nn.ReLU(), _away_from_zero(img)
    elif kind == "leaky_relu":
        layer, x = nn.LeakyReLU(0.2), _away_from_zero(img)
    elif kind == "sigmoid":
        layer, x = nn.Sigmoid(), img
    elif kind == "tanh":
        layer, x = nn.Tanh(), img
    elif kind == "batchless_norm":
        layer = nn.ChannelNorm(c_in)
        layer.params["gamma"] = rng.normal(size=c_in)
        layer.params["beta"] = rng.normal(size=c_in)
        x = img
    elif kind == "embedding":
        num = int(rng.integers(2, 5))
        layer = nn.Embedding(num, int(rng.integers(1, 6)), rng)
        x = rng.integers(0, num, size=n + 2)
    elif kind == "avg_pool2d":
        layer, x = nn.AvgPool2d(2), rng.normal(size=(n, c_in, 2 * (side // 2), 2 * (side // 2)))
    elif kind == "flatten":
        layer, x = nn.Flatten(), img
    elif kind == "reshape":
        layer, x = nn.Reshape(side, side, c_in), img
    else:
        raise ValueError(f"unknown layer kind {kind!r}")
    for k in layer.params:
        layer.params[k] = np.asarray(layer.params[k], dtype=np.float64)
    if np.issubdtype(np.asarray(x).dtype, np.floating):
        x = np.asarray(x, dtype=np.float64)
    return layer, x


def check_loss(loss_fn, pred: np.ndarray, target: np.ndarray, eps: float = EPS) -> float:
    _, grad = loss_fn(pred, target)
    return rel_error(grad, numeric_grad(lambda: loss_fn(pred, target)[0], pred, eps))
