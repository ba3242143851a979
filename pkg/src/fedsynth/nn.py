"""Small dense-tensor numeric core.

Tensors are plain ``numpy.ndarray`` values (float32 for training, float64 for
gradient checks). Every layer has an explicit forward and an explicit
backward; ``backward`` takes the forward input again and never mutates
parameters. Only :class:`AdamW.step` writes to parameter buffers.

Image tensors are NCHW.
"""

from __future__ import annotations

import math
from collections.abc import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

from .params import ParamSet

PROB_CLAMP = 1e-7


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


def check_finite(x: np.ndarray, what: str) -> None:
    if not np.isfinite(x).all():
        raise NonFiniteError(f"non-finite values in {what}")


# ---------------------------------------------------------------- conv helpers


def _im2col(xp: np.ndarray, k: int, s: int, ho: int, wo: int) -> np.ndarray:
    """(N,C,Hp,Wp) -> (N*ho*wo, k*k*C) patch matrix, columns ordered (ki, kj, c)."""
    n, c = xp.shape[:2]
    xh = np.ascontiguousarray(xp.transpose(0, 2, 3, 1))
    win = sliding_window_view(xh, (k, k), axis=(1, 2))[:, ::s, ::s][:, :ho, :wo]
    return win.transpose(0, 1, 2, 4, 5, 3).reshape(n * ho * wo, k * k * c)


def _col2im(cols: np.ndarray, out_shape: tuple[int, ...], k: int, s: int) -> np.ndarray:
    """Scatter-add (N,ho,wo,k,k,C) patches back into an (N,C,H,W) buffer."""
    n, c, h, w = out_shape
    out = np.zeros((n, h, w, c), dtype=cols.dtype)
    ho, wo = cols.shape[1], cols.shape[2]
    for i in range(k):
        for j in range(k):
            out[:, i : i + s * (ho - 1) + 1 : s, j : j + s * (wo - 1) + 1 : s] += cols[:, :, :, i, j]
    return out.transpose(0, 3, 1, 2)


def _uniform(rng: np.random.Generator, bound: float, shape) -> np.ndarray:
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)


# ---------------------------------------------------------------------- layers


class Layer:
    kind = "layer"

    def __init__(self) -> None:
        self.params: dict[str, np.ndarray] = {}

    def output_shape(self, in_shape: tuple[int, ...]) -> tuple[int, ...]:
        return tuple(in_shape)

    def forward(self, x: np.ndarray) -> np.ndarray:
        self.output_shape(x.shape)
        y = self._forward(x)
        check_finite(y, f"{self.kind} forward output")
        return y

    def backward(self, x: np.ndarray, grad: np.ndarray) -> tuple[np.ndarray | None, dict[str, np.ndarray]]:
        expected = self.output_shape(x.shape)
        if tuple(grad.shape) != expected:
            raise ShapeError(f"{self.kind}: upstream grad shape {tuple(grad.shape)} != output shape {expected}")
        check_finite(grad, f"{self.kind} upstream gradient")
        return self._backward(x, grad)

    def _forward(self, x):
        raise NotImplementedError

    def _backward(self, x, grad):
        raise NotImplementedError

    def _expect_rank(self, in_shape, rank: int, what: str) -> None:
        if len(in_shape) != rank:
            raise ShapeError(f"{self.kind} expects {what}, got shape {tuple(in_shape)}")


class Dense(Layer):
    kind = "dense"

    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator):
        super().__init__()
        bound = 1.0 / math.sqrt(n_in)
        self.params = {"weight": _uniform(rng, bound, (n_out, n_in)), "bias": _uniform(rng, bound, (n_out,))}

    def output_shape(self, in_shape):
        self._expect_rank(in_shape, 2, "(N, features)")
        w = self.params["weight"]
        if in_shape[1] != w.shape[1]:
            raise ShapeError(f"dense expects {w.shape[1]} input features, got shape {tuple(in_shape)}")
        return (in_shape[0], w.shape[0])

    def _forward(self, x):
        return x @ self.params["weight"].T + self.params["bias"]

    def _backward(self, x, grad):
        w = self.params["weight"]
        return grad @ w, {"weight": grad.T @ x, "bias": grad.sum(axis=0)}


class Conv2d(Layer):
    kind = "conv2d"

    def __init__(self, c_in: int, c_out: int, kernel: int, rng: np.random.Generator, stride: int = 1, padding: int = 0):
        super().__init__()
        self.k, self.stride, self.padding = kernel, stride, padding
        bound = 1.0 / math.sqrt(c_in * kernel * kernel)
        self.params = {
            "weight": _uniform(rng, bound, (c_out, c_in, kernel, kernel)),
            "bias": _uniform(rng, bound, (c_out,)),
        }

    def output_shape(self, in_shape):
        self._expect_rank(in_shape, 4, "(N, C, H, W)")
        c_out, c_in = self.params["weight"].shape[:2]
        n, c, h, w = in_shape
        if c != c_in:
            raise ShapeError(f"conv2d expects {c_in} channels, got shape {tuple(in_shape)}")
        ho = (h + 2 * self.padding - self.k) // self.stride + 1
        wo = (w + 2 * self.padding - self.k) // self.stride + 1
        if ho < 1 or wo < 1:
            raise ShapeError(f"conv2d kernel {self.k} too large for input shape {tuple(in_shape)}")
        return (n, c_out, ho, wo)

    def _pad(self, x):
        p = self.padding
        return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x

    def _wmat(self) -> np.ndarray:
        # (c_out, c_in, k, k) -> (k*k*c_in, c_out), matching the patch column order
        w = self.params["weight"]
        return w.transpose(2, 3, 1, 0).reshape(-1, w.shape[0])

    def _forward(self, x):
        n, c_out, ho, wo = self.output_shape(x.shape)
        cols = _im2col(self._pad(x), self.k, self.stride, ho, wo)
        y = cols @ self._wmat() + self.params["bias"]
        return y.reshape(n, ho, wo, c_out).transpose(0, 3, 1, 2)

    def _backward(self, x, grad):
        n, c_out, ho, wo = grad.shape
        k, c_in = self.k, x.shape[1]
        xp = self._pad(x)
        cols = _im2col(xp, k, self.stride, ho, wo)
        g2 = grad.transpose(0, 2, 3, 1).reshape(-1, c_out)
        dw = (cols.T @ g2).reshape(k, k, c_in, c_out).transpose(3, 2, 0, 1)
        p = self.padding
        if self.stride == 1 and p < k:
            # full correlation with the flipped kernel; no scatter needed
            q = k - 1 - p
            gp = np.pad(grad, ((0, 0), (0, 0), (q, q), (q, q))) if q else grad
            wf = self.params["weight"][:, :, ::-1, ::-1].transpose(2, 3, 0, 1).reshape(-1, c_in)
            dx = (_im2col(gp, k, 1, x.shape[2], x.shape[3]) @ wf).reshape(n, x.shape[2], x.shape[3], c_in)
            return dx.transpose(0, 3, 1, 2), {"weight": dw, "bias": grad.sum(axis=(0, 2, 3))}
        dcols = (g2 @ self._wmat().T).reshape(n, ho, wo, k, k, c_in)
        dxp = _col2im(dcols, xp.shape, k, self.stride)
        dx = dxp[:, :, p : p + x.shape[2], p : p + x.shape[3]] if p else dxp
        return dx, {"weight": dw, "bias": grad.sum(axis=(0, 2, 3))}


class ConvTranspose2d(Layer):
    """Weight layout (C_in, C_out, k, k); output side (H-1)*stride - 2*padding + k."""

    kind = "conv_transpose2d"

    def __init__(self, c_in: int, c_out: int, kernel: int, rng: np.random.Generator, stride: int = 1, padding: int = 0):
        super().__init__()
        self.k, self.stride, self.padding = kernel, stride, padding
        bound = 1.0 / math.sqrt(c_out * kernel * kernel)
        self.params = {
            "weight": _uniform(rng, bound, (c_in, c_out, kernel, kernel)),
            "bias": _uniform(rng, bound, (c_out,)),
        }

    def output_shape(self, in_shape):
        self._expect_rank(in_shape, 4, "(N, C, H, W)")
        c_in, c_out = self.params["weight"].shape[:2]
        n, c, h, w = in_shape
        if c != c_in:
            raise ShapeError(f"conv_transpose2d expects {c_in} channels, got shape {tuple(in_shape)}")
        ho = (h - 1) * self.stride - 2 * self.padding + self.k
        wo = (w - 1) * self.stride - 2 * self.padding + self.k
        if ho < 1 or wo < 1:
            raise ShapeError(f"conv_transpose2d padding {self.padding} too large for input shape {tuple(in_shape)}")
        return (n, c_out, ho, wo)

    def _wmat(self) -> np.ndarray:
        # (c_in, c_out, k, k) -> (c_in, k*k*c_out)
        w = self.params["weight"]
        return w.transpose(0, 2, 3, 1).reshape(w.shape[0], -1)

    def _forward(self, x):
        n, c_out, ho, wo = self.output_shape(x.shape)
        _, c_in, h, w = x.shape
        k, s, p = self.k, self.stride, self.padding
        cols = x.transpose(0, 2, 3, 1).reshape(-1, c_in) @ self._wmat()
        full = _col2im(cols.reshape(n, h, w, k, k, c_out), (n, c_out, (h - 1) * s + k, (w - 1) * s + k), k, s)
        y = full[:, :, p : p + ho, p : p + wo]
        return y + self.params["bias"][None, :, None, None]

    def _backward(self, x, grad):
        n, c_in, h, w = x.shape
        c_out = grad.shape[1]
        k, s, p = self.k, self.stride, self.padding
        gfull = np.pad(grad, ((0, 0), (0, 0), (p, p), (p, p))) if p else grad
        gcols = _im2col(gfull, k, s, h, w)
        xf = x.transpose(0, 2, 3, 1).reshape(-1, c_in)
        dx = (gcols @ self._wmat().T).reshape(n, h, w, c_in).transpose(0, 3, 1, 2)
        dw = (xf.T @ gcols).reshape(c_in, k, k, c_out).transpose(0, 3, 1, 2)
        return dx, {"weight": dw, "bias": grad.sum(axis=(0, 2, 3))}


class ReLU(Layer):
    kind = "relu"

    def _forward(self, x):
        return np.maximum(x, 0)

    def _backward(self, x, grad):
        return grad * (x > 0), {}


class LeakyReLU(Layer):
    kind = "leaky_relu"

    def __init__(self, slope: float = 0.2):
        super().__init__()
        self.slope = slope

    def _forward(self, x):
        return np.where(x > 0, x, x * self.slope)

    def _backward(self, x, grad):
        return np.where(x > 0, grad, grad * self.slope), {}


class Sigmoid(Layer):
    kind = "sigmoid"

    def _forward(self, x):
        return expit(x)

    def _backward(self, x, grad):
        s = expit(x)
        return grad * s * (1 - s), {}


class Tanh(Layer):
    kind = "tanh"

    def _forward(self, x):
        return np.tanh(x)

    def _backward(self, x, grad):
        t = np.tanh(x)
        return grad * (1 - t * t), {}


class ChannelNorm(Layer):
    """Per-sample, per-channel normalization over spatial positions plus a learned affine.

    Statistics never mix samples, so outputs do not depend on batch composition.
    """

    kind = "batchless_norm"
    eps = 1e-5

    def __init__(self, channels: int):
        super().__init__()
        self.params = {"gamma": np.ones(channels, np.float32), "beta": np.zeros(channels, np.float32)}

    def output_shape(self, in_shape):
        self._expect_rank(in_shape, 4, "(N, C, H, W)")
        if in_shape[1] != self.params["gamma"].shape[0]:
            raise ShapeError(f"batchless_norm expects {self.params['gamma'].shape[0]} channels, got shape {tuple(in_shape)}")
        return tuple(in_shape)

    def _normalize(self, x):
        mu = x.mean(axis=(2, 3), keepdims=True)
        xc = x - mu
        rstd = 1.0 / np.sqrt((xc * xc).mean(axis=(2, 3), keepdims=True) + self.eps)
        return xc * rstd, rstd

    def _forward(self, x):
        xhat, _ = self._normalize(x)
        return xhat * self.params["gamma"][None, :, None, None] + self.params["beta"][None, :, None, None]

    def _backward(self, x, grad):
        xhat, rstd = self._normalize(x)
        dxhat = grad * self.params["gamma"][None, :, None, None]
        dx = rstd * (
            dxhat - dxhat.mean(axis=(2, 3), keepdims=True) - xhat * (dxhat * xhat).mean(axis=(2, 3), keepdims=True)
        )
        return dx, {"gamma": (grad * xhat).sum(axis=(0, 2, 3)), "beta": grad.sum(axis=(0, 2, 3))}


class Embedding(Layer):
    """Integer ids (N,) -> rows (N, dim). No gradient flows to the ids."""

    kind = "embedding"

    def __init__(self, num: int, dim: int, rng: np.random.Generator):
        super().__init__()
        self.params = {"weight": rng.normal(0.0, 1.0, size=(num, dim)).astype(np.float32)}

    def output_shape(self, in_shape):
        self._expect_rank(in_shape, 1, "(N,) integer ids")
        return (in_shape[0], self.params["weight"].shape[1])

    def _forward(self, x):
        ids = np.asarray(x)
        if ids.size and (ids.min() < 0 or ids.max() >= self.params["weight"].shape[0]):
            raise ShapeError(f"embedding ids out of range [0, {self.params['weight'].shape[0]})")
        return self.params["weight"][ids]

    def _backward(self, x, grad):
        dw = np.zeros_like(self.params["weight"])
        np.add.at(dw, np.asarray(x), grad)
        return None, {"weight": dw}


class AvgPool2d(Layer):
    kind = "avg_pool2d"

    def __init__(self, size: int = 2):
        super().__init__()
        self.size = size

    def output_shape(self, in_shape):
        self._expect_rank(in_shape, 4, "(N, C, H, W)")
        n, c, h, w = in_shape
        if h % self.size or w % self.size:
            raise ShapeError(f"avg_pool2d size {self.size} does not divide input shape {tuple(in_shape)}")
        return (n, c, h // self.size, w // self.size)

    def _forward(self, x):
        n, c, h, w = x.shape
        s = self.size
        return x.reshape(n, c, h // s, s, w // s, s).mean(axis=(3, 5))

    def _backward(self, x, grad):
        s = self.size
        dx = np.repeat(np.repeat(grad, s, axis=2), s, axis=3) / (s * s)
        return dx.astype(grad.dtype, copy=False), {}


class Reshape(Layer):
    kind = "reshape"

    def __init__(self, *shape: int):
        super().__init__()
        self.shape = tuple(shape)

    def output_shape(self, in_shape):
        if math.prod(in_shape[1:]) != math.prod(self.shape):
            raise ShapeError(f"reshape to {self.shape} incompatible with input shape {tuple(in_shape)}")
        return (in_shape[0], *self.shape)

    def _forward(self, x):
        return x.reshape(x.shape[0], *self.shape)

    def _backward(self, x, grad):
        return grad.reshape(x.shape), {}


class Flatten(Layer):
    kind = "flatten"

    def output_shape(self, in_shape):
        return (in_shape[0], math.prod(in_shape[1:]))

    def _forward(self, x):
        return x.reshape(x.shape[0], -1)

    def _backward(self, x, grad):
        return grad.reshape(x.shape), {}


# ---------------------------------------------------------------------- models


class Model:
    """Base for anything with named parameters that can be read/loaded as a ParamSet."""

    def named_layers(self) -> Sequence[tuple[str, Layer]]:
        raise NotImplementedError

    def params(self) -> ParamSet:
        """Live parameter buffers in declaration order."""
        return ParamSet([(f"{lname}.{pname}", arr) for lname, layer in self.named_layers() for pname, arr in layer.params.items()])

    def load(self, params: ParamSet) -> None:
        live = self.params()
        live.check_compatible(params)
        for k in live:
            live[k][...] = params[k]

    def astype(self, dtype) -> Model:
        for _, layer in self.named_layers():
            for pname in layer.params:
                layer.params[pname] = layer.params[pname].astype(dtype)
        return self

    @staticmethod
    def qualify(lname: str, grads: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
        return {f"{lname}.{k}": v for k, v in grads.items()}


class Sequential(Model):
    def __init__(self, layers: Sequence[tuple[str, Layer]]):
        self.layers = list(layers)

    def named_layers(self):
        return self.layers

    def output_shape(self, in_shape):
        for _, layer in self.layers:
            in_shape = layer.output_shape(in_shape)
        return in_shape

    def forward(self, x: np.ndarray, keep: bool = False):
        inputs = []
        for _, layer in self.layers:
            inputs.append(x)
            x = layer.forward(x)
        return (x, inputs) if keep else x

    __call__ = forward

    def backward(self, inputs: list[np.ndarray], grad: np.ndarray) -> tuple[np.ndarray | None, dict[str, np.ndarray]]:
        grads: dict[str, np.ndarray] = {}
        for (lname, layer), x in zip(reversed(self.layers), reversed(inputs)):
            grad, g = layer.backward(x, grad)
            grads.update(self.qualify(lname, g))
        order = list(self.params())
        return grad, {k: grads[k] for k in order}


# ---------------------------------------------------------------------- losses


def bce_loss(prob: np.ndarray, label: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean binary cross-entropy and its gradient w.r.t. ``prob``.

    Probabilities are clamped to [1e-7, 1-1e-7] before the log; the gradient
    is evaluated at the clamped value.
    """
    label = np.asarray(label)
    if prob.shape != label.shape:
        raise ShapeError(f"bce_loss: prob shape {prob.shape} != label shape {label.shape}")
    if not np.isin(label, (0, 1)).all():
        raise ValueError("bce_loss: labels must be 0 or 1")
    check_finite(prob, "bce_loss input")
    p = np.clip(prob.astype(np.float64), PROB_CLAMP, 1 - PROB_CLAMP)
    y = label.astype(np.float64)
    n = p.size
    value = float(-(y * np.log(p) + (1 - y) * np.log1p(-p)).mean())
    grad = ((p - y) / (p * (1 - p)) / n).astype(prob.dtype)
    return value, grad


def mse_loss(pred: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    if pred.shape != target.shape:
        raise ShapeError(f"mse_loss: shapes differ {pred.shape} vs {target.shape}")
    diff = pred - target
    check_finite(diff, "mse_loss input")
    value = float(np.mean(diff.astype(np.float64) ** 2))
    return value, (2.0 / diff.size) * diff


# ------------------------------------------------------------------- optimizer


class AdamW:
    """Adam with decoupled weight decay; moment state lives here, parameters are updated in place."""

    def __init__(self, lr: float, betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8, weight_decay: float = 0.01):
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: ParamSet, grads: dict[str, np.ndarray], lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        if list(grads) != list(params):
            raise ShapeError("AdamW: gradient names do not match parameter names")
        for k, p in params.items():
            if grads[k].shape != p.shape:
                raise ShapeError(f"AdamW: gradient for {k} has shape {grads[k].shape}, parameter {p.shape}")
            if k in self.m and self.m[k].shape != p.shape:
                raise ShapeError(f"AdamW: state for {k} is incongruent with parameter shape {p.shape}")
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1**t
        bc2 = 1.0 - self.beta2**t
        for k, p in params.items():
            g = grads[k]
            if k not in self.m:
                self.m[k] = np.zeros_like(p)
                self.v[k] = np.zeros_like(p)
            m, v = self.m[k], self.v[k]
            if self.weight_decay:
                p *= 1.0 - lr * self.weight_decay
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p -= lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)

    def state_tensors(self) -> list[tuple[str, np.ndarray]]:
        out = [("adamw/step", np.array([self.step_count], np.float32))]
        for k in self.m:
            out.append((f"adamw/m/{k}", self.m[k]))
            out.append((f"adamw/v/{k}", self.v[k]))
        return out

    def load_state(self, tensors: list[tuple[str, np.ndarray]]) -> None:
        self.m, self.v = {}, {}
        for name, arr in tensors:
            if name == "adamw/step":
                self.step_count = int(arr[0])
            elif name.startswith("adamw/m/"):
                self.m[name[len("adamw/m/") :]] = np.array(arr, copy=True)
            elif name.startswith("adamw/v/"):
                self.v[name[len("adamw/v/") :]] = np.array(arr, copy=True)
