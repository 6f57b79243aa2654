"""Dense numeric kernels with hand-derived backward passes.

Everything is float64.  Each kernel accepts a single vector or a 2-D batch
of row vectors and applies itself row-wise; backward passes return
cotangents shaped like their forward inputs.  `grad_check` is the
central-difference oracle used to certify analytic gradients of anything
built on top of these kernels.
"""

from __future__ import annotations

import math
from typing import Callable

import numpy as np

from .errors import ConfigError, NumericError, ShapeError

_MASK64 = 0xFFFFFFFFFFFFFFFF
_GAMMA = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)


class Rng:
    """Counter-based SplitMix64 generator.

    The n-th output is a fixed mixing function of ``seed + n * gamma``, so
    equal seeds give identical streams on every platform and draws can be
    produced in vectorized blocks without changing the sequence.
    """

    def __init__(self, seed: int):
        self.seed = int(seed) & _MASK64
        self.counter = 0

    def _raw(self, n: int) -> np.ndarray:
        start = self.counter + 1
        idx = np.arange(start, start + n, dtype=np.uint64)
        self.counter += n
        with np.errstate(over="ignore"):
            z = np.uint64(self.seed) + idx * _GAMMA
            z = (z ^ (z >> np.uint64(30))) * _MIX1
            z = (z ^ (z >> np.uint64(27))) * _MIX2
            return z ^ (z >> np.uint64(31))

    def next_u64(self) -> int:
        return int(self._raw(1)[0])

    def uniform(self, low: float = 0.0, high: float = 1.0, size=None):
        n = 1 if size is None else int(np.prod(size))
        u = (self._raw(n) >> np.uint64(11)).astype(np.float64) * 2.0**-53
        out = low + (high - low) * u
        return float(out[0]) if size is None else out.reshape(size)

    def normal(self, mean: float = 0.0, std: float = 1.0, size=None):
        n = 1 if size is None else int(np.prod(size))
        pairs = (n + 1) // 2
        raw = self._raw(2 * pairs)
        # u1 in (0, 1] so the log below is always finite
        u1 = ((raw[:pairs] >> np.uint64(11)).astype(np.float64) + 1.0) * 2.0**-53
        u2 = (raw[pairs:] >> np.uint64(11)).astype(np.float64) * 2.0**-53
        r = np.sqrt(-2.0 * np.log(u1))
        theta = (2.0 * math.pi) * u2
        z = np.concatenate([r * np.cos(theta), r * np.sin(theta)])[:n]
        out = mean + std * z
        return float(out[0]) if size is None else out.reshape(size)

    def permutation(self, n: int) -> np.ndarray:
        return np.argsort(self.uniform(size=n), kind="stable")

    def child(self) -> "Rng":
        """Derive an independent generator (for sub-streams)."""
        return Rng(self.next_u64())


class ParamTape:
    """Named float64 parameter slices over one flat value buffer plus a
    matching gradient buffer.

    Built in two phases: register initial arrays with `alloc`, then call
    `freeze`.  After freezing, `view`/`grad_view` return writable windows
    into the flat buffers, so in-place optimizer updates on `values` are
    visible through every view.
    """

    def __init__(self):
        self._pending: list[tuple[str, np.ndarray]] | None = []
        self._layout: dict[str, tuple[int, tuple[int, ...]]] = {}
        self.values: np.ndarray | None = None
        self.grads: np.ndarray | None = None

    def alloc(self, name: str, array) -> None:
        if self._pending is None:
            raise ConfigError("tape is frozen; cannot allocate more slices")
        if name in self._layout or any(n == name for n, _ in self._pending):
            raise ConfigError(f"duplicate tape slice {name!r}")
        self._pending.append((name, np.asarray(array, dtype=np.float64)))

    def freeze(self) -> None:
        if self._pending is None:
            raise ConfigError("tape already frozen")
        offset = 0
        chunks = []
        for name, arr in self._pending:
            self._layout[name] = (offset, arr.shape)
            offset += arr.size
            chunks.append(arr.ravel())
        self.values = np.concatenate(chunks) if chunks else np.zeros(0)
        self.grads = np.zeros_like(self.values)
        self._pending = None

    def _window(self, buffer: np.ndarray, name: str) -> np.ndarray:
        offset, shape = self._layout[name]
        size = 1
        for d in shape:
            size *= d
        return buffer[offset : offset + size].reshape(shape)

    def view(self, name: str) -> np.ndarray:
        return self._window(self.values, name)

    def grad_view(self, name: str) -> np.ndarray:
        return self._window(self.grads, name)

    def slice_names(self) -> list[str]:
        return list(self._layout)

    def slice_range(self, name: str) -> tuple[int, int]:
        offset, shape = self._layout[name]
        size = 1
        for d in shape:
            size *= d
        return offset, offset + size

    def name_at(self, flat_index: int) -> str:
        for name in self._layout:
            lo, hi = self.slice_range(name)
            if lo <= flat_index < hi:
                return name
        raise IndexError(f"index {flat_index} outside tape of length {len(self)}")

    def zero_grad(self) -> None:
        self.grads.fill(0.0)

    def __len__(self) -> int:
        return 0 if self.values is None else self.values.size


def _rowwise(x) -> tuple[np.ndarray, bool]:
    """Promote a vector to a one-row batch; report whether it was a vector."""
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 1:
        return arr[None, :], True
    if arr.ndim == 2:
        return arr, False
    raise ShapeError(f"expected a vector or row batch, got ndim={arr.ndim}")


def affine_forward(x, W, b) -> np.ndarray:
    """y = W x + b, applied row-wise for batches."""
    x2, single = _rowwise(x)
    W = np.asarray(W, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if W.ndim != 2:
        raise ShapeError(f"affine: W must be 2-D, got ndim={W.ndim}")
    if x2.shape[1] != W.shape[1]:
        raise ShapeError(
            f"affine: x has length {x2.shape[1]} but W is {W.shape[0]}x{W.shape[1]}"
        )
    if b.shape != (W.shape[0],):
        raise ShapeError(
            f"affine: b has shape {b.shape} but W is {W.shape[0]}x{W.shape[1]}"
        )
    y = x2 @ W.T + b
    return y[0] if single else y


def affine_backward(x, W, grad_out) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Cotangents of `affine_forward`: (grad_x, grad_W, grad_b)."""
    x2, single = _rowwise(x)
    g2, _ = _rowwise(grad_out)
    W = np.asarray(W, dtype=np.float64)
    if g2.shape != (x2.shape[0], W.shape[0]) or x2.shape[1] != W.shape[1]:
        raise ShapeError(
            f"affine backward: x {x2.shape}, W {W.shape}, grad_out {g2.shape}"
        )
    grad_W = g2.T @ x2
    grad_b = g2.sum(axis=0)
    grad_x = g2 @ W
    return (grad_x[0] if single else grad_x), grad_W, grad_b


_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715


def activation(x, kind: str) -> np.ndarray:
    """Elementwise nonlinearity: relu, tanh, or gelu (tanh form)."""
    arr = np.asarray(x, dtype=np.float64)
    if kind == "relu":
        return np.maximum(arr, 0.0)
    if kind == "tanh":
        return np.tanh(arr)
    if kind == "gelu":
        inner = _GELU_C * (arr + _GELU_A * arr**3)
        return 0.5 * arr * (1.0 + np.tanh(inner))
    raise ConfigError(f"unknown activation kind {kind!r}")


def activation_backward(x, kind: str, grad_out) -> np.ndarray:
    """Elementwise derivative at the forward input, times the cotangent."""
    arr = np.asarray(x, dtype=np.float64)
    g = np.asarray(grad_out, dtype=np.float64)
    if g.shape != arr.shape:
        raise ShapeError(f"activation backward: x {arr.shape} vs grad {g.shape}")
    if kind == "relu":
        return np.where(arr > 0.0, g, 0.0)
    if kind == "tanh":
        t = np.tanh(arr)
        return (1.0 - t * t) * g
    if kind == "gelu":
        inner = _GELU_C * (arr + _GELU_A * arr**3)
        t = np.tanh(inner)
        d_inner = _GELU_C * (1.0 + 3.0 * _GELU_A * arr * arr)
        deriv = 0.5 * (1.0 + t) + 0.5 * arr * (1.0 - t * t) * d_inner
        return deriv * g
    raise ConfigError(f"unknown activation kind {kind!r}")


def softmax(x) -> np.ndarray:
    """Row-wise stable softmax (max subtraction)."""
    x2, single = _rowwise(x)
    if x2.shape[1] < 1:
        raise ShapeError("softmax: input must have at least one entry")
    shifted = x2 - x2.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=1, keepdims=True)
    return p[0] if single else p


def softmax_backward(probs, grad_out) -> np.ndarray:
    """JVP of softmax at its output `probs`: dx = p * (g - <p, g>)."""
    p2, single = _rowwise(probs)
    g2, _ = _rowwise(grad_out)
    if g2.shape != p2.shape:
        raise ShapeError(f"softmax backward: probs {p2.shape} vs grad {g2.shape}")
    inner = (p2 * g2).sum(axis=1, keepdims=True)
    dx = p2 * (g2 - inner)
    return dx[0] if single else dx


def layer_norm(x, eps: float = 1e-5) -> np.ndarray:
    """Standardize each row to mean 0, variance 1 (no learnable affine)."""
    x2, single = _rowwise(x)
    if x2.shape[1] < 2:
        raise ShapeError("layer_norm: need at least 2 entries per row")
    mu = x2.mean(axis=1, keepdims=True)
    xc = x2 - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    y = xc / np.sqrt(var + eps)
    return y[0] if single else y


def layer_norm_backward(x, grad_out, eps: float = 1e-5) -> np.ndarray:
    x2, single = _rowwise(x)
    g2, _ = _rowwise(grad_out)
    if g2.shape != x2.shape or x2.shape[1] < 2:
        raise ShapeError(f"layer_norm backward: x {x2.shape} vs grad {g2.shape}")
    mu = x2.mean(axis=1, keepdims=True)
    xc = x2 - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    g_mean = g2.mean(axis=1, keepdims=True)
    gx_mean = (g2 * xc).mean(axis=1, keepdims=True)
    dx = inv * (g2 - g_mean - xc * gx_mean / (var + eps))
    return dx[0] if single else dx


def finite_difference_errors(
    f: Callable[[], float], tape: ParamTape, h: float = 1e-5
) -> np.ndarray:
    """Per-parameter relative error between f's analytic gradient and a
    central difference.

    `f` must return a scalar loss and leave its analytic gradient in
    `tape.grads`.  Returns |analytic - fd| / max(1, |analytic|, |fd|)
    for every tape entry.
    """
    base = float(f())
    if not math.isfinite(base):
        raise NumericError("non-finite loss at the expansion point")
    analytic = tape.grads.copy()
    theta = tape.values
    fd = np.empty_like(analytic)
    for i in range(theta.size):
        orig = theta[i]
        theta[i] = orig + h
        up = float(f())
        theta[i] = orig - h
        down = float(f())
        theta[i] = orig
        if not (math.isfinite(up) and math.isfinite(down)):
            raise NumericError(f"non-finite probe at parameter {tape.name_at(i)!r}")
        fd[i] = (up - down) / (2.0 * h)
    denom = np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(fd)))
    return np.abs(analytic - fd) / denom


def grad_check(f: Callable[[], float], tape: ParamTape, h: float = 1e-5) -> float:
    """Max relative disagreement between analytic gradient and central
    differences over every parameter in the tape."""
    errors = finite_difference_errors(f, tape, h)
    return float(errors.max()) if errors.size else 0.0


def grad_check_report(
    f: Callable[[], float], tape: ParamTape, h: float = 1e-5
) -> dict[str, float]:
    """Like `grad_check`, but reporting the max error per tape slice."""
    errors = finite_difference_errors(f, tape, h)
    report = {}
    for name in tape.slice_names():
        lo, hi = tape.slice_range(name)
        report[name] = float(errors[lo:hi].max()) if hi > lo else 0.0
    return report
