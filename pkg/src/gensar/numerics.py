"""Dense numerics for identifier training: MLPs with analytic gradients, Adam,
stop-gradient helpers and the ``GSNM`` tensor checkpoint format.

Vectors and matrices are plain ``numpy`` float32 arrays. Batched inputs are
``(batch, features)``; a 1-D input is treated as a batch of one and the
result is squeezed back.
"""
from __future__ import annotations

import struct
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np

FLOAT = np.float32
MAGIC = b"GSNM"
CHECKPOINT_VERSION = 1


class NumericalError(FloatingPointError):
    """Raised when a NaN or Inf reaches a checked boundary."""


class DimensionError(ValueError):
    pass


def as_float(x) -> np.ndarray:
    return np.asarray(x, dtype=FLOAT)


def check_finite(name: str, x) -> None:
    arr = np.asarray(x)
    if not np.all(np.isfinite(arr)):
        bad = int(np.size(arr) - np.count_nonzero(np.isfinite(arr)))
        raise NumericalError(f"{name}: {bad} non-finite value(s) of {np.size(arr)}")


def check_dim(name: str, x: np.ndarray, expected: int) -> None:
    if x.ndim == 0 or x.shape[-1] != expected:
        raise DimensionError(f"{name}: expected last dimension {expected}, got shape {x.shape}")


def stop_gradient(x) -> np.ndarray:
    """Value-identical, read-only copy of ``x``.

    Backward passes in this package are written by hand; a value wrapped here
    is treated as a constant by every gradient routine that consumes it.
    """
    out = np.array(x, copy=True)
    out.flags.writeable = False
    return out


def squared_distance(
    a: np.ndarray, b: np.ndarray, *, stop_a: bool = False, stop_b: bool = False
) -> Tuple[float, np.ndarray, np.ndarray]:
    """``||a - b||^2`` summed over every element, with gradients.

    A side marked as stopped receives an all-zero gradient.
    """
    a = as_float(a)
    b = as_float(b)
    if a.shape != b.shape:
        raise DimensionError(f"shape mismatch {a.shape} vs {b.shape}")
    diff = a - b
    value = float(np.sum(diff.astype(np.float64) ** 2))
    grad_a = np.zeros_like(diff) if stop_a else 2.0 * diff
    grad_b = np.zeros_like(diff) if stop_b else -2.0 * diff
    return value, grad_a, grad_b


class Mlp:
    """Stack of affine layers ``y = x W^T + b`` with ReLU between layers."""

    def __init__(self, weights: Sequence[np.ndarray], biases: Sequence[np.ndarray]):
        if len(weights) != len(biases) or not weights:
            raise ValueError("need one bias per weight matrix and at least one layer")
        self.weights: List[np.ndarray] = [as_float(w).copy() for w in weights]
        self.biases: List[np.ndarray] = [as_float(b).copy() for b in biases]
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.shape != (w.shape[0],):
                raise DimensionError(f"layer {i}: weight {w.shape} incompatible with bias {b.shape}")
            if i and w.shape[1] != self.weights[i - 1].shape[0]:
                raise DimensionError(f"layer {i}: input {w.shape[1]} != previous output {self.weights[i - 1].shape[0]}")
        self.grad_weights = [np.zeros_like(w) for w in self.weights]
        self.grad_biases = [np.zeros_like(b) for b in self.biases]
        self._cache: Optional[List[np.ndarray]] = None
        self._squeeze = False

    @classmethod
    def init(cls, sizes: Sequence[int], rng: np.random.Generator) -> "Mlp":
        """He-uniform weights, zero biases."""
        weights, biases = [], []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            bound = np.sqrt(6.0 / fan_in)
            weights.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)).astype(FLOAT))
            biases.append(np.zeros(fan_out, dtype=FLOAT))
        return cls(weights, biases)

    @classmethod
    def identity(cls, dim: int, depth: int = 1) -> "Mlp":
        eye = np.eye(dim, dtype=FLOAT)
        return cls([eye] * depth, [np.zeros(dim, dtype=FLOAT)] * depth)

    @classmethod
    def zeros(cls, sizes: Sequence[int]) -> "Mlp":
        return cls(
            [np.zeros((o, i), dtype=FLOAT) for i, o in zip(sizes[:-1], sizes[1:])],
            [np.zeros(o, dtype=FLOAT) for o in sizes[1:]],
        )

    @property
    def input_dim(self) -> int:
        return self.weights[0].shape[1]

    @property
    def output_dim(self) -> int:
        return self.weights[-1].shape[0]

    def forward(self, x) -> np.ndarray:
        x = as_float(x)
        check_dim("mlp input", x, self.input_dim)
        self._squeeze = x.ndim == 1
        h = np.atleast_2d(x)
        cache = [h]
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ w.T + b
            if i < last:
                cache.append(h)  # pre-activation
                h = np.maximum(h, 0.0)
        self._cache = cache
        return h[0] if self._squeeze else h

    __call__ = forward

    def backward(self, grad_out) -> np.ndarray:
        """Accumulate parameter gradients (overwriting previous ones) and
        return the gradient with respect to the forward input."""
        if self._cache is None:
            raise RuntimeError("backward called before forward")
        g = np.atleast_2d(as_float(grad_out))
        check_dim("mlp upstream gradient", g, self.output_dim)
        inputs = self._cache
        for i in range(len(self.weights) - 1, -1, -1):
            if i == 0:
                a = inputs[0]
            else:
                a = np.maximum(inputs[i], 0.0)
            self.grad_weights[i] = (g.T @ a).astype(FLOAT)
            self.grad_biases[i] = g.sum(axis=0).astype(FLOAT)
            g = g @ self.weights[i]
            if i > 0:
                g = g * (inputs[i] > 0.0)
        return g[0] if self._squeeze else g

    def parameters(self, prefix: str = "") -> Dict[str, np.ndarray]:
        out = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out[f"{prefix}w{i}"] = w
            out[f"{prefix}b{i}"] = b
        return out

    def gradients(self, prefix: str = "") -> Dict[str, np.ndarray]:
        out = {}
        for i, (w, b) in enumerate(zip(self.grad_weights, self.grad_biases)):
            out[f"{prefix}w{i}"] = w
            out[f"{prefix}b{i}"] = b
        return out

    def load(self, tensors: Mapping[str, np.ndarray], prefix: str = "") -> None:
        for i in range(len(self.weights)):
            self.weights[i][...] = tensors[f"{prefix}w{i}"]
            self.biases[i][...] = tensors[f"{prefix}b{i}"]


class Adam:
    """Adam over a dict of named arrays, updated in place."""

    def __init__(
        self,
        params: Mapping[str, np.ndarray],
        lr: float = 1e-3,
        betas: Tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
    ):
        self.params = dict(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.step_count = 0
        self.m = {k: np.zeros_like(v, dtype=np.float64) for k, v in self.params.items()}
        self.v = {k: np.zeros_like(v, dtype=np.float64) for k, v in self.params.items()}

    def step(self, grads: Mapping[str, np.ndarray]) -> None:
        missing = set(self.params) - set(grads)
        if missing:
            raise KeyError(f"no gradient for {sorted(missing)}")
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1**t
        c2 = 1.0 - self.beta2**t
        for name, p in self.params.items():
            g = np.asarray(grads[name], dtype=np.float64)
            if g.shape != p.shape:
                raise DimensionError(f"{name}: gradient {g.shape} vs parameter {p.shape}")
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.dtype)

    def reset_rows(self, name: str, rows: Iterable[int]) -> None:
        rows = list(rows)
        self.m[name][rows] = 0.0
        self.v[name][rows] = 0.0


def save_checkpoint(path, tensors: Mapping[str, np.ndarray]) -> None:
    """Write named tensors as little-endian GSNM records."""
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        for name, value in tensors.items():
            arr = np.array(value, dtype="<f4", order="C")  # keeps 0-d tensors 0-d
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())


def load_checkpoint(path) -> Dict[str, np.ndarray]:
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise ValueError(f"{path}: not a GSNM checkpoint")
    (version,) = struct.unpack_from("<I", data, 4)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    pos = 8
    out: Dict[str, np.ndarray] = {}
    while pos < len(data):
        (n,) = struct.unpack_from("<I", data, pos)
        pos += 4
        name = data[pos : pos + n].decode("utf-8")
        pos += n
        (rank,) = struct.unpack_from("<I", data, pos)
        pos += 4
        shape = struct.unpack_from(f"<{rank}I", data, pos)
        pos += 4 * rank
        count = int(np.prod(shape)) if rank else 1
        out[name] = np.frombuffer(data, dtype="<f4", count=count, offset=pos).reshape(shape).astype(FLOAT)
        pos += 4 * count
    return out
