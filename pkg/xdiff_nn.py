"""
xDiff Neural Network Engine
Dense layers with manual backprop, Mish, sinusoidal timestep embedding, Adam, gradient checks, checkpoints
"""

import logging
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from xdiff_core import ShapeError

logger = logging.getLogger(__name__)

ACTIVATIONS = ("mish", "identity", "tanh")
CHECKPOINT_MAGIC = b"XDFC"
CHECKPOINT_VERSION = 1


def softplus(x):
    return np.logaddexp(0.0, x)


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def mish(x):
    return x * np.tanh(softplus(x))


def _activate(z, kind):
    if kind == "mish":
        return mish(z)
    if kind == "tanh":
        return np.tanh(z)
    return z


def _activation_grad(z, y, kind):
    if kind == "mish":
        t = np.tanh(softplus(z))
        return t + z * (1.0 - t * t) * sigmoid(z)
    if kind == "tanh":
        return 1.0 - y * y
    return np.ones_like(z)


class Mlp:
    """Stack of dense layers; forward returns a cache so several passes can be differentiated at once"""

    def __init__(self, sizes: Sequence[int], activations: Sequence[str], rng: np.random.Generator,
                 dtype=np.float32, zero_last: bool = False):
        if len(activations) != len(sizes) - 1:
            raise ShapeError("one activation per dense layer is required")
        for kind in activations:
            if kind not in ACTIVATIONS:
                raise ValueError(f"unknown activation '{kind}'")
        self.sizes = tuple(int(s) for s in sizes)
        self.activations = tuple(activations)
        self.dtype = dtype
        self.weights, self.biases = [], []
        for fan_in, fan_out in zip(self.sizes[:-1], self.sizes[1:]):
            bound = np.sqrt(1.0 / fan_in)
            self.weights.append(rng.uniform(-bound, bound, (fan_in, fan_out)).astype(dtype))
            self.biases.append(rng.uniform(-bound, bound, fan_out).astype(dtype))
        if zero_last:
            self.weights[-1][...] = 0
            self.biases[-1][...] = 0

    @property
    def input_dim(self) -> int:
        return self.sizes[0]

    @property
    def output_dim(self) -> int:
        return self.sizes[-1]

    def params(self) -> list:
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    def set_params(self, arrays: Sequence[np.ndarray]):
        current = self.params()
        if len(arrays) != len(current):
            raise ShapeError(f"expected {len(current)} arrays, got {len(arrays)}")
        for dst, src in zip(current, arrays):
            if dst.shape != np.shape(src):
                raise ShapeError(f"parameter shape {np.shape(src)} does not match {dst.shape}")
            dst[...] = src

    def copy(self) -> "Mlp":
        return self.astype(self.dtype)

    def astype(self, dtype) -> "Mlp":
        clone = object.__new__(Mlp)
        clone.sizes, clone.activations, clone.dtype = self.sizes, self.activations, dtype
        clone.weights = [w.astype(dtype, copy=True) for w in self.weights]
        clone.biases = [b.astype(dtype, copy=True) for b in self.biases]
        return clone

    def forward(self, x: np.ndarray):
        x = np.asarray(x, dtype=self.dtype)
        if x.ndim != 2 or x.shape[1] != self.input_dim:
            raise ShapeError(f"input shape {x.shape} does not match (batch, {self.input_dim})")
        cache = []
        for w, b, kind in zip(self.weights, self.biases, self.activations):
            z = x @ w + b
            y = _activate(z, kind)
            cache.append((x, z, y))
            x = y
        return x, cache

    def predict(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x)
        y, _ = self.forward(x.reshape(1, -1) if x.ndim == 1 else x)
        return y[0] if x.ndim == 1 else y

    def backward(self, cache: list, grad_out: np.ndarray):
        """Gradients for every parameter (same order as params()) and for the input"""
        grads = [None] * (2 * len(self.weights))
        g = np.asarray(grad_out, dtype=self.dtype)
        for layer in range(len(self.weights) - 1, -1, -1):
            x, z, y = cache[layer]
            gz = g * _activation_grad(z, y, self.activations[layer])
            grads[2 * layer] = x.T @ gz
            grads[2 * layer + 1] = gz.sum(axis=0)
            g = gz @ self.weights[layer].T
        return grads, g


def mlp(input_dim: int, output_dim: int, hidden: int, layers: int, rng: np.random.Generator,
        output_activation: str = "identity", zero_last: bool = False, dtype=np.float32) -> Mlp:
    """The architecture every learner uses: `layers` dense layers, Mish in between"""
    sizes = [input_dim] + [hidden] * (layers - 1) + [output_dim]
    activations = ["mish"] * (layers - 1) + [output_activation]
    return Mlp(sizes, activations, rng, dtype=dtype, zero_last=zero_last)


class Adam:
    """Adaptive-moment optimizer state for one parameter list"""

    def __init__(self, params: Sequence[np.ndarray], lr: float = 3e-4, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]

    def step(self, params: Sequence[np.ndarray], grads: Sequence[np.ndarray]) -> Sequence[np.ndarray]:
        if len(grads) != len(self.m):
            raise ShapeError("gradient list does not match optimizer state")
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.dtype)
        return params

    def state_arrays(self) -> list:
        return list(self.m) + list(self.v)

    def load_state_arrays(self, arrays: Sequence[np.ndarray], t: int):
        n = len(self.m)
        for dst, src in zip(self.m + self.v, arrays[:2 * n]):
            dst[...] = src
        self.t = t


def opt_step(state: Adam, params: Sequence[np.ndarray], grads: Sequence[np.ndarray]):
    return state.step(params, grads)


def timestep_embedding(k, dim: int) -> np.ndarray:
    """Interleaved sin/cos embedding at geometrically spaced frequencies; k scalar or (batch,)"""
    if dim % 2:
        raise ValueError("embedding dimension must be even")
    k = np.asarray(k, dtype=np.float64)
    freqs = np.power(10000.0, -np.arange(dim // 2) * 2.0 / dim)
    angles = k[..., None] * freqs
    emb = np.empty(angles.shape[:-1] + (dim,))
    emb[..., 0::2] = np.sin(angles)
    emb[..., 1::2] = np.cos(angles)
    return emb


def gradient_check(loss_fn: Callable[[], float], params: Sequence[np.ndarray], grads: Sequence[np.ndarray],
                   eps: float = 1e-6, max_coords: Optional[int] = None,
                   rng: Optional[np.random.Generator] = None) -> float:
    """Largest norm-wise relative error between analytic grads and central differences.

    params are perturbed in place and restored; use float64 parameters.
    """
    rng = rng or np.random.default_rng(0)
    worst = 0.0
    for p, g in zip(params, grads):
        flat = p.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = rng.choice(flat.size, size=max_coords, replace=False)
        numeric = np.empty(len(coords))
        for n, c in enumerate(coords):
            orig = flat[c]
            flat[c] = orig + eps
            up = loss_fn()
            flat[c] = orig - eps
            down = loss_fn()
            flat[c] = orig
            numeric[n] = (up - down) / (2.0 * eps)
        analytic = np.asarray(g).reshape(-1)[coords]
        denom = np.linalg.norm(analytic) + np.linalg.norm(numeric)
        if denom < 1e-12:
            continue
        worst = max(worst, float(np.linalg.norm(analytic - numeric) / denom))
    return worst


def save_arrays(path, arrays: Sequence[np.ndarray]):
    """Flat checkpoint: magic, version, count, then per array ndim, dims and float32 row-major data"""
    with open(Path(path), "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(np.array([CHECKPOINT_VERSION, len(arrays)], dtype="<u4").tobytes())
        for arr in arrays:
            arr = np.asarray(arr)
            f.write(np.array([arr.ndim, *arr.shape], dtype="<u4").tobytes())
            f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_arrays(path) -> list:
    data = Path(path).read_bytes()
    if data[:4] != CHECKPOINT_MAGIC:
        raise ShapeError(f"{path}: not an xDiff checkpoint")
    version, count = np.frombuffer(data, dtype="<u4", count=2, offset=4)
    if version != CHECKPOINT_VERSION:
        raise ShapeError(f"{path}: unsupported checkpoint version {version}")
    offset = 12
    arrays = []
    for _ in range(int(count)):
        ndim = int(np.frombuffer(data, dtype="<u4", count=1, offset=offset)[0])
        offset += 4
        shape = tuple(int(d) for d in np.frombuffer(data, dtype="<u4", count=ndim, offset=offset))
        offset += 4 * ndim
        size = int(np.prod(shape)) if shape else 1
        arrays.append(np.frombuffer(data, dtype="<f4", count=size, offset=offset).reshape(shape).copy())
        offset += 4 * size
    return arrays
