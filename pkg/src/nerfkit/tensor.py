"""Dense layers with hand-written backward passes, a flat parameter store and Adam.

Everything a field model trains lives in one contiguous vector (`ParamStore.data`);
layers and hash tables hold views into it, so the optimizer and the checkpoint
writer only ever see a single array.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Sequence

import numba
import numpy as np

from .errors import ShapeError, TrainingError, UsageError, FormatError


class Activation(str, Enum):
    RELU = "relu"
    SIGMOID = "sigmoid"
    TRUNC_SIGMOID = "trunc_sigmoid"
    EXP = "exp"
    SOFTPLUS = "softplus"
    LINEAR = "linear"


# exp() arguments are clipped here so a diverging logit saturates instead of
# producing inf in float32.
_EXP_CLIP = 80.0


def sigmoid(z: np.ndarray) -> np.ndarray:
    # tanh form is overflow-free for any finite z
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def activate(kind: Activation, z: np.ndarray) -> np.ndarray:
    if kind is Activation.RELU:
        return np.maximum(z, 0)
    if kind is Activation.SIGMOID:
        return sigmoid(z)
    if kind is Activation.TRUNC_SIGMOID:
        # (1 - e^-z) / (1 + e^-z)
        return np.tanh(0.5 * z)
    if kind is Activation.EXP:
        return np.exp(np.minimum(z, _EXP_CLIP))
    if kind is Activation.SOFTPLUS:
        return np.logaddexp(0, z).astype(z.dtype, copy=False)
    return z


def activation_grad(kind: Activation, z: np.ndarray, a: np.ndarray) -> np.ndarray:
    """Elementwise derivative da/dz given the pre-activation and the output."""
    if kind is Activation.RELU:
        return (z > 0).astype(z.dtype)
    if kind is Activation.SIGMOID:
        return a * (1 - a)
    if kind is Activation.TRUNC_SIGMOID:
        return 0.5 * (1 - a * a)
    if kind is Activation.EXP:
        return np.where(z < _EXP_CLIP, a, 0).astype(z.dtype, copy=False)
    if kind is Activation.SOFTPLUS:
        return sigmoid(z)
    return np.ones_like(z)


@dataclass
class DenseLayer:
    """y = act(W x + b) with W stored [out x in]."""

    weights: np.ndarray
    bias: np.ndarray
    activation: Activation = Activation.LINEAR

    def __post_init__(self):
        self.activation = Activation(self.activation)
        if self.weights.ndim != 2 or self.bias.shape != (self.weights.shape[0],):
            raise ShapeError(
                f"weights {self.weights.shape} and bias {self.bias.shape} disagree"
            )

    @property
    def in_dim(self) -> int:
        return self.weights.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weights.shape[0]

    @property
    def size(self) -> int:
        return self.weights.size + self.bias.size


@dataclass
class MlpCache:
    inputs: list
    preacts: list
    outputs: list
    layer_key: tuple


def _layer_key(layers: Sequence[DenseLayer]) -> tuple:
    return tuple((id(l.weights), l.weights.shape) for l in layers)


@numba.njit(cache=True, fastmath=True)
def _bias_act(z, b, kind):
    # kind: 0 linear, 1 relu, 2 sigmoid; in place
    n, m = z.shape
    for i in range(n):
        for j in range(m):
            v = z[i, j] + b[j]
            if kind == 1:
                v = v if v > 0 else 0.0
            elif kind == 2:
                v = 0.5 * (1.0 + math.tanh(0.5 * v))
            z[i, j] = v


@numba.njit(cache=True, fastmath=True)
def _act_bwd(g, a, kind, gz, colsum):
    n, m = g.shape
    for j in range(m):
        colsum[j] = 0.0
    for i in range(n):
        for j in range(m):
            v = g[i, j]
            if kind == 1:
                v = v if a[i, j] > 0 else 0.0
            elif kind == 2:
                v = v * a[i, j] * (1.0 - a[i, j])
            gz[i, j] = v
            colsum[j] += v


_FUSED = {Activation.LINEAR: 0, Activation.RELU: 1, Activation.SIGMOID: 2}


def _fusable(layer, arr) -> bool:
    return (
        layer.activation in _FUSED
        and arr.ndim == 2
        and arr.dtype == layer.weights.dtype == layer.bias.dtype
        and arr.flags.c_contiguous
    )


def _deriv(kind: Activation, z, a):
    """da/dz; z may be None for activations whose derivative follows from the output."""
    if z is None:
        if kind is Activation.RELU:
            return (a > 0).astype(a.dtype)
        if kind is Activation.LINEAR:
            return np.ones_like(a)
    return activation_grad(kind, z, a)


def mlp_forward(layers: Sequence[DenseLayer], x: np.ndarray) -> tuple[np.ndarray, MlpCache]:
    """Run the stack on a vector (in,) or a batch (N, in)."""
    if not layers:
        raise ShapeError("empty layer stack")
    single = x.ndim == 1
    a = x[None, :] if single else x
    if a.shape[-1] != layers[0].in_dim:
        raise ShapeError(f"input width {a.shape[-1]} != layer in-dim {layers[0].in_dim}")
    cache = MlpCache([], [], [], _layer_key(layers))
    for layer in layers:
        if a.shape[-1] != layer.in_dim:
            raise ShapeError(f"layer expects {layer.in_dim} inputs, got {a.shape[-1]}")
        z = a @ layer.weights.T
        cache.inputs.append(a)
        if _fusable(layer, z):
            # the derivative of these activations is a function of the output,
            # so the pre-activation need not be kept
            _bias_act(z, layer.bias, _FUSED[layer.activation])
            cache.preacts.append(None)
            a = z
        else:
            z += layer.bias
            cache.preacts.append(z)
            a = activate(layer.activation, z)
        cache.outputs.append(a)
    return (a[0] if single else a), cache


def mlp_backward(
    layers: Sequence[DenseLayer], cache: MlpCache, grad_output: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Gradients of <grad_output, mlp(x)>.

    Returns the parameter gradient flattened as [W0, b0, W1, b1, ...] (matching
    `layers` order) and the gradient with respect to the input.
    """
    if cache.layer_key != _layer_key(layers):
        raise UsageError("cache was produced by a different layer stack")
    single = grad_output.ndim == 1
    g = grad_output[None, :] if single else grad_output
    if g.shape != cache.outputs[-1].shape:
        raise UsageError(
            f"grad_output shape {g.shape} does not match cached output {cache.outputs[-1].shape}"
        )
    parts = []
    for i in range(len(layers) - 1, -1, -1):
        layer = layers[i]
        out = cache.outputs[i]
        if cache.preacts[i] is None and g.dtype == out.dtype and g.flags.c_contiguous:
            gz = np.empty_like(out)
            gb = np.empty(out.shape[1], dtype=np.float64)
            _act_bwd(g, out, _FUSED[layer.activation], gz, gb)
            gb = gb.astype(out.dtype)
        else:
            gz = g * _deriv(layer.activation, cache.preacts[i], out)
            gb = gz.sum(axis=0)
        parts.append(gb)
        parts.append((gz.T @ cache.inputs[i]).ravel())
        g = gz @ layer.weights
    flat = np.concatenate(parts[::-1])
    return flat, (g[0] if single else g)


def mlp_deltas(layers, cache: MlpCache, grad_output: np.ndarray) -> tuple[list, np.ndarray]:
    """Like `mlp_backward` but returns the per-layer d/dz arrays instead of parameter grads."""
    if cache.layer_key != _layer_key(layers):
        raise UsageError("cache was produced by a different layer stack")
    g = grad_output
    deltas = [None] * len(layers)
    for i in range(len(layers) - 1, -1, -1):
        gz = g * _deriv(layers[i].activation, cache.preacts[i], cache.outputs[i])
        deltas[i] = gz
        g = gz @ layers[i].weights
    return deltas, g


def mlp_tangent_param_grad(layers, cache: MlpCache, deltas: list, tangent_in: np.ndarray) -> np.ndarray:
    """Parameter gradient of sum_s <tangent_in_s, d(seed . out)/d(in)_s>.

    Exact when every activation is piecewise linear (ReLU/linear): the input
    gradient is then locally constant in the input, and only the weights move
    it. `deltas` come from `mlp_deltas` with the same seed. Bias gradients are
    zero in this case. Flattened as [W0, b0, W1, b1, ...].
    """
    for l in layers:
        if l.activation not in (Activation.RELU, Activation.LINEAR):
            raise UsageError("tangent gradient needs piecewise-linear activations")
    parts = []
    a_dot = tangent_in
    for i, layer in enumerate(layers):
        parts.append((deltas[i].T @ a_dot).ravel())
        parts.append(np.zeros(layer.out_dim, dtype=deltas[i].dtype))
        z_dot = a_dot @ layer.weights.T
        a_dot = z_dot * _deriv(layer.activation, cache.preacts[i], cache.outputs[i])
    return np.concatenate(parts)


def glorot_uniform(rng: np.random.Generator, out_dim: int, in_dim: int) -> np.ndarray:
    limit = math.sqrt(6.0 / (in_dim + out_dim))
    return rng.uniform(-limit, limit, size=(out_dim, in_dim))


# --------------------------------------------------------------------------
# flat parameter storage


@dataclass
class Slot:
    offset: int
    shape: tuple
    group: str

    @property
    def size(self) -> int:
        return int(np.prod(self.shape)) if self.shape else 1


class ParamStore:
    """Contiguous parameter vector with a (name -> slice) registry.

    Register every tensor with `add` first, then call `allocate`; views handed
    out afterwards alias `data`.
    """

    def __init__(self, dtype=np.float32):
        self.dtype = np.dtype(dtype)
        self.layout: dict[str, Slot] = {}
        self._size = 0
        self.data: np.ndarray | None = None

    def add(self, name: str, shape, group: str = "default") -> None:
        if self.data is not None:
            raise UsageError("store already allocated")
        if name in self.layout:
            raise UsageError(f"duplicate parameter {name!r}")
        shape = tuple(int(s) for s in shape)
        slot = Slot(self._size, shape, group)
        self.layout[name] = slot
        self._size += slot.size

    def allocate(self) -> None:
        self.data = np.zeros(self._size, dtype=self.dtype)

    @property
    def size(self) -> int:
        return self._size

    def view(self, name: str, arr: np.ndarray | None = None) -> np.ndarray:
        slot = self.layout[name]
        return self.slice_of(slot, self.data if arr is None else arr)

    @staticmethod
    def slice_of(slot: Slot, arr: np.ndarray) -> np.ndarray:
        return arr[slot.offset : slot.offset + slot.size].reshape(slot.shape)

    def group_mask(self, group: str) -> np.ndarray:
        mask = np.zeros(self._size, dtype=bool)
        for slot in self.layout.values():
            if slot.group == group:
                mask[slot.offset : slot.offset + slot.size] = True
        return mask

    def layout_json(self) -> list:
        return [
            {"name": k, "offset": s.offset, "shape": list(s.shape), "group": s.group}
            for k, s in self.layout.items()
        ]


# --------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    # optional per-parameter multiplier on lr (e.g. separate rates for tables and heads)
    lr_scale: np.ndarray | None = field(default=None, repr=False)

    @classmethod
    def fresh(cls, n: int, dtype=np.float32, **hyper) -> "AdamState":
        return cls(m=np.zeros(n, dtype=dtype), v=np.zeros(n, dtype=dtype), **hyper)

    def copy(self) -> "AdamState":
        return AdamState(
            self.m.copy(), self.v.copy(), self.t, self.lr, self.beta1, self.beta2,
            self.eps, None if self.lr_scale is None else self.lr_scale,
        )


@numba.njit(cache=True)
def _first_nonfinite(g):
    for i in range(g.size):
        if not np.isfinite(g[i]):
            return i
    return -1


@numba.njit(cache=True, fastmath=True)
def _adam_kernel(p, g, m, v, scale, lr, b1, b2, eps, c1, c2):
    for i in range(p.size):
        gi = g[i]
        mi = b1 * m[i] + (1.0 - b1) * gi
        vi = b2 * v[i] + (1.0 - b2) * gi * gi
        m[i] = mi
        v[i] = vi
        step = lr * scale[i] * (mi / c1) / (math.sqrt(vi / c2) + eps)
        p[i] = p[i] - step


def adam_step(state: AdamState, params: np.ndarray, grads: np.ndarray) -> tuple[AdamState, np.ndarray]:
    """One bias-corrected Adam update, in place on `params`, `state.m`, `state.v`."""
    if not (params.shape == grads.shape == state.m.shape == state.v.shape):
        raise ShapeError(
            f"params {params.shape}, grads {grads.shape}, m {state.m.shape} must match"
        )
    bad = _first_nonfinite(grads)
    if bad >= 0:
        raise TrainingError(f"non-finite gradient at index {bad}", index=bad)
    state.t += 1
    c1 = 1.0 - state.beta1 ** state.t
    c2 = 1.0 - state.beta2 ** state.t
    scale = state.lr_scale
    if scale is None:
        scale = np.ones(1, dtype=params.dtype)
        scale = np.broadcast_to(scale, params.shape)
    _adam_kernel(
        params, grads.astype(params.dtype, copy=False), state.m, state.v,
        np.ascontiguousarray(scale, dtype=params.dtype),
        *(params.dtype.type(v) for v in (state.lr, state.beta1, state.beta2, state.eps, c1, c2)),
    )
    return state, params


# --------------------------------------------------------------------------
# checkpoint blob: 16-byte magic, version byte, u32 metadata length,
# UTF-8 JSON metadata, then the float32 parameter vector (little-endian)

MAGIC = b"NERFKIT\x00PARAMS\x00\x00"
BLOB_VERSION = 1
assert len(MAGIC) == 16


def save_blob(path, data: np.ndarray, meta: dict) -> None:
    body = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<BI", BLOB_VERSION, len(body)))
        fh.write(body)
        fh.write(np.ascontiguousarray(data, dtype="<f4").tobytes())


def load_blob(path) -> tuple[dict, np.ndarray]:
    raw = Path(path).read_bytes()
    if raw[:16] != MAGIC:
        raise FormatError(f"{path}: not a parameter blob (bad magic)")
    version, n = struct.unpack_from("<BI", raw, 16)
    if version != BLOB_VERSION:
        raise FormatError(f"{path}: unsupported blob version {version}")
    start = 16 + struct.calcsize("<BI")
    meta = json.loads(raw[start : start + n].decode("utf-8"))
    data = np.frombuffer(raw, dtype="<f4", offset=start + n).astype(np.float32)
    return meta, data
