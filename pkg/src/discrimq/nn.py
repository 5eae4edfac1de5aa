"""Small numpy kernel: parameter store, LSTM, MLP, losses, Adam, clipping.

All models in the package are built from the functions here with hand
written backward passes. Training runs in float32; ``ParamStore.astype``
gives a float64 copy for finite-difference checks.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable

import numpy as np

LOG_EPS = 1e-12

CHECKPOINT_MAGIC = b"DQCKPT01"
CHECKPOINT_VERSION = 1


class ShapeError(ValueError):
    pass


class StateError(RuntimeError):
    pass


class NumericError(ArithmeticError):
    pass


class ParamStore:
    """Named parameters with gradient and Adam moment buffers."""

    def __init__(self, dtype=np.float32):
        self.dtype = np.dtype(dtype)
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.frozen: set[str] = set()
        self.t = 0

    def add(self, name: str, value, trainable: bool = True) -> np.ndarray:
        if name in self.params:
            raise KeyError(f"parameter {name!r} already exists")
        arr = np.array(value, dtype=self.dtype, copy=True)
        self.params[name] = arr
        self.grads[name] = np.zeros_like(arr)
        self.m[name] = np.zeros_like(arr)
        self.v[name] = np.zeros_like(arr)
        if not trainable:
            self.frozen.add(name)
        return arr

    def __getitem__(self, name: str) -> np.ndarray:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def names(self) -> list[str]:
        return list(self.params)

    def trainable(self) -> list[str]:
        return [n for n in self.params if n not in self.frozen]

    def zero_grad(self) -> None:
        for g in self.grads.values():
            g.fill(0.0)

    def num_params(self) -> int:
        return sum(p.size for p in self.params.values())

    def astype(self, dtype) -> "ParamStore":
        """Copy parameters into a fresh store of another dtype (buffers reset)."""
        out = ParamStore(dtype)
        for name, p in self.params.items():
            out.add(name, p, trainable=name not in self.frozen)
        return out

    def copy(self) -> "ParamStore":
        out = self.astype(self.dtype)
        for name in self.params:
            out.m[name][...] = self.m[name]
            out.v[name][...] = self.v[name]
        out.t = self.t
        return out


# ---------------------------------------------------------------------------
# initialisation


def init_uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(max(fan_in, 1))
    return rng.uniform(-bound, bound, size=shape)


def init_linear(store: ParamStore, name: str, n_in: int, n_out: int, rng) -> None:
    store.add(f"{name}.W", init_uniform(rng, (n_out, n_in), n_in))
    store.add(f"{name}.b", init_uniform(rng, (n_out,), n_in))


def init_lstm(store: ParamStore, name: str, n_in: int, n_hidden: int, rng) -> None:
    """Gate blocks are stacked as (input, forget, output, candidate)."""
    fan_in = n_in + n_hidden
    store.add(f"{name}.W", init_uniform(rng, (4 * n_hidden, fan_in), fan_in))
    store.add(f"{name}.b", init_uniform(rng, (4 * n_hidden,), fan_in))


def _check(cond: bool, msg: str) -> None:
    if not cond:
        raise ShapeError(msg)


# ---------------------------------------------------------------------------
# activations


def sigmoid(z):
    z = np.asarray(z)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def logsumexp(x, axis=-1, keepdims=False):
    x = np.asarray(x)
    m = np.max(x, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    s = np.log(np.sum(np.exp(x - m), axis=axis, keepdims=True)) + m
    return s if keepdims else np.squeeze(s, axis=axis)


def log_softmax(x, axis=-1):
    return x - logsumexp(x, axis=axis, keepdims=True)


_ACTIVATIONS = {
    "linear": (lambda z: z, lambda z, a: np.ones_like(a)),
    "tanh": (np.tanh, lambda z, a: 1.0 - a * a),
    "relu": (lambda z: np.maximum(z, 0.0), lambda z, a: (z > 0).astype(a.dtype)),
    "sigmoid": (sigmoid, lambda z, a: a * (1.0 - a)),
}


# ---------------------------------------------------------------------------
# LSTM


@dataclass
class LSTMState:
    h: np.ndarray
    c: np.ndarray


def lstm_step(x, state: LSTMState, store: ParamStore, name: str = "lstm") -> LSTMState:
    """One LSTM step; works on a single vector or a (batch, dim) block."""
    W = store[f"{name}.W"]
    b = store[f"{name}.b"]
    H = W.shape[0] // 4
    x = np.asarray(x, dtype=store.dtype)
    _check(x.shape[-1] + H == W.shape[1],
           f"{name}.W expects input dim {W.shape[1] - H}, got x with dim {x.shape[-1]}")
    _check(state.h.shape[-1] == H and state.c.shape[-1] == H,
           f"{name}: state dims {state.h.shape[-1]}/{state.c.shape[-1]} != hidden {H}")
    z = np.concatenate([x, state.h], axis=-1) @ W.T + b
    i = sigmoid(z[..., :H])
    f = sigmoid(z[..., H:2 * H])
    o = sigmoid(z[..., 2 * H:3 * H])
    g = np.tanh(z[..., 3 * H:])
    c = f * state.c + i * g
    h = o * np.tanh(c)
    return LSTMState(h, c)


def lstm_forward(store: ParamStore, name: str, xs: np.ndarray, h0=None, c0=None):
    """Run a layer over xs of shape (T, B, I). Returns hs (T, B, H) and a cache."""
    W = store[f"{name}.W"]
    b = store[f"{name}.b"]
    H = W.shape[0] // 4
    T, B, I = xs.shape
    _check(I + H == W.shape[1], f"{name}.W expects input dim {W.shape[1] - H}, got {I}")
    dt = store.dtype
    h = np.zeros((B, H), dt) if h0 is None else h0
    c = np.zeros((B, H), dt) if c0 is None else c0
    hs = np.empty((T, B, H), dt)
    cache = {"xh": [], "gates": [], "c": [], "c_prev": [], "tanh_c": []}
    for t in range(T):
        xh = np.concatenate([xs[t], h], axis=1)
        z = xh @ W.T + b
        gates = np.empty_like(z)
        gates[:, :3 * H] = sigmoid(z[:, :3 * H])
        gates[:, 3 * H:] = np.tanh(z[:, 3 * H:])
        c_prev = c
        c = gates[:, H:2 * H] * c_prev + gates[:, :H] * gates[:, 3 * H:]
        tc = np.tanh(c)
        h = gates[:, 2 * H:3 * H] * tc
        hs[t] = h
        cache["xh"].append(xh)
        cache["gates"].append(gates)
        cache["c_prev"].append(c_prev)
        cache["tanh_c"].append(tc)
    cache["last"] = LSTMState(h, c)
    return hs, cache


def lstm_backward(store: ParamStore, name: str, dhs: np.ndarray, cache) -> np.ndarray:
    """Backprop through time; accumulates into store grads, returns dxs."""
    W = store[f"{name}.W"]
    H = W.shape[0] // 4
    T, B, _ = dhs.shape
    I = W.shape[1] - H
    dW = store.grads[f"{name}.W"]
    db = store.grads[f"{name}.b"]
    dxs = np.empty((T, B, I), store.dtype)
    dh_next = np.zeros((B, H), store.dtype)
    dc_next = np.zeros((B, H), store.dtype)
    for t in reversed(range(T)):
        gates = cache["gates"][t]
        i, f, o, g = (gates[:, k * H:(k + 1) * H] for k in range(4))
        tc = cache["tanh_c"][t]
        dh = dhs[t] + dh_next
        dc = dc_next + dh * o * (1.0 - tc * tc)
        dz = np.empty_like(gates)
        dz[:, :H] = dc * g * i * (1.0 - i)
        dz[:, H:2 * H] = dc * cache["c_prev"][t] * f * (1.0 - f)
        dz[:, 2 * H:3 * H] = dh * tc * o * (1.0 - o)
        dz[:, 3 * H:] = dc * i * (1.0 - g * g)
        dW += dz.T @ cache["xh"][t]
        db += dz.sum(axis=0)
        dxh = dz @ W
        dxs[t] = dxh[:, :I]
        dh_next = dxh[:, I:]
        dc_next = dc * f
    return dxs


# ---------------------------------------------------------------------------
# linear / MLP


def linear_forward(store: ParamStore, name: str, x):
    W = store[f"{name}.W"]
    _check(x.shape[-1] == W.shape[1],
           f"{name}.W expects input dim {W.shape[1]}, got {x.shape[-1]}")
    return x @ W.T + store[f"{name}.b"]


def linear_backward(store: ParamStore, name: str, x, dy):
    """x: (..., n_in), dy: (..., n_out). Returns dx."""
    W = store[f"{name}.W"]
    x2 = x.reshape(-1, x.shape[-1])
    dy2 = dy.reshape(-1, dy.shape[-1])
    store.grads[f"{name}.W"] += dy2.T @ x2
    store.grads[f"{name}.b"] += dy2.sum(axis=0)
    return dy @ W


def mlp_forward(x, store: ParamStore, layers: Iterable[tuple[str, str]], cache: list | None = None):
    """Chain of linear layers; ``layers`` is a list of (name, activation)."""
    a = np.asarray(x, dtype=store.dtype)
    for name, act in layers:
        if act not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {act!r}")
        z = linear_forward(store, name, a)
        out = _ACTIVATIONS[act][0](z)
        if cache is not None:
            cache.append((name, act, a, z, out))
        a = out
    return a


def mlp_backward(store: ParamStore, cache: list, dout, skip_last_activation: bool = False):
    """Backprop through a cached mlp_forward. Returns d(input).

    With ``skip_last_activation`` the incoming gradient is taken w.r.t. the
    last pre-activation (used with sigmoid + cross-entropy).
    """
    d = dout
    for k, (name, act, a_in, z, out) in enumerate(reversed(cache)):
        if not (k == 0 and skip_last_activation):
            d = d * _ACTIVATIONS[act][1](z, out)
        d = linear_backward(store, name, a_in, d)
    return d


# ---------------------------------------------------------------------------
# losses


def loss_multilabel(scores, targets) -> float:
    """Mean binary cross-entropy over all entries."""
    scores = np.asarray(scores, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if scores.shape != targets.shape:
        raise ShapeError(f"scores shape {scores.shape} != targets shape {targets.shape}")
    s = np.clip(scores, LOG_EPS, 1.0 - LOG_EPS)
    return float(-np.mean(targets * np.log(s) + (1.0 - targets) * np.log(1.0 - s)))


def loss_categorical(logits, target: int) -> float:
    logits = np.asarray(logits, dtype=np.float64)
    if logits.ndim != 1 or logits.shape[0] < 2:
        raise ShapeError("logits must be a vector with at least two entries")
    if not 0 <= target < logits.shape[0]:
        raise IndexError(f"target index {target} out of range for {logits.shape[0]} classes")
    return float(logsumexp(logits) - logits[target])


def softmax_xent(logits, targets, mask=None, normalizer=None):
    """Batched categorical NLL.

    logits (..., V), integer targets (...), optional mask. Returns the summed
    masked loss divided by ``normalizer`` (default: mask sum) and the
    gradient w.r.t. logits.
    """
    lsm = log_softmax(logits)
    nll = -np.take_along_axis(lsm, targets[..., None], axis=-1)[..., 0]
    if mask is None:
        mask = np.ones(targets.shape, dtype=logits.dtype)
    if normalizer is None:
        normalizer = max(float(mask.sum()), 1.0)
    loss = float((nll * mask).sum() / normalizer)
    grad = np.exp(lsm)
    np.put_along_axis(grad, targets[..., None],
                      np.take_along_axis(grad, targets[..., None], axis=-1) - 1.0, axis=-1)
    grad *= (mask / normalizer)[..., None]
    return loss, grad.astype(logits.dtype, copy=False)


# ---------------------------------------------------------------------------
# optimisation


@dataclass
class AdamConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_update(store: ParamStore, hyper: AdamConfig | None = None) -> None:
    hyper = hyper or AdamConfig()
    names = store.trainable()
    for name in names:
        g = store.grads.get(name)
        if g is None or g.shape != store.params[name].shape:
            raise StateError(f"gradient for {name!r} is not initialised")
    store.t += 1
    t = store.t
    c1 = 1.0 - hyper.beta1 ** t
    c2 = 1.0 - hyper.beta2 ** t
    for name in names:
        g = store.grads[name]
        m = store.m[name]
        v = store.v[name]
        m *= hyper.beta1
        m += (1.0 - hyper.beta1) * g
        v *= hyper.beta2
        v += (1.0 - hyper.beta2) * (g * g)
        store.params[name] -= hyper.lr * (m / c1) / (np.sqrt(v / c2) + hyper.eps)


def global_grad_norm(store: ParamStore) -> float:
    return float(np.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in store.grads.values())))


def clip_gradients(store: ParamStore, max_norm: float) -> float:
    """Rescale all gradients so their global L2 norm is at most max_norm."""
    if max_norm <= 0:
        raise ValueError("max_norm must be positive")
    norm = global_grad_norm(store)
    if norm > max_norm:
        scale = max_norm / norm
        for g in store.grads.values():
            g *= scale
    return norm


# ---------------------------------------------------------------------------
# gradient checking


def finite_diff_check(
    loss_fn: Callable[[ParamStore], float],
    store: ParamStore,
    eps: float = 1e-5,
    n_samples: int = 20,
    rng: np.random.Generator | None = None,
    names: list[str] | None = None,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``loss_fn(store)`` must return the loss and leave the analytic gradient
    in ``store.grads`` (it is responsible for zeroing them first). Up to
    ``n_samples`` coordinates are sampled per parameter.
    """
    rng = rng or np.random.default_rng(0)
    base = loss_fn(store)
    if not np.isfinite(base):
        raise NumericError("loss is not finite")
    analytic = {n: g.copy() for n, g in store.grads.items()}
    worst = 0.0
    for name in names or store.trainable():
        p = store.params[name].reshape(-1)
        count = min(n_samples, p.size)
        idx = rng.choice(p.size, size=count, replace=False)
        a_flat = analytic[name].reshape(-1)
        for k in idx:
            old = p[k]
            p[k] = old + eps
            lp = loss_fn(store)
            p[k] = old - eps
            lm = loss_fn(store)
            p[k] = old
            if not (np.isfinite(lp) and np.isfinite(lm)):
                raise NumericError(f"non-finite loss while perturbing {name}[{k}]")
            num = (lp - lm) / (2.0 * eps)
            a = float(a_flat[k])
            err = abs(a - num) / max(abs(a), abs(num), 1e-8)
            worst = max(worst, err)
    for n in store.grads:
        store.grads[n][...] = analytic[n]
    return worst


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, store: ParamStore, meta: dict | None = None) -> None:
    """Write manifest + raw little-endian payloads."""
    tensors = []
    for name, p in store.params.items():
        tensors.append({"name": name, "shape": list(p.shape), "trainable": name not in store.frozen})
    manifest = {
        "format_version": CHECKPOINT_VERSION,
        "dtype": "float32" if store.dtype == np.float32 else "float64",
        "tensors": tensors,
        "meta": meta or {},
    }
    blob = json.dumps(manifest, sort_keys=True).encode("utf-8")
    le = store.dtype.newbyteorder("<")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for name in store.params:
            fh.write(np.ascontiguousarray(store.params[name], dtype=le).tobytes())


def load_checkpoint(path) -> tuple[ParamStore, dict]:
    data = Path(path).read_bytes()
    if data[:8] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    (n,) = struct.unpack("<Q", data[8:16])
    manifest = json.loads(data[16:16 + n].decode("utf-8"))
    if manifest["format_version"] != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported format version {manifest['format_version']}")
    dtype = np.dtype(manifest["dtype"])
    le = dtype.newbyteorder("<")
    store = ParamStore(dtype)
    offset = 16 + n
    for spec in manifest["tensors"]:
        size = int(np.prod(spec["shape"], dtype=np.int64))
        nbytes = size * dtype.itemsize
        arr = np.frombuffer(data, dtype=le, count=size, offset=offset).reshape(spec["shape"])
        store.add(spec["name"], arr.astype(dtype), trainable=spec.get("trainable", True))
        offset += nbytes
    if offset != len(data):
        raise ValueError(f"{path}: trailing bytes after payload")
    return store, manifest["meta"]
