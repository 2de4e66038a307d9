"""Selection policy: stacked LSTM over the pool plus a two-layer scoring head.

Each pool frame is fed as ``[frame_feature, question_feature]`` in temporal
order. The head maps every top-layer hidden state to a logit, and the
logistic of that logit is the frame's selection probability.

Learnable arrays, in checkpoint order::

    lstm{l}.W   (4H, in_l + H)   gates stacked as input, forget, cell, output
    lstm{l}.b   (4H,)
    head.W1     (Hm, H)
    head.b1     (Hm,)
    head.W2     (1, Hm)
    head.b2     (1,)

with ``in_0 = 2D`` and ``in_l = H`` above the first layer.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .errors import InputError, NumericalError

LOG_FLOOR = 1e-12

CHECKPOINT_MAGIC = b"CKFP"
CHECKPOINT_VERSION = 1
_HEADER = struct.Struct("<4sIIIII")


def _sigmoid(x):
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


class PolicyParams:
    """Named weight arrays of the policy, also used to hold gradients."""

    def __init__(self, d: int, h: int, layers: int, head_hidden: int, arrays: dict[str, np.ndarray]):
        self.d, self.h, self.layers, self.head_hidden = d, h, layers, head_hidden
        expected = param_shapes(d, h, layers, head_hidden)
        if list(arrays) != list(expected):
            arrays = {k: arrays[k] for k in expected}
        for name, shape in expected.items():
            if arrays[name].shape != shape:
                raise InputError(f"{name}: expected shape {shape}, got {arrays[name].shape}")
        self.arrays = arrays

    def __getitem__(self, name: str) -> np.ndarray:
        return self.arrays[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self.arrays)

    def items(self):
        return self.arrays.items()

    def copy(self) -> "PolicyParams":
        return self._like({k: v.copy() for k, v in self.arrays.items()})

    def astype(self, dtype) -> "PolicyParams":
        return self._like({k: v.astype(dtype) for k, v in self.arrays.items()})

    def zeros_like(self, dtype=np.float64) -> "PolicyParams":
        return self._like({k: np.zeros(v.shape, dtype=dtype) for k, v in self.arrays.items()})

    def _like(self, arrays) -> "PolicyParams":
        return PolicyParams(self.d, self.h, self.layers, self.head_hidden, arrays)

    @property
    def size(self) -> int:
        return sum(v.size for v in self.arrays.values())

    def l2_norm(self) -> float:
        return float(np.sqrt(sum(float(np.sum(np.square(v, dtype=np.float64))) for v in self.arrays.values())))

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(v)) for v in self.arrays.values())

    def add_scaled_(self, other: "PolicyParams", scale: float) -> None:
        for k, v in self.arrays.items():
            v += scale * other.arrays[k]

    def equals(self, other: "PolicyParams") -> bool:
        return (self.d, self.h, self.layers, self.head_hidden) == (
            other.d, other.h, other.layers, other.head_hidden
        ) and all(np.array_equal(v, other.arrays[k]) for k, v in self.arrays.items())


def param_shapes(d: int, h: int, layers: int = 3, head_hidden: int | None = None) -> dict[str, tuple]:
    hm = h if head_hidden is None else head_hidden
    shapes = {}
    for layer in range(layers):
        n_in = 2 * d if layer == 0 else h
        shapes[f"lstm{layer}.W"] = (4 * h, n_in + h)
        shapes[f"lstm{layer}.b"] = (4 * h,)
    shapes["head.W1"] = (hm, h)
    shapes["head.b1"] = (hm,)
    shapes["head.W2"] = (1, hm)
    shapes["head.b2"] = (1,)
    return shapes


def init_policy(d: int, h: int = 128, seed: int = 0, layers: int = 3, head_hidden: int | None = None) -> PolicyParams:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases, float32."""
    if d < 1 or h < 1 or layers < 1:
        raise InputError("d, h and layers must all be >= 1")
    hm = h if head_hidden is None else head_hidden
    rng = np.random.default_rng([seed, 0x9011C7])
    arrays = {}
    for name, shape in param_shapes(d, h, layers, hm).items():
        if len(shape) == 1:
            arrays[name] = np.zeros(shape, dtype=np.float32)
        else:
            bound = 1.0 / np.sqrt(shape[1])
            arrays[name] = rng.uniform(-bound, bound, size=shape).astype(np.float32)
    return PolicyParams(d, h, layers, hm, arrays)


@dataclass
class PolicyOutput:
    scores: np.ndarray  # sigma per pool frame
    logits: np.ndarray
    cache: dict

    def __len__(self) -> int:
        return len(self.scores)


def _inputs(params: PolicyParams, features: np.ndarray, question_feature: np.ndarray) -> np.ndarray:
    features = np.asarray(features, dtype=np.float64)
    q = np.asarray(question_feature, dtype=np.float64)
    if features.ndim != 2 or features.shape[1] != params.d or q.shape != (params.d,):
        raise InputError(
            f"expected pool features (T, {params.d}) and question ({params.d},), "
            f"got {features.shape} and {q.shape}"
        )
    if features.shape[0] == 0:
        raise InputError("pool is empty")
    return np.concatenate([features, np.broadcast_to(q, features.shape)], axis=1)


def policy_forward(
    params: PolicyParams, features: np.ndarray, question_feature: np.ndarray, episode_id=None
) -> PolicyOutput:
    """Selection probability for every pool frame, with a cache for backprop."""
    x = _inputs(params, features, question_feature)
    p = {k: np.asarray(v, dtype=np.float64) for k, v in params.items()}
    h_dim = params.h
    steps = x.shape[0]
    layer_caches = []
    layer_in = x
    for layer in range(params.layers):
        w, b = p[f"lstm{layer}.W"], p[f"lstm{layer}.b"]
        n_in = layer_in.shape[1]
        w_x, w_h = w[:, :n_in], w[:, n_in:]
        pre_x = layer_in @ w_x.T + b
        gates = np.empty((steps, 4 * h_dim))
        cells = np.empty((steps, h_dim))
        hidden = np.empty((steps, h_dim))
        h_prev = np.zeros(h_dim)
        c_prev = np.zeros(h_dim)
        for t in range(steps):
            a = pre_x[t] + w_h @ h_prev
            g = np.empty_like(a)
            g[: 2 * h_dim] = _sigmoid(a[: 2 * h_dim])
            g[2 * h_dim : 3 * h_dim] = np.tanh(a[2 * h_dim : 3 * h_dim])
            g[3 * h_dim :] = _sigmoid(a[3 * h_dim :])
            c_prev = g[h_dim : 2 * h_dim] * c_prev + g[:h_dim] * g[2 * h_dim : 3 * h_dim]
            h_prev = g[3 * h_dim :] * np.tanh(c_prev)
            gates[t], cells[t], hidden[t] = g, c_prev, h_prev
        layer_caches.append({"x": layer_in, "gates": gates, "cells": cells, "hidden": hidden})
        layer_in = hidden
    with np.errstate(invalid="ignore", over="ignore"):
        u = np.tanh(layer_in @ p["head.W1"].T + p["head.b1"])
        z = u @ p["head.W2"][0] + p["head.b2"][0]
    if not np.all(np.isfinite(z)):
        raise NumericalError("non-finite selection logits", episode_id)
    scores = _sigmoid(z)
    return PolicyOutput(scores=scores, logits=z, cache={"layers": layer_caches, "u": u, "params": p})


def backward(params: PolicyParams, output: PolicyOutput, dlogits: np.ndarray, episode_id=None) -> PolicyParams:
    """Gradient of ``sum(dlogits * logits)`` with respect to every parameter."""
    dz = np.asarray(dlogits, dtype=np.float64)
    if not np.all(np.isfinite(dz)):
        raise NumericalError("non-finite upstream gradient", episode_id)
    p = output.cache["params"]
    layer_caches = output.cache["layers"]
    u = output.cache["u"]
    h_dim = params.h
    grads: dict[str, np.ndarray] = {}

    top = layer_caches[-1]["hidden"]
    grads["head.W2"] = (dz @ u)[None, :]
    grads["head.b2"] = np.array([dz.sum()])
    da1 = np.outer(dz, p["head.W2"][0]) * (1.0 - u * u)
    grads["head.W1"] = da1.T @ top
    grads["head.b1"] = da1.sum(axis=0)
    d_hidden = da1 @ p["head.W1"]

    for layer in reversed(range(params.layers)):
        lc = layer_caches[layer]
        x, gates, cells, hidden = lc["x"], lc["gates"], lc["cells"], lc["hidden"]
        w = p[f"lstm{layer}.W"]
        n_in = x.shape[1]
        w_h = w[:, n_in:]
        steps = x.shape[0]
        d_pre = np.empty((steps, 4 * h_dim))
        dh_next = np.zeros(h_dim)
        dc_next = np.zeros(h_dim)
        for t in reversed(range(steps)):
            g = gates[t]
            gi, gf, gg, go = g[:h_dim], g[h_dim : 2 * h_dim], g[2 * h_dim : 3 * h_dim], g[3 * h_dim :]
            c_prev = cells[t - 1] if t > 0 else np.zeros(h_dim)
            tc = np.tanh(cells[t])
            dh = d_hidden[t] + dh_next
            dc = dh * go * (1.0 - tc * tc) + dc_next
            da = d_pre[t]
            da[:h_dim] = dc * gg * gi * (1.0 - gi)
            da[h_dim : 2 * h_dim] = dc * c_prev * gf * (1.0 - gf)
            da[2 * h_dim : 3 * h_dim] = dc * gi * (1.0 - gg * gg)
            da[3 * h_dim :] = dh * tc * go * (1.0 - go)
            dc_next = dc * gf
            dh_next = w_h.T @ da
        h_shift = np.vstack([np.zeros((1, h_dim)), hidden[:-1]])
        grads[f"lstm{layer}.W"] = d_pre.T @ np.hstack([x, h_shift])
        grads[f"lstm{layer}.b"] = d_pre.sum(axis=0)
        d_hidden = d_pre @ w[:, :n_in]

    ordered = {name: grads[name] for name in param_shapes(params.d, params.h, params.layers, params.head_hidden)}
    out = PolicyParams(params.d, params.h, params.layers, params.head_hidden, ordered)
    if not out.all_finite():
        raise NumericalError("non-finite gradient", episode_id)
    return out


# -- sequential without-replacement log-probability ---------------------------


def _check_order(order: Sequence[int], n: int) -> list[int]:
    order = [int(i) for i in order]
    if len(set(order)) != len(order):
        raise InputError(f"selection contains duplicate positions: {order}")
    if not order:
        raise InputError("selection is empty")
    if any(not 0 <= i < n for i in order):
        raise InputError(f"selection positions out of range for pool of size {n}: {order}")
    return order


def sequential_log_prob(weights: np.ndarray, order: Sequence[int]) -> float:
    """log P of drawing ``order`` one at a time, without replacement.

    ``weights`` need not be normalized; positions refer to the pool.
    """
    return _sequential(np.asarray(weights, dtype=np.float64), order, want_grad=False)[0]


def _sequential(scores: np.ndarray, order: Sequence[int], want_grad: bool):
    n = len(scores)
    order = _check_order(order, n)
    total = scores.sum()
    if total <= 0:
        w = np.full(n, 1.0 / n)
    else:
        w = scores / total
    remaining = np.ones(n, dtype=bool)
    logp = 0.0
    dw = np.zeros(n)
    for i in order:
        mass = w[remaining].sum()
        a = max(w[i], LOG_FLOOR)
        b = max(mass, LOG_FLOOR)
        logp += np.log(a) - np.log(b)
        if want_grad:
            if w[i] > LOG_FLOOR:
                dw[i] += 1.0 / a
            if mass > LOG_FLOOR:
                dw[remaining] -= 1.0 / b
        remaining[i] = False
    if not want_grad:
        return logp, None
    if total <= 0:
        return logp, np.zeros(n)
    # w = s / sum(s)
    ds = dw / total - (dw @ scores) / (total * total)
    return logp, ds


def selection_log_prob(output: PolicyOutput | np.ndarray, order: Sequence[int]) -> float:
    """Log-probability of an ordered draw under the normalized selection scores."""
    scores = output.scores if isinstance(output, PolicyOutput) else np.asarray(output, dtype=np.float64)
    return _sequential(scores, order, want_grad=False)[0]


def log_prob_logit_grad(output: PolicyOutput, order: Sequence[int]) -> np.ndarray:
    """d log P(order) / d logits."""
    s = output.scores
    _, ds = _sequential(s, order, want_grad=True)
    return ds * s * (1.0 - s)


def grad_log_prob(
    params: PolicyParams, features: np.ndarray, question_feature: np.ndarray, order: Sequence[int],
    episode_id=None,
) -> PolicyParams:
    """Exact gradient of ``selection_log_prob`` for an ordered subset."""
    out = policy_forward(params, features, question_feature, episode_id)
    return backward(params, out, log_prob_logit_grad(out, order), episode_id)


# -- checkpoint file -----------------------------------------------------------


def save_checkpoint(params: PolicyParams, path: str | Path) -> None:
    """Header ``<4sIIIII`` (magic, version, D, H, layers, head hidden) then float32 blocks."""
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, params.d, params.h, params.layers, params.head_hidden))
        for name in param_shapes(params.d, params.h, params.layers, params.head_hidden):
            fh.write(np.ascontiguousarray(params[name], dtype="<f4").tobytes())


def load_checkpoint(path: str | Path) -> PolicyParams:
    blob = Path(path).read_bytes()
    if len(blob) < _HEADER.size:
        raise InputError(f"{path}: truncated checkpoint header")
    magic, version, d, h, layers, hm = _HEADER.unpack_from(blob)
    if magic != CHECKPOINT_MAGIC:
        raise InputError(f"{path}: not a policy checkpoint")
    if version != CHECKPOINT_VERSION:
        raise InputError(f"{path}: unsupported checkpoint version {version}")
    offset = _HEADER.size
    arrays = {}
    for name, shape in param_shapes(d, h, layers, hm).items():
        count = int(np.prod(shape))
        end = offset + 4 * count
        if end > len(blob):
            raise InputError(f"{path}: truncated at block {name}")
        arrays[name] = np.frombuffer(blob, dtype="<f4", count=count, offset=offset).astype(np.float32).reshape(shape)
        offset = end
    if offset != len(blob):
        raise InputError(f"{path}: {len(blob) - offset} trailing bytes")
    return PolicyParams(d, h, layers, hm, arrays)
