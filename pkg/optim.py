#!/usr/bin/env python3
"""
Training machinery: softmax cross-entropy, mean squared error, Adam and
global-norm gradient clipping. Parameters and gradients travel as
name -> ndarray dicts and are updated in place.
"""

import math
from dataclasses import dataclass, field
from typing import Dict, Sequence, Tuple

import numpy as np

from errors import LabelOutOfRange, ShapeMismatch
from tensor_core import ArrayLike, as_array


def cross_entropy_with_logits(logits: ArrayLike, labels: Sequence[int]) -> Tuple[float, np.ndarray]:
    """Mean -log softmax(logits)[label] over the batch, with its gradient (softmax - onehot) / B."""
    z = as_array(logits)
    if z.ndim == 1:
        z = z[None]
    y = np.asarray(labels, dtype=np.int64).reshape(-1)
    if z.ndim != 2 or z.shape[0] != y.size or y.size == 0:
        raise ShapeMismatch(f"{y.size} labels for logits of shape {z.shape}")
    if np.any(y < 0) or np.any(y >= z.shape[1]):
        raise LabelOutOfRange(f"labels must lie in [0, {z.shape[1]}), got {sorted(set(y.tolist()))}")

    shifted = z - z.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(y.size)
    loss = float(np.mean(log_norm - shifted[rows, y]))

    grad = np.exp(shifted - log_norm[:, None])
    grad[rows, y] -= 1.0
    grad /= y.size
    return loss, grad.reshape(as_array(logits).shape)


def mse_loss(predictions: ArrayLike, targets: ArrayLike) -> Tuple[float, np.ndarray]:
    p, t = as_array(predictions), as_array(targets)
    if p.shape != t.shape:
        raise ShapeMismatch(f"predictions {p.shape} vs targets {t.shape}")
    diff = p - t
    return float(np.mean(diff ** 2)), 2.0 * diff / diff.size


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def for_params(cls, params: Dict[str, np.ndarray], lr: float, **hyper) -> "AdamState":
        state = cls(lr=lr, **hyper)
        for name, p in params.items():
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        return state


def adam_step(params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray], state: AdamState) -> AdamState:
    """One bias-corrected Adam update, applied to params in place."""
    if state.lr <= 0:
        raise ValueError(f"learning rate must be positive, got {state.lr}")
    if set(grads) != set(params):
        raise ShapeMismatch(f"gradient names differ from parameter names: {sorted(set(grads) ^ set(params))[:5]}")
    for name, p in params.items():
        if grads[name].shape != p.shape:
            raise ShapeMismatch(f"{name}: gradient {grads[name].shape} vs parameter {p.shape}")
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        elif state.m[name].shape != p.shape:
            raise ShapeMismatch(f"{name}: optimiser state {state.m[name].shape} vs parameter {p.shape}")

    state.t += 1
    bc1 = 1.0 - state.beta1 ** state.t
    bc2 = 1.0 - state.beta2 ** state.t
    for name, p in params.items():
        g = grads[name]
        m, v = state.m[name], state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    return state


def global_norm(grads: Dict[str, np.ndarray]) -> float:
    return math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))


def clip_grad_norm(grads: Dict[str, np.ndarray], max_norm: float) -> Tuple[Dict[str, np.ndarray], float]:
    """Scale every gradient in place so the global L2 norm is at most max_norm; returns the pre-clip norm."""
    if max_norm <= 0:
        raise ValueError(f"max_norm must be positive, got {max_norm}")
    norm = global_norm(grads)
    if norm > max_norm:
        scale = max_norm / norm
        for g in grads.values():
            g *= scale
    return grads, norm
