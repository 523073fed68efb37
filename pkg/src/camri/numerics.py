"""Numeric substrate: stable softmax, L2 normalization, clamped arccos, Adam, init.

All arrays are float64 numpy arrays. Functions that accept a vector also accept
a 2-D array and then operate row-wise, which is how the training loop uses them.
"""

from dataclasses import dataclass

import numpy as np

from camri.errors import DegenerateNormError, InvalidInputError

ARCCOS_CLAMP = 1e-7

ADAM_LR = 1e-3
ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


def make_rng(seed):
    """Seeded generator; identical seeds give identical draw sequences.

    ``seed`` may be an int or a sequence of ints (used to derive independent
    streams from one trial seed).
    """
    if np.ndim(seed) == 0:
        seed = int(seed)
    else:
        seed = [int(s) for s in seed]
    return np.random.default_rng(seed)


def softmax(o):
    """Softmax over the last axis, computed with max-subtraction."""
    o = np.asarray(o, dtype=np.float64)
    if not np.all(np.isfinite(o)):
        raise InvalidInputError("softmax input contains non-finite values")
    shifted = o - o.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_backward(h, upstream):
    """Map dL/dh to dL/do for h = softmax(o), row-wise."""
    inner = np.sum(upstream * h, axis=-1, keepdims=True)
    return h * (upstream - inner)


def normalize_rows(v, axis=-1):
    """Return (v / ||v||, ||v||) along ``axis``; raises on zero-norm slices."""
    v = np.asarray(v, dtype=np.float64)
    norm = np.sqrt(np.sum(v * v, axis=axis, keepdims=True))
    if np.any(norm == 0.0):
        raise DegenerateNormError("cannot normalize a zero vector")
    return v / norm, norm


def normalize_backward(unit, norm, upstream, axis=-1):
    """Gradient through ``unit = v / ||v||``: (I - u u^T) upstream / ||v||."""
    radial = np.sum(unit * upstream, axis=axis, keepdims=True)
    return (upstream - unit * radial) / norm


def l2_normalize(v):
    """Normalize a vector to unit length.

    Returns the unit vector and a closure mapping an upstream gradient
    (w.r.t. the unit vector) to the gradient w.r.t. ``v``.
    """
    unit, norm = normalize_rows(v)

    def jacobian(upstream):
        return normalize_backward(unit, norm, np.asarray(upstream, dtype=np.float64))

    return unit, jacobian


def clamp_cosine(c, eps=ARCCOS_CLAMP):
    return np.clip(c, -1.0 + eps, 1.0 - eps)


def safe_arccos(c, eps=ARCCOS_CLAMP):
    """arccos with the argument clamped to [-1+eps, 1-eps]; never NaN for real input."""
    c = np.asarray(c, dtype=np.float64)
    out = np.arccos(clamp_cosine(np.nan_to_num(c, nan=0.0, posinf=1.0, neginf=-1.0), eps))
    return float(out) if out.ndim == 0 else out


@dataclass
class AdamState:
    first_moment: np.ndarray
    second_moment: np.ndarray
    step_count: int = 0
    lr: float = ADAM_LR
    beta1: float = ADAM_BETA1
    beta2: float = ADAM_BETA2
    eps: float = ADAM_EPS

    @classmethod
    def zeros_like(cls, params, **hyper):
        params = np.asarray(params)
        return cls(np.zeros(params.shape), np.zeros(params.shape), **hyper)


def adam_step(params, grads, state):
    """One bias-corrected Adam update. Returns ``(new_params, new_state)``.

    Neither input array is modified.
    """
    params = np.asarray(params, dtype=np.float64)
    grads = np.asarray(grads, dtype=np.float64)
    if params.shape != grads.shape or params.shape != state.first_moment.shape:
        raise InvalidInputError(
            f"adam_step shape mismatch: params {params.shape}, grads {grads.shape}, "
            f"moments {state.first_moment.shape}"
        )
    t = state.step_count + 1
    m = state.beta1 * state.first_moment + (1.0 - state.beta1) * grads
    v = state.beta2 * state.second_moment + (1.0 - state.beta2) * grads * grads
    m_hat = m / (1.0 - state.beta1**t)
    v_hat = v / (1.0 - state.beta2**t)
    new_params = params - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    new_state = AdamState(m, v, t, state.lr, state.beta1, state.beta2, state.eps)
    return new_params, new_state


def init_weights(rows, cols, rng, scheme="glorot-uniform"):
    """Glorot-uniform matrix with entries in +-sqrt(6 / (rows + cols))."""
    if rows < 1 or cols < 1:
        raise InvalidInputError("init_weights needs rows, cols >= 1")
    if scheme != "glorot-uniform":
        raise InvalidInputError(f"unknown init scheme {scheme!r}")
    bound = np.sqrt(6.0 / (rows + cols))
    return rng.uniform(-bound, bound, size=(rows, cols))
