"""Dense float64 tensor math: activations, softmax, cross-entropy, and a
central-difference gradient oracle.

All values in the toolkit are C-order (row-major) float64 numpy arrays.
Every public operation keeps finite inputs finite; softmax subtracts the
row maximum before exponentiating and cross-entropy clamps probabilities
at ``PROB_CLAMP`` so losses never overflow.
"""

import numpy as np

from .errors import DimensionError, EvaluationError

# Floor applied to probabilities inside cross_entropy; keeps the loss finite
# (-ln(1e-12) ~ 27.63) when a model assigns zero mass to the true class.
PROB_CLAMP = 1e-12


def as_tensor(data):
    """Coerce to a row-major float64 array."""
    return np.ascontiguousarray(data, dtype=np.float64)


def matmul(a, b):
    """Matrix product of two 2-D tensors.

    Raises DimensionError naming both shapes when the inner extents differ.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(
            f"cannot multiply shapes {tuple(a.shape)} and {tuple(b.shape)}"
        )
    return a @ b


def sigmoid(x):
    """Elementwise logistic function, overflow-safe on both tails."""
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def tanh_act(x):
    return np.tanh(np.asarray(x, dtype=np.float64))


def relu(x):
    return np.maximum(np.asarray(x, dtype=np.float64), 0.0)


def softmax(logits):
    """Probability vector over the last axis, max-subtracted for stability."""
    z = np.asarray(logits, dtype=np.float64)
    z = z - np.max(z, axis=-1, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=-1, keepdims=True)


def cross_entropy(probs, label):
    """Negative log-likelihood of the true class.

    ``probs`` of shape (n,) with an integer ``label`` gives one scalar;
    shape (batch, n) with a label vector gives the batch mean. The picked
    probability is clamped at PROB_CLAMP so the result stays finite.
    """
    p = np.asarray(probs, dtype=np.float64)
    if p.ndim == 1:
        n = p.shape[0]
        label = int(label)
        if not 0 <= label < n:
            raise IndexError(f"label {label} out of range for {n} classes")
        return -np.log(max(p[label], PROB_CLAMP))
    labels = np.asarray(label)
    if labels.shape != p.shape[:1]:
        raise DimensionError(
            f"labels shape {labels.shape} does not match batch {p.shape[0]}"
        )
    if labels.size and (labels.min() < 0 or labels.max() >= p.shape[1]):
        raise IndexError(
            f"label out of range for {p.shape[1]} classes: {labels}"
        )
    picked = p[np.arange(p.shape[0]), labels]
    return float(np.mean(-np.log(np.maximum(picked, PROB_CLAMP))))


def cross_entropy_grad(probs, label):
    """Gradient of cross_entropy with respect to ``probs``.

    Zero where the clamp is active, matching the flat region of the
    clamped loss.
    """
    p = np.asarray(probs, dtype=np.float64)
    grad = np.zeros_like(p)
    if p.ndim == 1:
        label = int(label)
        if p[label] > PROB_CLAMP:
            grad[label] = -1.0 / p[label]
        return grad
    labels = np.asarray(label)
    rows = np.arange(p.shape[0])
    picked = p[rows, labels]
    live = picked > PROB_CLAMP
    grad[rows[live], labels[live]] = -1.0 / (picked[live] * p.shape[0])
    return grad


def grad_check(f, params, step=1e-4):
    """Compare analytic gradients against central differences.

    ``f(params)`` must return ``(loss, grads)`` where ``params`` and
    ``grads`` are dicts of same-shaped float64 arrays. Each coordinate is
    perturbed in place by +-step and the numeric slope (f(p+h)-f(p-h))/2h
    is compared with the analytic entry. Returns the maximum over all
    coordinates of |analytic - numeric| / max(1, |analytic| + |numeric|).
    """
    if not 1e-6 <= step <= 1e-2:
        raise ValueError(f"step {step} outside [1e-6, 1e-2]")
    loss, grads = f(params)
    if not np.isfinite(loss):
        raise EvaluationError(f"non-finite loss {loss} at base point")
    worst = 0.0
    for name, p in params.items():
        analytic = np.asarray(grads[name], dtype=np.float64)
        if analytic.shape != p.shape:
            raise DimensionError(
                f"gradient shape {analytic.shape} != parameter shape "
                f"{p.shape} for '{name}'"
            )
        flat = p.reshape(-1)
        aflat = analytic.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            hi, _ = f(params)
            flat[i] = orig - step
            lo, _ = f(params)
            flat[i] = orig
            if not (np.isfinite(hi) and np.isfinite(lo)):
                raise EvaluationError(
                    f"non-finite loss while perturbing '{name}'[{i}]"
                )
            numeric = (hi - lo) / (2.0 * step)
            a = aflat[i]
            err = abs(a - numeric) / max(1.0, abs(a) + abs(numeric))
            if err > worst:
                worst = err
    return worst
