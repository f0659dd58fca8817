"""Forward and backward passes for every layer in the model zoo.

Each operation comes as a forward function returning ``(output, cache)``
and a matching backward function that consumes the cache and the upstream
gradient. Nothing here owns parameters; callers hold them and apply the
returned gradients. All functions accept either a single sample or a
batch with one extra leading axis (the time axis is always ``-2`` for
sequence inputs).
"""

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DimensionError, SequenceTooShortError, VocabularyError
from .ndcore import relu, sigmoid, softmax, tanh_act


# ---------------------------------------------------------------------------
# parameter containers and initializers
# ---------------------------------------------------------------------------

@dataclass
class LstmParams:
    """Gate weights of one LSTM layer.

    Each weight matrix has shape (input_dim + hidden_dim, hidden_dim) and
    multiplies the concatenation [h_prev, x_t]; each bias has length
    hidden_dim.
    """

    W_f: np.ndarray
    W_i: np.ndarray
    W_g: np.ndarray
    W_o: np.ndarray
    b_f: np.ndarray
    b_i: np.ndarray
    b_g: np.ndarray
    b_o: np.ndarray

    def __post_init__(self):
        shapes = {self.W_f.shape, self.W_i.shape, self.W_g.shape, self.W_o.shape}
        lengths = {self.b_f.shape, self.b_i.shape, self.b_g.shape, self.b_o.shape}
        if len(shapes) != 1 or len(lengths) != 1:
            raise DimensionError(
                f"gate tensors disagree: weights {shapes}, biases {lengths}"
            )
        if self.hidden_dim < 1:
            raise DimensionError("hidden_dim must be positive")
        if self.W_f.shape[1] != self.hidden_dim:
            raise DimensionError(
                f"weight columns {self.W_f.shape[1]} != hidden_dim {self.hidden_dim}"
            )

    @property
    def hidden_dim(self):
        return self.b_f.shape[0]

    @property
    def input_dim(self):
        return self.W_f.shape[0] - self.hidden_dim

    def to_dict(self):
        return {
            "W_f": self.W_f, "W_i": self.W_i, "W_g": self.W_g, "W_o": self.W_o,
            "b_f": self.b_f, "b_i": self.b_i, "b_g": self.b_g, "b_o": self.b_o,
        }


@dataclass
class LstmState:
    """Hidden state h and cell state c, both of length hidden_dim."""

    h: np.ndarray
    c: np.ndarray

    @classmethod
    def zeros(cls, hidden_dim, batch_shape=()):
        shape = tuple(batch_shape) + (hidden_dim,)
        return cls(h=np.zeros(shape), c=np.zeros(shape))


@dataclass
class EmbeddingTable:
    """Trainable id-to-vector lookup; row 0 is the PAD embedding."""

    matrix: np.ndarray

    def __post_init__(self):
        if self.matrix.ndim != 2:
            raise DimensionError("embedding matrix must be 2-D")
        if self.vocab_size < 2 or self.embed_dim < 1:
            raise DimensionError(
                f"embedding table {self.matrix.shape} too small"
            )

    @property
    def vocab_size(self):
        return self.matrix.shape[0]

    @property
    def embed_dim(self):
        return self.matrix.shape[1]


def glorot_uniform(rng, fan_in, fan_out):
    """Uniform(-limit, limit) with limit = sqrt(6 / (fan_in + fan_out))."""
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def init_lstm_params(input_dim, hidden_dim, rng):
    d = input_dim + hidden_dim
    return LstmParams(
        W_f=glorot_uniform(rng, d, hidden_dim),
        W_i=glorot_uniform(rng, d, hidden_dim),
        W_g=glorot_uniform(rng, d, hidden_dim),
        W_o=glorot_uniform(rng, d, hidden_dim),
        b_f=np.zeros(hidden_dim),
        b_i=np.zeros(hidden_dim),
        b_g=np.zeros(hidden_dim),
        b_o=np.zeros(hidden_dim),
    )


def init_embedding(vocab_size, embed_dim, rng):
    return EmbeddingTable(rng.uniform(-0.05, 0.05, size=(vocab_size, embed_dim)))


def init_dense(in_dim, out_dim, rng):
    return glorot_uniform(rng, in_dim, out_dim), np.zeros(out_dim)


# ---------------------------------------------------------------------------
# embedding
# ---------------------------------------------------------------------------

def embedding_forward(ids, table):
    """Look up one embedding row per id; output shape ids.shape + (embed_dim,)."""
    matrix = table.matrix if isinstance(table, EmbeddingTable) else table
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= matrix.shape[0]):
        bad = ids[(ids < 0) | (ids >= matrix.shape[0])][0]
        raise VocabularyError(
            f"id {int(bad)} outside vocabulary of size {matrix.shape[0]}"
        )
    return matrix[ids]


def embedding_backward(ids, dout, vocab_size):
    """Accumulate output gradients into the looked-up rows.

    Repeated ids accumulate additively; PAD id 0 is treated like any row.
    """
    ids = np.asarray(ids)
    dout = np.asarray(dout)
    grad = np.zeros((vocab_size, dout.shape[-1]))
    np.add.at(grad, ids.reshape(-1), dout.reshape(-1, dout.shape[-1]))
    return grad


# ---------------------------------------------------------------------------
# LSTM / biLSTM with backpropagation through time
# ---------------------------------------------------------------------------

def _fused_gates(params):
    # One GEMM for all four gates; column blocks ordered f, i, g, o.
    W = np.concatenate(
        [params.W_f, params.W_i, params.W_g, params.W_o], axis=1
    )
    b = np.concatenate([params.b_f, params.b_i, params.b_g, params.b_o])
    return W, b


def _gate_acts(z, W4, b4, hidden):
    a = z @ W4 + b4
    f = sigmoid(a[..., :hidden])
    i = sigmoid(a[..., hidden:2 * hidden])
    g = tanh_act(a[..., 2 * hidden:3 * hidden])
    o = sigmoid(a[..., 3 * hidden:])
    return f, i, g, o


def lstm_step(x_t, prev, params):
    """One LSTM timestep.

    With z = [h_prev, x_t]: f = sigma(zW_f+b_f), i = sigma(zW_i+b_i),
    g = tanh(zW_g+b_g), o = sigma(zW_o+b_o), then c_t = f*c_prev + i*g
    and h_t = o*tanh(c_t).
    """
    x_t = np.asarray(x_t, dtype=np.float64)
    if x_t.shape[-1] != params.input_dim:
        raise DimensionError(
            f"input width {x_t.shape[-1]} != expected {params.input_dim}"
        )
    if prev.h.shape[-1] != params.hidden_dim:
        raise DimensionError(
            f"state width {prev.h.shape[-1]} != hidden_dim {params.hidden_dim}"
        )
    W4, b4 = _fused_gates(params)
    z = np.concatenate([prev.h, x_t], axis=-1)
    f, i, g, o = _gate_acts(z, W4, b4, params.hidden_dim)
    c_t = f * prev.c + i * g
    h_t = o * np.tanh(c_t)
    return LstmState(h=h_t, c=c_t)


def lstm_forward(seq, params, init=None):
    """Run an LSTM left to right over a (L, D) or (batch, L, D) sequence.

    Returns (last_h, all_h, cache); all_h stacks the hidden state of every
    timestep along the time axis. The cache feeds lstm_backward.
    """
    seq = np.asarray(seq, dtype=np.float64)
    if seq.ndim < 2 or seq.shape[-2] == 0:
        raise DimensionError("empty sequence: need at least one timestep")
    if seq.shape[-1] != params.input_dim:
        raise DimensionError(
            f"input width {seq.shape[-1]} != expected {params.input_dim}"
        )
    L = seq.shape[-2]
    hidden = params.hidden_dim
    batch_shape = seq.shape[:-2]
    if init is None:
        init = LstmState.zeros(hidden, batch_shape)
    W4, b4 = _fused_gates(params)
    h, c = init.h, init.c
    steps = []
    all_h = np.empty(batch_shape + (L, hidden))
    for t in range(L):
        x_t = seq[..., t, :]
        z = np.concatenate([h, x_t], axis=-1)
        f, i, g, o = _gate_acts(z, W4, b4, hidden)
        c_new = f * c + i * g
        tc = np.tanh(c_new)
        h = o * tc
        steps.append((z, f, i, g, o, c, tc))
        c = c_new
        all_h[..., t, :] = h
    cache = {
        "params": params, "W4": W4, "steps": steps,
        "seq_shape": seq.shape, "all_h": all_h,
    }
    return h, all_h, cache


def lstm_backward(cache, d_last_h=None, d_all_h=None):
    """Backpropagation through time over every step of an lstm_forward run.

    Either gradient (or both) may be supplied: d_last_h targets the final
    hidden state, d_all_h the full (.., L, hidden) stack. Returns
    (d_seq, grads) with grads keyed like LstmParams.to_dict().
    """
    params = cache["params"]
    steps = cache["steps"]
    hidden = params.hidden_dim
    L = len(steps)
    seq_shape = cache["seq_shape"]
    batch_shape = seq_shape[:-2]

    dW4 = np.zeros_like(cache["W4"])
    db4 = np.zeros(4 * hidden)
    d_seq = np.empty(seq_shape)
    dh = np.zeros(batch_shape + (hidden,))
    dc = np.zeros_like(dh)
    if d_last_h is not None:
        dh = dh + d_last_h
    for t in range(L - 1, -1, -1):
        z, f, i, g, o, c_prev, tc = steps[t]
        if d_all_h is not None:
            dh = dh + d_all_h[..., t, :]
        do = dh * tc
        dc = dc + dh * o * (1.0 - tc * tc)
        df = dc * c_prev
        di = dc * g
        dg = dc * i
        dc = dc * f
        da = np.concatenate(
            [df * f * (1.0 - f), di * i * (1.0 - i),
             dg * (1.0 - g * g), do * o * (1.0 - o)],
            axis=-1,
        )
        dW4 += z.reshape(-1, z.shape[-1]).T @ da.reshape(-1, 4 * hidden)
        db4 += da.reshape(-1, 4 * hidden).sum(axis=0)
        dz = da @ cache["W4"].T
        dh = dz[..., :hidden]
        d_seq[..., t, :] = dz[..., hidden:]
    grads = {
        "W_f": dW4[:, :hidden], "W_i": dW4[:, hidden:2 * hidden],
        "W_g": dW4[:, 2 * hidden:3 * hidden], "W_o": dW4[:, 3 * hidden:],
        "b_f": db4[:hidden], "b_i": db4[hidden:2 * hidden],
        "b_g": db4[2 * hidden:3 * hidden], "b_o": db4[3 * hidden:],
    }
    return d_seq, grads


def bilstm_forward(seq, fwd, bwd):
    """Final states of a forward and a reversed pass, concatenated.

    Output width is 2*hidden_dim with the forward half first.
    """
    if fwd.hidden_dim != bwd.hidden_dim:
        raise DimensionError(
            f"direction hidden dims differ: {fwd.hidden_dim} vs {bwd.hidden_dim}"
        )
    h_f, _, cache_f = lstm_forward(seq, fwd)
    h_b, _, cache_b = lstm_forward(np.asarray(seq)[..., ::-1, :], bwd)
    out = np.concatenate([h_f, h_b], axis=-1)
    return out, {"fwd": cache_f, "bwd": cache_b, "hidden": fwd.hidden_dim}


def bilstm_backward(cache, dout):
    """Split the gradient between directions and run both BPTT passes."""
    hidden = cache["hidden"]
    d_seq_f, grads_f = lstm_backward(cache["fwd"], d_last_h=dout[..., :hidden])
    d_seq_b, grads_b = lstm_backward(cache["bwd"], d_last_h=dout[..., hidden:])
    d_seq = d_seq_f + d_seq_b[..., ::-1, :]
    return d_seq, grads_f, grads_b


# ---------------------------------------------------------------------------
# 1-D convolution and max pooling
# ---------------------------------------------------------------------------

def conv1d_forward(seq, filters, bias):
    """Valid cross-correlation with ReLU: out length is L - kernel + 1.

    seq is (.., L, in_ch), filters (kernel, in_ch, out_ch), bias (out_ch,).
    """
    seq = np.asarray(seq, dtype=np.float64)
    kernel, in_ch, out_ch = filters.shape
    L = seq.shape[-2]
    if L < kernel:
        raise SequenceTooShortError(
            f"sequence length {L} shorter than kernel {kernel}"
        )
    if seq.shape[-1] != in_ch:
        raise DimensionError(
            f"input channels {seq.shape[-1]} != filter channels {in_ch}"
        )
    out_len = L - kernel + 1
    # windows[.., t, dt, c] = seq[.., t+dt, c]
    windows = np.lib.stride_tricks.sliding_window_view(seq, kernel, axis=-2)
    windows = np.ascontiguousarray(np.swapaxes(windows, -1, -2))
    flat = windows.reshape(-1, kernel * in_ch)
    pre = (flat @ filters.reshape(kernel * in_ch, out_ch) + bias)
    pre = pre.reshape(seq.shape[:-2] + (out_len, out_ch))
    out = np.maximum(pre, 0.0)
    cache = {"flat": flat, "pre": pre, "filters": filters, "seq_shape": seq.shape}
    return out, cache


def conv1d_backward(cache, dout):
    """Gradients with respect to the input sequence, filters, and bias."""
    filters = cache["filters"]
    kernel, in_ch, out_ch = filters.shape
    seq_shape = cache["seq_shape"]
    out_len = seq_shape[-2] - kernel + 1

    da = (dout * (cache["pre"] > 0)).reshape(-1, out_ch)
    d_bias = da.sum(axis=0)
    d_filters = (cache["flat"].T @ da).reshape(kernel, in_ch, out_ch)
    d_windows = (da @ filters.reshape(kernel * in_ch, out_ch).T)
    d_windows = d_windows.reshape(seq_shape[:-2] + (out_len, kernel, in_ch))
    d_seq = np.zeros(seq_shape)
    for dt in range(kernel):
        d_seq[..., dt:dt + out_len, :] += d_windows[..., :, dt, :]
    return d_seq, d_filters, d_bias


def maxpool1d(seq, pool):
    """Per-channel max over non-overlapping windows; remainder is dropped."""
    seq = np.asarray(seq, dtype=np.float64)
    if pool < 1:
        raise ConfigError(f"pool size must be >= 1, got {pool}")
    L = seq.shape[-2]
    if L < pool:
        raise SequenceTooShortError(
            f"sequence length {L} shorter than pool window {pool}"
        )
    n_win = L // pool
    trimmed = seq[..., :n_win * pool, :]
    grouped = trimmed.reshape(seq.shape[:-2] + (n_win, pool, seq.shape[-1]))
    # argmax picks the first occurrence on ties
    arg = grouped.argmax(axis=-2)
    out = np.take_along_axis(grouped, arg[..., None, :], axis=-2)[..., 0, :]
    cache = {"arg": arg, "pool": pool, "seq_shape": seq.shape}
    return out, cache


def maxpool1d_backward(cache, dout):
    """Route each window's gradient to its argmax position."""
    seq_shape = cache["seq_shape"]
    pool = cache["pool"]
    n_win = seq_shape[-2] // pool
    d_grouped = np.zeros(seq_shape[:-2] + (n_win, pool, seq_shape[-1]))
    np.put_along_axis(d_grouped, cache["arg"][..., None, :], dout[..., None, :],
                      axis=-2)
    d_seq = np.zeros(seq_shape)
    d_seq[..., :n_win * pool, :] = d_grouped.reshape(
        seq_shape[:-2] + (n_win * pool, seq_shape[-1])
    )
    return d_seq


# ---------------------------------------------------------------------------
# dense and dropout
# ---------------------------------------------------------------------------

_ACTIVATIONS = ("none", "relu", "softmax")


def dense_forward(x, W, b, activation="none"):
    """activation(xW + b) for activation in {none, relu, softmax}."""
    if activation not in _ACTIVATIONS:
        raise ConfigError(f"unknown activation '{activation}'")
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != W.shape[0]:
        raise DimensionError(
            f"input width {x.shape[-1]} != weight rows {W.shape[0]}"
        )
    pre = x @ W + b
    if activation == "relu":
        out = np.maximum(pre, 0.0)
    elif activation == "softmax":
        out = softmax(pre)
    else:
        out = pre
    return out, {"x": x, "W": W, "pre": pre, "out": out, "activation": activation}


def dense_backward(cache, dout):
    """Gradients (dx, dW, db) through the activation and the affine map."""
    act = cache["activation"]
    if act == "relu":
        da = dout * (cache["pre"] > 0)
    elif act == "softmax":
        p = cache["out"]
        da = p * (dout - np.sum(dout * p, axis=-1, keepdims=True))
    else:
        da = np.asarray(dout, dtype=np.float64)
    x = cache["x"]
    dW = x.reshape(-1, x.shape[-1]).T @ da.reshape(-1, da.shape[-1])
    db = da.reshape(-1, da.shape[-1]).sum(axis=0)
    dx = da @ cache["W"].T
    return dx, dW, db


def dropout(x, rate, mode, rng=None):
    """Inverted dropout; returns (output, mask).

    Eval mode is an identity with mask None. In train mode each element is
    zeroed with probability ``rate`` and survivors are scaled by
    1/(1 - rate), so the output matches the input in expectation.
    """
    if not 0.0 <= rate < 1.0:
        raise ConfigError(f"dropout rate must be in [0, 1), got {rate}")
    x = np.asarray(x, dtype=np.float64)
    if mode == "eval" or rate == 0.0:
        return x, None
    if mode != "train":
        raise ConfigError(f"unknown dropout mode '{mode}'")
    if rng is None:
        raise ConfigError("train-mode dropout needs a random generator")
    mask = rng.random(x.shape) >= rate
    return x * mask / (1.0 - rate), mask


def dropout_backward(dout, mask, rate):
    if mask is None:
        return np.asarray(dout, dtype=np.float64)
    return dout * mask / (1.0 - rate)
