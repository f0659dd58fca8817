"""The five classifier architectures as ordered layer graphs.

Every graph maps a fixed-length integer opcode sequence to a class
distribution. Parameters live inside the layer objects and are updated in
place by the optimizer; gradients are collected per named tensor after a
train-mode forward/backward pair.

Checkpoint files ("opseq-ckpt v1") store the architecture id, the model
spec as key=value lines, and each parameter tensor as raw little-endian
float64 bytes, so a round-trip is bit-exact.
"""

from dataclasses import dataclass, fields, replace

import numpy as np

from . import layers as nn
from .errors import ConfigError, DimensionError
from .ndcore import cross_entropy, cross_entropy_grad

ARCH_IDS = ("mlp_only", "lstm_plain", "lstm_embed", "bilstm_embed",
            "bilstm_embed_cnn")

CKPT_MAGIC = "opseq-ckpt v1"


@dataclass
class ModelSpec:
    """Architecture id plus every tunable size; defaults are the selected
    training parameters (sequence length 2000, 16 LSTM units, embedding
    width 128, kernel 3, 128 filters, pool 2, dropout 0.3)."""

    arch_id: str
    num_classes: int
    vocab_size: int = 32
    seq_len: int = 2000
    embed_dim: int = 128
    lstm_units: int = 16
    conv_filters: int = 128
    conv_kernel: int = 3
    pool_size: int = 2
    dropout_rate: float = 0.3
    mlp_hidden: int = 128

    def __post_init__(self):
        if self.arch_id not in ARCH_IDS:
            raise ConfigError(
                f"unknown arch_id '{self.arch_id}'; valid: {', '.join(ARCH_IDS)}"
            )
        if self.num_classes < 2:
            raise ConfigError("num_classes must be >= 2")
        if self.vocab_size < 2:
            raise ConfigError("vocab_size must be >= 2")
        for name in ("seq_len", "embed_dim", "lstm_units", "conv_filters",
                     "conv_kernel", "pool_size", "mlp_hidden"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError("dropout_rate must be in [0, 1)")
        if self.arch_id == "bilstm_embed_cnn":
            conv_len = self.seq_len - self.conv_kernel + 1
            if conv_len < 1 or conv_len // self.pool_size < 1:
                raise ConfigError(
                    f"seq_len {self.seq_len} too short for kernel "
                    f"{self.conv_kernel} and pool {self.pool_size}"
                )


# ---------------------------------------------------------------------------
# layer wrappers: hold parameters, cache, and gradients for one graph slot
# ---------------------------------------------------------------------------

class _GraphLayer:
    def __init__(self, name):
        self.name = name
        self.grads = {}
        self._cache = None

    @property
    def params(self):
        return {}

    def forward(self, x, mode, rng):
        raise NotImplementedError

    def backward(self, dout):
        raise NotImplementedError


class _ScaledInput(_GraphLayer):
    """Integer ids scaled into [0, 1] by dividing by vocab_size - 1."""

    def __init__(self, name, vocab_size):
        super().__init__(name)
        self.vocab_size = vocab_size

    def forward(self, x, mode, rng):
        return np.asarray(x, dtype=np.float64) / (self.vocab_size - 1)

    def backward(self, dout):
        return None  # input is not differentiated


class _OneHotInput(_GraphLayer):
    """Integer ids to per-timestep one-hot rows of width vocab_size."""

    def __init__(self, name, vocab_size):
        super().__init__(name)
        self.vocab_size = vocab_size

    def forward(self, x, mode, rng):
        ids = np.asarray(x)
        out = np.zeros(ids.shape + (self.vocab_size,))
        np.put_along_axis(out, ids[..., None], 1.0, axis=-1)
        return out

    def backward(self, dout):
        return None


class _Embedding(_GraphLayer):
    def __init__(self, name, table):
        super().__init__(name)
        self.table = table

    @property
    def params(self):
        return {"matrix": self.table.matrix}

    def forward(self, x, mode, rng):
        self._cache = np.asarray(x)
        return nn.embedding_forward(x, self.table)

    def backward(self, dout):
        self.grads = {
            "matrix": nn.embedding_backward(self._cache, dout,
                                            self.table.vocab_size)
        }
        return None


class _Dropout(_GraphLayer):
    def __init__(self, name, rate):
        super().__init__(name)
        self.rate = rate

    def forward(self, x, mode, rng):
        out, mask = nn.dropout(x, self.rate, mode, rng)
        self._cache = mask
        return out

    def backward(self, dout):
        return nn.dropout_backward(dout, self._cache, self.rate)


class _Lstm(_GraphLayer):
    """Single-direction LSTM emitting its final hidden state."""

    def __init__(self, name, params):
        super().__init__(name)
        self.lstm = params

    @property
    def params(self):
        return self.lstm.to_dict()

    def forward(self, x, mode, rng):
        last_h, _, cache = nn.lstm_forward(x, self.lstm)
        self._cache = cache
        return last_h

    def backward(self, dout):
        d_seq, self.grads = nn.lstm_backward(self._cache, d_last_h=dout)
        return d_seq


class _BiLstm(_GraphLayer):
    """Concatenated final states of a forward and a backward LSTM."""

    def __init__(self, name, fwd, bwd):
        super().__init__(name)
        self.fwd = fwd
        self.bwd = bwd

    @property
    def params(self):
        out = {f"fwd_{k}": v for k, v in self.fwd.to_dict().items()}
        out.update({f"bwd_{k}": v for k, v in self.bwd.to_dict().items()})
        return out

    def forward(self, x, mode, rng):
        out, cache = nn.bilstm_forward(x, self.fwd, self.bwd)
        self._cache = cache
        return out

    def backward(self, dout):
        d_seq, grads_f, grads_b = nn.bilstm_backward(self._cache, dout)
        self.grads = {f"fwd_{k}": v for k, v in grads_f.items()}
        self.grads.update({f"bwd_{k}": v for k, v in grads_b.items()})
        return d_seq


class _Conv1d(_GraphLayer):
    def __init__(self, name, filters, bias):
        super().__init__(name)
        self.filters = filters
        self.bias = bias

    @property
    def params(self):
        return {"filters": self.filters, "bias": self.bias}

    def forward(self, x, mode, rng):
        out, self._cache = nn.conv1d_forward(x, self.filters, self.bias)
        return out

    def backward(self, dout):
        d_seq, d_filters, d_bias = nn.conv1d_backward(self._cache, dout)
        self.grads = {"filters": d_filters, "bias": d_bias}
        return d_seq


class _MaxPool(_GraphLayer):
    def __init__(self, name, pool):
        super().__init__(name)
        self.pool = pool

    def forward(self, x, mode, rng):
        out, self._cache = nn.maxpool1d(x, self.pool)
        return out

    def backward(self, dout):
        return nn.maxpool1d_backward(self._cache, dout)


class _Dense(_GraphLayer):
    def __init__(self, name, W, b, activation):
        super().__init__(name)
        self.W = W
        self.b = b
        self.activation = activation

    @property
    def params(self):
        return {"W": self.W, "b": self.b}

    def forward(self, x, mode, rng):
        out, self._cache = nn.dense_forward(x, self.W, self.b, self.activation)
        return out

    def backward(self, dout):
        dx, dW, db = nn.dense_backward(self._cache, dout)
        self.grads = {"W": dW, "b": db}
        return dx


# ---------------------------------------------------------------------------
# graph construction and execution
# ---------------------------------------------------------------------------

@dataclass
class ModelGraph:
    spec: ModelSpec
    layers: list

    @property
    def arch_id(self):
        return self.spec.arch_id

    def forward(self, ids, mode="eval", rng=None):
        """Class distribution for one id sequence or a batch of them."""
        ids = np.asarray(ids)
        if ids.shape[-1] != self.spec.seq_len:
            raise DimensionError(
                f"sample length {ids.shape[-1]} != seq_len {self.spec.seq_len}"
            )
        x = ids
        for layer in self.layers:
            x = layer.forward(x, mode, rng)
        return x

    def backward(self, dprobs):
        """Propagate a loss gradient through the most recent forward pass."""
        d = dprobs
        for layer in reversed(self.layers):
            d = layer.backward(d)

    def parameters(self):
        """Ordered dict of 'layer.tensor' -> array (live references)."""
        out = {}
        for layer in self.layers:
            for key, value in layer.params.items():
                out[f"{layer.name}.{key}"] = value
        return out

    def gradients(self):
        out = {}
        for layer in self.layers:
            for key, value in layer.grads.items():
                out[f"{layer.name}.{key}"] = value
        return out


def build_model(spec, rng):
    """Construct the layer graph for spec.arch_id with freshly drawn weights."""
    s = spec
    units = s.lstm_units
    stack = []
    if s.arch_id == "mlp_only":
        W1, b1 = nn.init_dense(s.seq_len, s.mlp_hidden, rng)
        W2, b2 = nn.init_dense(s.mlp_hidden, s.num_classes, rng)
        stack = [
            _ScaledInput("input_scale", s.vocab_size),
            _Dense("hidden", W1, b1, "relu"),
            _Dropout("dropout_1", s.dropout_rate),
            _Dense("classifier", W2, b2, "softmax"),
        ]
    elif s.arch_id == "lstm_plain":
        lstm = nn.init_lstm_params(s.vocab_size, units, rng)
        W, b = nn.init_dense(units, s.num_classes, rng)
        stack = [
            _OneHotInput("onehot", s.vocab_size),
            _Dropout("dropout_1", s.dropout_rate),
            _Lstm("lstm", lstm),
            _Dropout("dropout_2", s.dropout_rate),
            _Dense("classifier", W, b, "softmax"),
        ]
    elif s.arch_id == "lstm_embed":
        table = nn.init_embedding(s.vocab_size, s.embed_dim, rng)
        lstm = nn.init_lstm_params(s.embed_dim, units, rng)
        W, b = nn.init_dense(units, s.num_classes, rng)
        stack = [
            _Embedding("embedding", table),
            _Dropout("dropout_1", s.dropout_rate),
            _Lstm("lstm", lstm),
            _Dropout("dropout_2", s.dropout_rate),
            _Dense("classifier", W, b, "softmax"),
        ]
    elif s.arch_id == "bilstm_embed":
        table = nn.init_embedding(s.vocab_size, s.embed_dim, rng)
        fwd = nn.init_lstm_params(s.embed_dim, units, rng)
        bwd = nn.init_lstm_params(s.embed_dim, units, rng)
        W, b = nn.init_dense(2 * units, s.num_classes, rng)
        stack = [
            _Embedding("embedding", table),
            _Dropout("dropout_1", s.dropout_rate),
            _BiLstm("bilstm", fwd, bwd),
            _Dropout("dropout_2", s.dropout_rate),
            _Dense("classifier", W, b, "softmax"),
        ]
    elif s.arch_id == "bilstm_embed_cnn":
        table = nn.init_embedding(s.vocab_size, s.embed_dim, rng)
        filters = rng.uniform(
            -np.sqrt(6.0 / (s.conv_kernel * s.embed_dim + s.conv_filters)),
            np.sqrt(6.0 / (s.conv_kernel * s.embed_dim + s.conv_filters)),
            size=(s.conv_kernel, s.embed_dim, s.conv_filters),
        )
        bias = np.zeros(s.conv_filters)
        fwd = nn.init_lstm_params(s.conv_filters, units, rng)
        bwd = nn.init_lstm_params(s.conv_filters, units, rng)
        W, b = nn.init_dense(2 * units, s.num_classes, rng)
        stack = [
            _Embedding("embedding", table),
            _Dropout("dropout_1", s.dropout_rate),
            _Conv1d("conv1d", filters, bias),
            _MaxPool("maxpool", s.pool_size),
            _BiLstm("bilstm", fwd, bwd),
            _Dropout("dropout_2", s.dropout_rate),
            _Dense("classifier", W, b, "softmax"),
        ]
    return ModelGraph(spec=replace(s), layers=stack)


def forward(model, sample, mode="eval", rng=None):
    """Module-level convenience wrapper around ModelGraph.forward."""
    return model.forward(sample, mode=mode, rng=rng)


def count_params(model):
    """Total number of trainable scalars across all parameter tensors."""
    return sum(int(v.size) for v in model.parameters().values())


def loss_and_grads(model, ids, labels, mode="train", rng=None):
    """Mean cross-entropy over a batch plus the class distributions and
    gradients per named tensor."""
    probs = model.forward(ids, mode=mode, rng=rng)
    loss = cross_entropy(probs, labels)
    model.backward(cross_entropy_grad(probs, labels))
    return loss, probs, model.gradients()


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def save_model(model, path):
    """Write an "opseq-ckpt v1" file; the tensor bytes round-trip bit-exactly."""
    spec = model.spec
    params = model.parameters()
    with open(path, "wb") as fh:
        fh.write(f"{CKPT_MAGIC}\n".encode())
        for field in fields(ModelSpec):
            fh.write(f"{field.name}={getattr(spec, field.name)}\n".encode())
        fh.write(f"tensors={len(params)}\n".encode())
        for name, tensor in params.items():
            extents = " ".join(str(e) for e in tensor.shape)
            fh.write(f"{name} {tensor.ndim} {extents}".rstrip().encode() + b"\n")
            fh.write(np.ascontiguousarray(tensor, dtype="<f8").tobytes())


def _read_line(fh):
    chunks = bytearray()
    while True:
        byte = fh.read(1)
        if not byte or byte == b"\n":
            break
        chunks += byte
    return chunks.decode()


def load_model(path):
    """Rebuild a model from a checkpoint file."""
    with open(path, "rb") as fh:
        if _read_line(fh) != CKPT_MAGIC:
            raise ConfigError(f"{path}: not an {CKPT_MAGIC} file")
        raw = {}
        for field in fields(ModelSpec):
            line = _read_line(fh)
            key, _, value = line.partition("=")
            if key != field.name:
                raise ConfigError(f"{path}: expected '{field.name}=', got '{line}'")
            raw[key] = value
        spec = ModelSpec(
            arch_id=raw["arch_id"],
            num_classes=int(raw["num_classes"]),
            vocab_size=int(raw["vocab_size"]),
            seq_len=int(raw["seq_len"]),
            embed_dim=int(raw["embed_dim"]),
            lstm_units=int(raw["lstm_units"]),
            conv_filters=int(raw["conv_filters"]),
            conv_kernel=int(raw["conv_kernel"]),
            pool_size=int(raw["pool_size"]),
            dropout_rate=float(raw["dropout_rate"]),
            mlp_hidden=int(raw["mlp_hidden"]),
        )
        count_line = _read_line(fh)
        if not count_line.startswith("tensors="):
            raise ConfigError(f"{path}: missing tensor count")
        n_tensors = int(count_line.split("=", 1)[1])

        model = build_model(spec, np.random.default_rng(0))
        params = model.parameters()
        if n_tensors != len(params):
            raise ConfigError(
                f"{path}: {n_tensors} tensors in file, {len(params)} in model"
            )
        for _ in range(n_tensors):
            header = _read_line(fh).split()
            name, rank = header[0], int(header[1])
            extents = tuple(int(e) for e in header[2:2 + rank])
            if name not in params:
                raise ConfigError(f"{path}: unknown tensor '{name}'")
            target = params[name]
            if extents != target.shape:
                raise ConfigError(
                    f"{path}: tensor '{name}' has extents {extents}, "
                    f"expected {target.shape}"
                )
            n_bytes = 8 * int(np.prod(extents, dtype=np.int64))
            data = fh.read(n_bytes)
            if len(data) != n_bytes:
                raise ConfigError(f"{path}: truncated tensor '{name}'")
            np.copyto(target, np.frombuffer(data, dtype="<f8").reshape(extents))
    return model
