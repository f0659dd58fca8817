"""Opcode-sequence malware family classifiers built from scratch on numpy.

Five architectures (MLP on scaled ids, LSTM on one-hot input, LSTM and
biLSTM over a trainable embedding, and biLSTM over CNN features) share a
common corpus pipeline, training loop, and evaluation protocol.
"""

__version__ = "0.1.0"

from .corpus import (
    EncodedDataset,
    OpcodeVocab,
    build_vocab,
    encode,
    group_families,
    parse_disassembly,
    split,
    synth_corpus,
)
from .train import TrainConfig, evaluate, grid_search, run_protocol, train_model
from .zoo import ARCH_IDS, ModelSpec, build_model, load_model, save_model

__all__ = [
    "ARCH_IDS",
    "EncodedDataset",
    "ModelSpec",
    "OpcodeVocab",
    "TrainConfig",
    "__version__",
    "build_model",
    "build_vocab",
    "encode",
    "evaluate",
    "grid_search",
    "group_families",
    "load_model",
    "parse_disassembly",
    "run_protocol",
    "save_model",
    "split",
    "synth_corpus",
    "train_model",
]
