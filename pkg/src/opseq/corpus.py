"""Corpus handling: disassembly parsing, opcode vocabulary, fixed-length
integer encoding, family grouping, stratified splits, and a synthetic
Markov-chain corpus generator that stands in for real malware samples.

Vocabulary convention: PAD=0, the K most frequent opcodes get ids 1..K by
descending frequency (lexicographic tie-break), and everything else maps
to OTHER=K+1, giving vocab_size = K+2.
"""

import re
from collections import Counter
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    ConfigError,
    EmptySampleError,
    InsufficientDataError,
)

PAD_ID = 0

_MNEM_RE = re.compile(r"[A-Za-z][A-Za-z0-9_.]*$")
_HEX_RE = re.compile(r"[0-9a-fA-F]+$")


# ---------------------------------------------------------------------------
# disassembly parsing
# ---------------------------------------------------------------------------

def _listing_mnemonic(tokens):
    # Skip address and byte columns: "401000:" style addresses, 0x-prefixed
    # hex, two-digit byte dumps, and long bare hex runs. The first remaining
    # token that looks like an identifier is the mnemonic.
    for tok in tokens:
        body = tok[:-1] if tok.endswith(":") else tok
        prefixed = body[2:] if body[:2].lower() == "0x" else body
        if prefixed and _HEX_RE.match(prefixed):
            if tok.endswith(":") or prefixed is not body:
                continue
            if len(body) == 2 or len(body) >= 5:
                continue
        if _MNEM_RE.match(tok):
            return tok.lower()
    return None


def parse_disassembly(text, name="<input>"):
    """Extract the mnemonic sequence from disassembly text.

    Accepts one mnemonic per line as well as full disassembler listing
    lines (address and byte columns are skipped). Blank lines and lines
    starting with ';' or '#' are ignored. Raises EmptySampleError when
    nothing can be extracted.
    """
    ops = []
    for line in text.splitlines():
        line = line.strip()
        if not line or line[0] in ";#":
            continue
        tokens = [t for t in re.split(r"[\s,]+", line) if t]
        if len(tokens) == 1:
            if _MNEM_RE.match(tokens[0]):
                ops.append(tokens[0].lower())
            continue
        mnem = _listing_mnemonic(tokens)
        if mnem is not None:
            ops.append(mnem)
    if not ops:
        raise EmptySampleError(f"no opcodes extracted from {name}")
    return ops


def parse_disassembly_file(path):
    text = Path(path).read_text(encoding="utf-8", errors="replace")
    return parse_disassembly(text, name=str(path))


def iter_corpus_files(root):
    """Yield (family, path) pairs in sorted family then filename order."""
    root = Path(root)
    if not root.is_dir():
        raise ConfigError(f"corpus directory not found: {root}")
    for fam_dir in sorted(p for p in root.iterdir() if p.is_dir()):
        for path in sorted(p for p in fam_dir.iterdir() if p.is_file()):
            yield fam_dir.name, path


def _parse_one(item):
    family, path = item
    try:
        return family, path.name, parse_disassembly_file(path)
    except EmptySampleError:
        return family, path.name, None


def load_corpus_dir(root, jobs=1):
    """Parse every sample under root.

    Returns (parsed, skipped): parsed is a list of (family, filename,
    mnemonics) in sorted order, skipped the (family, filename) pairs that
    yielded zero opcodes. Parsing may fan out over processes; the merge
    order is always the sorted file order, so results are identical at any
    job count.
    """
    items = list(iter_corpus_files(root))
    if jobs > 1 and len(items) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_parse_one, items, chunksize=16))
    else:
        results = [_parse_one(item) for item in items]
    parsed = [(f, n, ops) for f, n, ops in results if ops is not None]
    skipped = [(f, n) for f, n, ops in results if ops is None]
    return parsed, skipped


# ---------------------------------------------------------------------------
# vocabulary
# ---------------------------------------------------------------------------

@dataclass
class OpcodeVocab:
    """Ranked opcode list; ids are 1-based ranks, PAD=0, OTHER=K+1."""

    ranked: list  # [(mnemonic, count)] with non-increasing counts

    def __post_init__(self):
        counts = [c for _, c in self.ranked]
        if any(a < b for a, b in zip(counts, counts[1:])):
            raise ConfigError("vocabulary counts must be non-increasing")
        self._ids = {m: i + 1 for i, (m, _) in enumerate(self.ranked)}

    @property
    def K(self):
        return len(self.ranked)

    @property
    def other_id(self):
        return self.K + 1

    @property
    def vocab_size(self):
        return self.K + 2

    def id_of(self, mnemonic):
        return self._ids.get(mnemonic, self.other_id)


def build_vocab(sequences, K=30):
    """Frequency-rank the K most common opcodes over all sequences.

    Ties are broken lexicographically ascending. Fewer than K distinct
    opcodes simply yields a shorter ranking.
    """
    if K < 1:
        raise ConfigError(f"K must be >= 1, got {K}")
    counts = Counter()
    for seq in sequences:
        counts.update(seq)
    if not counts:
        raise EmptySampleError("no opcodes in any input sequence")
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))[:K]
    return OpcodeVocab(ranked=ranked)


def write_vocab_file(vocab, path):
    """Lines of "rank<TAB>mnemonic<TAB>count" from rank 1 downward."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for rank, (mnemonic, count) in enumerate(vocab.ranked, start=1):
            fh.write(f"{rank}\t{mnemonic}\t{count}\n")


def load_vocab_file(path):
    ranked = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.rstrip("\n").split("\t")
            if len(parts) != 3:
                raise ConfigError(f"{path}:{lineno}: expected 3 tab-separated fields")
            try:
                rank, count = int(parts[0]), int(parts[2])
            except ValueError as exc:
                raise ConfigError(f"{path}:{lineno}: {exc}") from None
            if rank != lineno:
                raise ConfigError(f"{path}:{lineno}: rank {rank} out of order")
            ranked.append((parts[1], count))
    if not ranked:
        raise ConfigError(f"{path}: empty vocabulary file")
    return OpcodeVocab(ranked=ranked)


# ---------------------------------------------------------------------------
# encoding and datasets
# ---------------------------------------------------------------------------

def encode(seq, vocab, L=2000):
    """Map mnemonics to ids, keep the first L, post-pad with PAD=0.

    Unknown mnemonics map to OTHER. Returns an int32 array of length L.
    """
    ids = np.full(L, PAD_ID, dtype=np.int32)
    head = seq[:L]
    ids[:len(head)] = [vocab.id_of(m) for m in head]
    return ids


@dataclass
class SampleRecord:
    family: str
    ids: np.ndarray


@dataclass
class EncodedDataset:
    """Fixed-length id sequences with ordered family label space."""

    L: int
    K: int
    families: list
    records: list

    def __post_init__(self):
        self._label = {name: i for i, name in enumerate(self.families)}

    @property
    def vocab_size(self):
        return self.K + 2

    def label_of(self, family):
        return self._label[family]

    def matrix(self):
        """(X, y) with X int32 of shape (N, L) and y int64 labels."""
        X = np.stack([r.ids for r in self.records]).astype(np.int32)
        y = np.array([self._label[r.family] for r in self.records],
                     dtype=np.int64)
        return X, y

    def family_counts(self):
        counts = Counter(r.family for r in self.records)
        return {name: counts.get(name, 0) for name in self.families}

    def subset(self, families):
        """Records of the given families, relabelled in the given order."""
        keep = set(families)
        records = [r for r in self.records if r.family in keep]
        return EncodedDataset(L=self.L, K=self.K, families=list(families),
                              records=records)

    def truncate(self, new_L):
        """Keep the first new_L ids of every record (prefix truncation)."""
        if new_L > self.L:
            raise ConfigError(
                f"cannot extend records from length {self.L} to {new_L}"
            )
        records = [SampleRecord(r.family, r.ids[:new_L]) for r in self.records]
        return EncodedDataset(L=new_L, K=self.K, families=list(self.families),
                              records=records)


def encode_corpus(parsed, vocab, L=2000):
    """Encode (family, filename, mnemonics) triples into an EncodedDataset."""
    families = sorted({family for family, _, _ in parsed})
    records = [SampleRecord(family, encode(ops, vocab, L))
               for family, _, ops in parsed]
    return EncodedDataset(L=L, K=vocab.K, families=families, records=records)


DATASET_MAGIC = "opseq-data v1"


def write_dataset_file(dataset, path):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(f"{DATASET_MAGIC}\n")
        fh.write(f"L={dataset.L}\n")
        fh.write(f"K={dataset.K}\n")
        fh.write("pad_side=post\n")
        fh.write("truncate=prefix\n")
        fh.write(f"families={','.join(dataset.families)}\n")
        for record in dataset.records:
            label = dataset.label_of(record.family)
            fh.write(f"{label},{','.join(map(str, record.ids.tolist()))}\n")


def load_dataset_file(path):
    with open(path, encoding="utf-8") as fh:
        if fh.readline().rstrip("\n") != DATASET_MAGIC:
            raise ConfigError(f"{path}: not an {DATASET_MAGIC} file")
        header = {}
        for key in ("L", "K", "pad_side", "truncate", "families"):
            line = fh.readline().rstrip("\n")
            k, _, v = line.partition("=")
            if k != key:
                raise ConfigError(f"{path}: expected '{key}=', got '{line}'")
            header[k] = v
        if header["pad_side"] != "post" or header["truncate"] != "prefix":
            raise ConfigError(
                f"{path}: unsupported layout {header['pad_side']}/{header['truncate']}"
            )
        L, K = int(header["L"]), int(header["K"])
        families = header["families"].split(",")
        records = []
        for lineno, line in enumerate(fh, start=7):
            line = line.rstrip("\n")
            if not line:
                continue
            try:
                values = np.array(line.split(","), dtype=np.int32)
            except ValueError as exc:
                raise ConfigError(f"{path}:{lineno}: {exc}") from None
            label, ids = int(values[0]), values[1:]
            if not 0 <= label < len(families):
                raise ConfigError(f"{path}:{lineno}: label {label} out of range")
            if ids.shape[0] != L:
                raise ConfigError(
                    f"{path}:{lineno}: record length {ids.shape[0]} != L={L}"
                )
            if ids.min(initial=0) < 0 or ids.max(initial=0) >= K + 2:
                raise ConfigError(f"{path}:{lineno}: id outside [0, {K + 2})")
            records.append(SampleRecord(families[label], ids))
    return EncodedDataset(L=L, K=K, families=families, records=records)


# ---------------------------------------------------------------------------
# family grouping and splits
# ---------------------------------------------------------------------------

@dataclass
class FamilyGrouping:
    """Size-ordered groups of five families each."""

    groups: list

    def cumulative_sets(self):
        """Flattened family lists for group 1, groups 1-2, and so on."""
        out = []
        flat = []
        for group in self.groups:
            flat = flat + list(group)
            out.append(list(flat))
        return out


def group_families(counts):
    """Sort families by descending sample count and chunk into fives.

    Ties break lexicographically ascending. The family count must be a
    positive multiple of five.
    """
    n = len(counts)
    if n == 0 or n % 5 != 0:
        raise ConfigError(
            f"family count {n} is not a positive multiple of 5"
        )
    ordered = sorted(counts, key=lambda name: (-counts[name], name))
    groups = [ordered[i:i + 5] for i in range(0, n, 5)]
    return FamilyGrouping(groups=groups)


@dataclass
class SplitDataset:
    train: EncodedDataset
    test: EncodedDataset
    seed: int


def split(dataset, test_frac=0.15, seed=0):
    """Per-family stratified shuffle split.

    Each family contributes round(test_frac * n) test samples (half-up
    rounding). Deterministic under the seed.
    """
    if not 0.0 < test_frac < 1.0:
        raise ConfigError(f"test_frac must be in (0, 1), got {test_frac}")
    if not isinstance(dataset, EncodedDataset):
        records = list(dataset)
        families = sorted({r.family for r in records})
        L = records[0].ids.shape[0] if records else 0
        dataset = EncodedDataset(L=L, K=0, families=families, records=records)
    rng = np.random.default_rng(seed)
    by_family = {name: [] for name in dataset.families}
    for record in dataset.records:
        by_family[record.family].append(record)
    train_records, test_records = [], []
    for name in dataset.families:
        members = by_family[name]
        n = len(members)
        if n < 2:
            raise InsufficientDataError(
                f"family '{name}' has {n} sample(s); need at least 2 to split"
            )
        n_test = int(np.floor(test_frac * n + 0.5))
        order = rng.permutation(n)
        test_records.extend(members[i] for i in order[:n_test])
        train_records.extend(members[i] for i in order[n_test:])
    make = lambda recs: EncodedDataset(L=dataset.L, K=dataset.K,
                                       families=list(dataset.families),
                                       records=recs)
    return SplitDataset(train=make(train_records), test=make(test_records),
                        seed=seed)


# ---------------------------------------------------------------------------
# synthetic corpus generator
# ---------------------------------------------------------------------------

# Common x86 mnemonics; the generator draws its symbol set from the front.
MNEMONICS = [
    "mov", "push", "pop", "call", "ret", "add", "sub", "xor", "cmp", "jmp",
    "je", "jne", "test", "lea", "and", "or", "shl", "shr", "inc", "dec",
    "nop", "int", "leave", "movzx", "imul", "jz", "jnz", "jl", "jg", "jle",
    "jge", "ja", "jb", "xchg", "not", "neg", "sbb", "adc", "mul", "div",
    "rol", "ror", "sar", "cdq", "std", "cld", "stosb", "lodsb",
]

# Easy mode: probability mass a row places on its family-preferred successor.
_EASY_PEAK = 0.6
# Total mass spread over rare-tail symbols (those beyond the first 30).
_TAIL_MASS = 0.02


def transition_tv_distance(a, b):
    """Mean over rows of the total-variation distance between row distributions."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return float(np.mean(0.5 * np.abs(a - b).sum(axis=1)))


def _symbol_set(vocab_size):
    if vocab_size < 4:
        raise ConfigError(f"vocab_size must be >= 4, got {vocab_size}")
    symbols = list(MNEMONICS[:vocab_size])
    for i in range(len(symbols), vocab_size):
        symbols.append(f"op{i}")
    return symbols


def _easy_transitions(n_symbols, rng):
    """One sharply-peaked transition matrix per call.

    Symbols beyond index 29 form a rare tail whose total share stays under
    0.5% per symbol, mirroring a frequency distribution where dropped
    opcodes barely matter.
    """
    core = min(n_symbols, 30)
    tail = n_symbols - core
    tail_mass = _TAIL_MASS if tail else 0.0
    perm = rng.permutation(core)
    trans = np.zeros((n_symbols, n_symbols))
    trans[:, :core] = (1.0 - _EASY_PEAK - tail_mass) / core
    if tail:
        trans[:, core:] = tail_mass / tail
    for s in range(n_symbols):
        trans[s, perm[s % core]] += _EASY_PEAK
    return trans


def _sample_chain(trans, start_probs, length, rng):
    cumulative = np.cumsum(trans, axis=1)
    out = np.empty(length, dtype=np.int64)
    state = int(np.searchsorted(np.cumsum(start_probs), rng.random()))
    out[0] = state
    draws = rng.random(length - 1)
    for t in range(1, length):
        state = int(np.searchsorted(cumulative[state], draws[t - 1]))
        out[t] = state
    return out


def synth_corpus(families, per_family, mean_len, vocab_size=30,
                 separation="easy", seed=0):
    """Generate a labelled opcode corpus from per-family Markov chains.

    "easy" gives each family a well-separated transition matrix. "hard"
    shares one background chain across families and hides the signal in
    local motifs (drawn from a shared pool with family-specific rates) and
    family-specific marker sequences near the start and end of each
    sample. Returns (records, ground_truth) where records are
    (family_name, mnemonic list) pairs; everything is deterministic under
    the seed.
    """
    if families < 2:
        raise ConfigError(f"need at least 2 families, got {families}")
    if separation not in ("easy", "hard"):
        raise ConfigError(f"separation must be easy or hard, got '{separation}'")
    if mean_len < 20:
        raise ConfigError(f"mean_len must be >= 20, got {mean_len}")
    rng = np.random.default_rng(seed)
    symbols = _symbol_set(vocab_size)
    V = len(symbols)
    names = [f"family{i:02d}" for i in range(families)]
    core = min(V, 30)
    start_probs = np.zeros(V)
    start_probs[:core] = 1.0 / core

    truth = {"mode": separation, "seed": seed, "symbols": symbols,
             "families": names, "mean_len": mean_len}

    if separation == "easy":
        transitions = {name: _easy_transitions(V, rng) for name in names}
        truth["transitions"] = transitions
    else:
        base = rng.dirichlet(np.ones(V) * 2.0, size=V)
        transitions = {name: base for name in names}
        truth["transitions"] = transitions
        motif_pool = [tuple(rng.integers(0, core, size=4)) for _ in range(3 * families)]
        markers = {}
        motif_weights = {}
        for idx, name in enumerate(names):
            markers[name] = (
                tuple(rng.integers(0, core, size=5)),
                tuple(rng.integers(0, core, size=5)),
            )
            weights = np.full(len(motif_pool), 0.25 / (len(motif_pool) - 3))
            weights[3 * idx:3 * idx + 3] = 0.75 / 3
            motif_weights[name] = weights
        truth["motif_pool"] = motif_pool
        truth["markers"] = markers
        truth["motif_weights"] = motif_weights

    low = max(10, int(round(mean_len * 0.8)))
    high = int(round(mean_len * 1.2)) + 1
    records = []
    for name in names:
        trans = transitions[name]
        for _ in range(per_family):
            length = int(rng.integers(low, high))
            seq = _sample_chain(trans, start_probs, length, rng)
            if separation == "hard":
                n_motifs = int(rng.integers(8, 15))
                picks = rng.choice(len(truth["motif_pool"]), size=n_motifs,
                                   p=truth["motif_weights"][name])
                for pick in picks:
                    motif = truth["motif_pool"][int(pick)]
                    pos = int(rng.integers(8, length - 12))
                    seq[pos:pos + 4] = motif
                start_marker, end_marker = truth["markers"][name]
                s_off = int(rng.integers(0, 4))
                e_off = int(rng.integers(0, 4))
                seq[s_off:s_off + 5] = start_marker
                seq[length - 5 - e_off:length - e_off] = end_marker
            records.append((name, [symbols[s] for s in seq]))
    return records, truth
