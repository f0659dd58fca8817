"""Training loop, evaluation protocol, and report emission.

Models train with Adam on shuffled mini-batches, early-stopping on a
validation holdout and restoring the best-validation parameters. The
evaluation protocol retrains from scratch several times per cumulative
family group and averages test accuracy, mirroring how the classifiers
are compared at 5, 10, 15, and 20 families.
"""

import json
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import zoo
from .corpus import group_families, split
from .errors import (
    ConfigError,
    EvaluationError,
    InsufficientDataError,
    TrainingDivergedError,
)
from .ndcore import cross_entropy
from .zoo import ModelSpec, build_model


@dataclass
class TrainConfig:
    batch_size: int = 32
    max_epochs: int = 100
    learning_rate: float = 0.001
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    early_stop_patience: int = 10  # 0 disables early stopping entirely
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.max_epochs < 1:
            raise ConfigError("max_epochs must be >= 1")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        if not 0.0 <= self.adam_beta1 < 1.0 or not 0.0 <= self.adam_beta2 < 1.0:
            raise ConfigError("adam betas must be in [0, 1)")
        if self.early_stop_patience < 0:
            raise ConfigError("early_stop_patience must be >= 0")


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

def init_moments(params):
    """Zeroed first/second moment accumulators matching the parameter dict."""
    return {
        "m": {k: np.zeros_like(v) for k, v in params.items()},
        "v": {k: np.zeros_like(v) for k, v in params.items()},
    }


def adam_step(params, grads, moments, t, cfg):
    """One in-place Adam update with bias correction; t counts from 1."""
    if t < 1:
        raise ConfigError(f"Adam step counter must be >= 1, got {t}")
    b1, b2 = cfg.adam_beta1, cfg.adam_beta2
    lr, eps = cfg.learning_rate, cfg.adam_eps
    for name, p in params.items():
        g = grads[name]
        if not np.all(np.isfinite(g)):
            raise TrainingDivergedError(f"non-finite gradient in '{name}'")
        m, v = moments["m"][name], moments["v"][name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        m_hat = m / (1.0 - b1 ** t)
        v_hat = v / (1.0 - b2 ** t)
        p -= lr * m_hat / (np.sqrt(v_hat) + eps)
    return params, moments


# ---------------------------------------------------------------------------
# early stopping
# ---------------------------------------------------------------------------

class EarlyStopper:
    """Tracks the best validation loss seen and the snapshot to restore.

    observe() returns True once the loss has failed to improve for
    `patience` consecutive epochs. patience=0 never stops and never
    snapshots, leaving the final parameters in place.
    """

    def __init__(self, patience):
        self.patience = patience
        self.best_loss = np.inf
        self.best_epoch = 0
        self.bad_streak = 0
        self._snapshot = None

    def observe(self, epoch, loss, params):
        if self.patience == 0:
            return False
        if loss < self.best_loss:
            self.best_loss = loss
            self.best_epoch = epoch
            self.bad_streak = 0
            self._snapshot = {k: v.copy() for k, v in params.items()}
        else:
            self.bad_streak += 1
        return self.bad_streak >= self.patience

    def restore(self, params):
        """Copy the best-epoch snapshot back into the live parameter arrays."""
        if self._snapshot is None:
            return False
        for name, value in self._snapshot.items():
            np.copyto(params[name], value)
        return True


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

@dataclass
class EpochRow:
    epoch: int
    train_loss: float
    train_acc: float
    valid_loss: float = None
    valid_acc: float = None


@dataclass
class History:
    rows: list = field(default_factory=list)
    stopped_epoch: int = 0  # 0 means the epoch budget ran out
    best_epoch: int = 0


def _batched_eval(model, X, y, batch_size):
    total_loss, correct = 0.0, 0
    for start in range(0, len(y), batch_size):
        xb, yb = X[start:start + batch_size], y[start:start + batch_size]
        probs = model.forward(xb, mode="eval")
        total_loss += cross_entropy(probs, yb) * len(yb)
        correct += int((np.argmax(probs, axis=-1) == yb).sum())
    return total_loss / len(y), correct / len(y)


def train_model(model, data, cfg=None, valid_fraction=0.1):
    """Train in place on an EncodedDataset; returns the epoch History.

    A validation holdout of valid_fraction drives early stopping unless
    cfg.early_stop_patience is 0, in which case everything trains and the
    final-epoch parameters are kept.
    """
    cfg = cfg or TrainConfig()
    if not data.records:
        raise InsufficientDataError("cannot train on an empty dataset")
    X, y = data.matrix()
    n = len(y)
    rng = np.random.default_rng(cfg.seed)
    use_valid = cfg.early_stop_patience > 0 and valid_fraction > 0 and n >= 2
    if use_valid:
        n_valid = int(np.floor(valid_fraction * n + 0.5))
        n_valid = min(max(n_valid, 1), n - 1)
        perm = rng.permutation(n)
        valid_idx, train_idx = perm[:n_valid], perm[n_valid:]
    else:
        train_idx, valid_idx = np.arange(n), np.empty(0, dtype=np.int64)

    params = model.parameters()
    moments = init_moments(params)
    stopper = EarlyStopper(cfg.early_stop_patience)
    history = History()
    t = 0
    for epoch in range(1, cfg.max_epochs + 1):
        order = train_idx[rng.permutation(len(train_idx))]
        total_loss, correct = 0.0, 0
        for bidx, start in enumerate(range(0, len(order), cfg.batch_size)):
            batch = order[start:start + cfg.batch_size]
            loss, probs, grads = zoo.loss_and_grads(model, X[batch], y[batch],
                                                    mode="train", rng=rng)
            if not np.isfinite(loss):
                raise TrainingDivergedError(
                    f"non-finite training loss at epoch {epoch}, batch {bidx}"
                )
            t += 1
            try:
                adam_step(params, grads, moments, t, cfg)
            except TrainingDivergedError as exc:
                raise TrainingDivergedError(
                    f"{exc} at epoch {epoch}, batch {bidx}"
                ) from None
            total_loss += loss * len(batch)
            correct += int((np.argmax(probs, axis=-1) == y[batch]).sum())
        row = EpochRow(epoch=epoch,
                       train_loss=total_loss / len(order),
                       train_acc=correct / len(order))
        if use_valid:
            row.valid_loss, row.valid_acc = _batched_eval(
                model, X[valid_idx], y[valid_idx], cfg.batch_size)
            history.rows.append(row)
            if stopper.observe(epoch, row.valid_loss, params):
                history.stopped_epoch = epoch
                break
        else:
            history.rows.append(row)
    if use_valid:
        stopper.restore(params)
        history.best_epoch = stopper.best_epoch
    elif history.rows:
        history.best_epoch = history.rows[-1].epoch
    return history


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

@dataclass
class ConfusionMatrix:
    """Rows are true families, columns predicted; entries are counts."""

    families: list
    counts: np.ndarray

    @property
    def accuracy(self):
        total = int(self.counts.sum())
        if total == 0:
            raise EvaluationError("confusion matrix is empty")
        return float(np.trace(self.counts)) / total

    def row_percentages(self):
        """Row-normalized percentages; all-zero rows stay zero."""
        sums = self.counts.sum(axis=1, keepdims=True)
        return 100.0 * self.counts / np.maximum(sums, 1)


def evaluate(model, data, batch_size=64):
    """Accuracy and confusion matrix on an EncodedDataset (eval mode)."""
    if not data.records:
        raise EvaluationError("cannot evaluate on an empty dataset")
    X, y = data.matrix()
    n_fam = len(data.families)
    counts = np.zeros((n_fam, n_fam), dtype=np.int64)
    for start in range(0, len(y), batch_size):
        probs = model.forward(X[start:start + batch_size], mode="eval")
        preds = np.argmax(probs, axis=-1)  # ties go to the lowest index
        for true, pred in zip(y[start:start + batch_size], preds):
            counts[true, pred] += 1
    conf = ConfusionMatrix(families=list(data.families), counts=counts)
    return conf.accuracy, conf


# ---------------------------------------------------------------------------
# evaluation protocol
# ---------------------------------------------------------------------------

@dataclass
class RunReport:
    """Aggregate of the repeated runs for one cumulative family set."""

    arch_id: str
    families: list
    accuracies: list
    mean_accuracy: float
    confusions: list
    seeds: list
    config: dict

    @property
    def num_classes(self):
        return len(self.families)


def _protocol_run(args):
    arch_id, sub, run_seed, cfg, overrides = args
    parts = split(sub, test_frac=0.15, seed=run_seed)
    spec_kwargs = dict(arch_id=arch_id, num_classes=len(sub.families),
                       vocab_size=sub.vocab_size, seq_len=sub.L)
    spec_kwargs.update(overrides or {})
    model = build_model(ModelSpec(**spec_kwargs), np.random.default_rng(run_seed))
    train_model(model, parts.train, replace(cfg, seed=run_seed))
    acc, conf = evaluate(model, parts.test)
    return acc, conf


def run_protocol(arch_id, dataset, grouping=None, runs=5, cfg=None,
                 spec_overrides=None, jobs=1):
    """Train/evaluate `runs` times per cumulative family group.

    Group g's run r uses seed cfg.seed + r for its split, its weight init,
    and its epoch shuffles, so every run retrains from scratch on a fresh
    split. Returns one RunReport per cumulative set, in group order.
    """
    cfg = cfg or TrainConfig()
    if runs < 1:
        raise ConfigError("runs must be >= 1")
    if grouping is None:
        grouping = group_families(dataset.family_counts())
    sets = grouping.cumulative_sets()
    tasks = []
    for fams in sets:
        sub = dataset.subset(fams)
        for r in range(runs):
            tasks.append((arch_id, sub, cfg.seed + r, cfg, spec_overrides))
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            outcomes = list(pool.map(_protocol_run, tasks))
    else:
        outcomes = [_protocol_run(task) for task in tasks]
    reports = []
    for set_idx, fams in enumerate(sets):
        chunk = outcomes[set_idx * runs:(set_idx + 1) * runs]
        accs = [acc for acc, _ in chunk]
        reports.append(RunReport(
            arch_id=arch_id,
            families=list(fams),
            accuracies=accs,
            mean_accuracy=float(sum(accs) / len(accs)),
            confusions=[conf for _, conf in chunk],
            seeds=[cfg.seed + r for r in range(runs)],
            config=asdict(cfg),
        ))
    return reports


# ---------------------------------------------------------------------------
# grid search
# ---------------------------------------------------------------------------

@dataclass
class GridSpace:
    """Hyperparameter grid; defaults span the tested ranges (500 combos)."""

    opcode_lengths: list = field(
        default_factory=lambda: [2000, 4000, 6000, 8000, 10000])
    lstm_units: list = field(default_factory=lambda: [16, 32, 64, 128, 256])
    embed_dims: list = field(default_factory=lambda: [16, 32, 64, 128, 256])
    dropout_rates: list = field(default_factory=lambda: [0.1, 0.2, 0.3, 0.4])

    def __post_init__(self):
        for name in ("opcode_lengths", "lstm_units", "embed_dims",
                     "dropout_rates"):
            if not getattr(self, name):
                raise ConfigError(f"grid axis '{name}' is empty")

    def combinations(self):
        """Every grid point as a dict, in fixed nested-loop order."""
        out = []
        for L in self.opcode_lengths:
            for units in self.lstm_units:
                for dim in self.embed_dims:
                    for rate in self.dropout_rates:
                        out.append({"opcode_length": L, "lstm_units": units,
                                    "embed_dim": dim, "dropout_rate": rate})
        return out


def _train_eval_point(arch_id, dataset, point, cfg):
    if point["opcode_length"] > dataset.L:
        raise ConfigError(
            f"grid opcode_length {point['opcode_length']} exceeds dataset "
            f"length {dataset.L}"
        )
    data = dataset.truncate(point["opcode_length"])
    parts = split(data, test_frac=0.15, seed=cfg.seed)
    spec = ModelSpec(arch_id=arch_id, num_classes=len(data.families),
                     vocab_size=data.vocab_size,
                     seq_len=point["opcode_length"],
                     embed_dim=point["embed_dim"],
                     lstm_units=point["lstm_units"],
                     dropout_rate=point["dropout_rate"])
    model = build_model(spec, np.random.default_rng(cfg.seed))
    start = time.perf_counter()
    train_model(model, parts.train, cfg)
    seconds = time.perf_counter() - start
    acc, _ = evaluate(model, parts.test)
    return 100.0 * acc, seconds


def grid_search(arch_id, dataset, space=None, cfg=None, tolerance=0.5,
                evaluator=None):
    """Exhaustive sweep; returns (best, results).

    Each result row records the grid point plus accuracy (percent) and
    training seconds. Among rows within `tolerance` accuracy points of the
    maximum, the fastest-training one wins; remaining ties keep the
    earliest grid point. A custom evaluator(point) -> (accuracy_percent,
    seconds) replaces actual training, e.g. for dry runs.
    """
    cfg = cfg or TrainConfig()
    space = space or GridSpace()
    if evaluator is None:
        evaluator = lambda point: _train_eval_point(arch_id, dataset, point, cfg)
    results = []
    for point in space.combinations():
        acc, seconds = evaluator(point)
        results.append(dict(point, accuracy=float(acc),
                            train_seconds=float(seconds)))
    best_acc = max(r["accuracy"] for r in results)
    band = [r for r in results if r["accuracy"] >= best_acc - tolerance]
    best = min(band, key=lambda r: r["train_seconds"])
    return best, results


# ---------------------------------------------------------------------------
# report writers
# ---------------------------------------------------------------------------

def write_history_csv(history, path):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("epoch,train_loss,train_acc,valid_loss,valid_acc\n")
        for row in history.rows:
            if row.valid_loss is None:
                tail = ","
            else:
                tail = f"{row.valid_loss:.6f},{row.valid_acc:.6f}"
            fh.write(f"{row.epoch},{row.train_loss:.6f},"
                     f"{row.train_acc:.6f},{tail}\n")


def write_confusion_csv(conf, path):
    """Row-normalized percentages with two decimals."""
    pct = conf.row_percentages()
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("family," + ",".join(conf.families) + "\n")
        for name, row in zip(conf.families, pct):
            fh.write(name + "," + ",".join(f"{v:.2f}" for v in row) + "\n")


def _pct(x):
    return f"{100.0 * x:.2f}"


def write_summary_csv(reports_by_arch, path):
    """One row per (arch, family count, run): arch,families,run,accuracy,mean."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("arch,families,run,accuracy,mean\n")
        for arch_id, reports in reports_by_arch.items():
            for report in reports:
                for run_idx, acc in enumerate(report.accuracies, start=1):
                    fh.write(f"{arch_id},{report.num_classes},{run_idx},"
                             f"{_pct(acc)},{_pct(report.mean_accuracy)}\n")


def write_bar_chart_csv(reports_by_arch, path):
    """Mean accuracy per (arch, family count), formatted like the summary."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("arch,families,mean_accuracy\n")
        for arch_id, reports in reports_by_arch.items():
            for report in reports:
                fh.write(f"{arch_id},{report.num_classes},"
                         f"{_pct(report.mean_accuracy)}\n")


def write_report_json(report, path):
    payload = {
        "arch_id": report.arch_id,
        "families": report.families,
        "num_classes": report.num_classes,
        "seeds": report.seeds,
        "accuracies": report.accuracies,
        "mean_accuracy": report.mean_accuracy,
        "config": report.config,
        "confusions": [c.counts.tolist() for c in report.confusions],
    }
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(payload, fh, indent=2)
        fh.write("\n")


def write_grid_csv(results, best, path):
    cols = ("opcode_length", "lstm_units", "embed_dim", "dropout_rate")
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(",".join(cols) + ",accuracy,train_seconds,selected\n")
        for row in results:
            selected = "1" if row is best else "0"
            fh.write(",".join(str(row[c]) for c in cols) +
                     f",{row['accuracy']:.2f},{row['train_seconds']:.3f},"
                     f"{selected}\n")
