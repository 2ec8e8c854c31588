"""Training loop, learning-rate schedule, evaluation and stream ablations."""

from __future__ import annotations

import ctypes
import json
import logging
import math
import os
import time
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from . import tensor as T
from .accounting import count_costs
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .features import batch_stream_inputs
from .model import InteractionModel, ModelConfig
from .nn import BatchNorm, Parameter
from .skeleton import Corpus, synthetic_corpus

log = logging.getLogger(__name__)


class TrainingDivergence(RuntimeError):
    """Non-finite loss or gradients; the message carries the diagnostics."""


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 50
    warmup_epochs: int = 10
    peak_lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 1e-4
    batch_size: int = 32
    seed: int = 0
    # stop once both running train accuracy and held-out accuracy reach these
    stop_train_accuracy: float | None = None
    stop_test_accuracy: float | None = None
    # training clips used to re-estimate batch-norm statistics after each epoch (0: keep the running averages)
    bn_calibration_clips: int = 128
    # synthetic corpus used when no preprocessed file is given
    catalog: str = "motion"
    classes: int = 4
    clips_per_class: int = 100
    test_fraction: float = 0.2
    data_seed: int = 0

    def __post_init__(self):
        if self.epochs < 1 or not 0 <= self.warmup_epochs < self.epochs:
            raise ValueError("need epochs >= 1 and 0 <= warmup_epochs < epochs")
        if self.peak_lr <= 0 or self.momentum < 0 or self.weight_decay < 0 or self.batch_size < 1:
            raise ValueError("hyperparameters must be positive")
        if not 0 < self.test_fraction < 1:
            raise ValueError("test_fraction must be in (0, 1)")
        if self.bn_calibration_clips < 0:
            raise ValueError("bn_calibration_clips must be non-negative")


def lr_at(epoch: float, config: TrainConfig = TrainConfig()) -> float:
    """Linear warmup from 0 to the peak, then a single cosine decay to 0.

    Fractional epochs interpolate the same curve; the trainer evaluates it once
    per step at ``epoch + step / steps_per_epoch``.
    """
    if not 0 <= epoch < config.epochs:
        raise ValueError(f"epoch {epoch} outside [0, {config.epochs})")
    w = config.warmup_epochs
    if epoch < w:
        return epoch / w * config.peak_lr
    return config.peak_lr * 0.5 * (1.0 + math.cos(math.pi * (epoch - w) / (config.epochs - w)))


class SGD:
    """SGD with Nesterov momentum; L2 decay on parameters flagged ``decay``."""

    def __init__(self, params, momentum: float = 0.9, weight_decay: float = 1e-4):
        self.params = list(params)
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.buffers: list[np.ndarray | None] = [None] * len(self.params)

    def step(self, lr: float) -> None:
        mu = self.momentum
        for i, p in enumerate(self.params):
            if p.grad is None:
                continue
            d = p.grad + self.weight_decay * p.data if p.decay and self.weight_decay else p.grad
            buf = self.buffers[i]
            buf = d.copy() if buf is None else mu * buf + d
            self.buffers[i] = buf
            p.data = p.data - lr * (d + mu * buf)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


def configure_allocator() -> None:
    """Keep freed large blocks in the heap (glibc) so big activations do not
    page-fault on every allocation."""
    try:
        libc = ctypes.CDLL("libc.so.6")
        libc.mallopt(-4, 0)  # M_MMAP_MAX
        libc.mallopt(-1, 1 << 30)  # M_TRIM_THRESHOLD
        libc.mallopt(-2, 64 << 20)  # M_TOP_PAD
    except (OSError, AttributeError):
        pass


# diagnostics


def _first_nonfinite(root: T.Value, model) -> str:
    """The earliest computed node with a non-finite output, named by the layer owning its parameters."""
    owners = {id(p): name.rsplit(".", 1)[0] for name, p in model.named_parameters()}
    for node in T._topo_order(root):
        if node._backward is None or np.all(np.isfinite(node.data)):
            continue
        layers = sorted({owners[id(p)] for p in node._parents if id(p) in owners})
        where = f" in layer {', '.join(layers)}" if layers else ""
        return f"op {node.op!r}{where} output {node.shape}"
    return "none found"


def _nonfinite_params(model) -> list[str]:
    bad = []
    for name, p in model.named_parameters():
        if not np.all(np.isfinite(p.data)) or (p.grad is not None and not np.all(np.isfinite(p.grad))):
            bad.append(name)
    return bad


def train_step(model: InteractionModel, opt: SGD, inputs: dict, labels: np.ndarray, lr: float, where: str = "") -> tuple[float, np.ndarray]:
    """One update; returns (mean per-stream cross-entropy, fused probabilities).

    Each stream is optimized on its own cross-entropy. The streams share no
    parameters, so they are run forward and backward one at a time.
    """
    model.train()
    opt.zero_grad()
    losses, probs = [], []
    for s in model.stream_names:
        logits = model.stream(s)(inputs[s])
        loss = T.cross_entropy(logits, labels)
        if not np.isfinite(loss.item()):
            raise TrainingDivergence(
                f"non-finite loss {where} stream {s}: first non-finite at {_first_nonfinite(logits, model)}; "
                f"non-finite parameters: {_nonfinite_params(model)[:5]}"
            )
        T.backward(loss)
        losses.append(loss.item())
        probs.append(T.softmax(logits.detach(), axis=-1).data)
        del logits, loss
    bad = _nonfinite_params(model)
    if bad:
        raise TrainingDivergence(f"non-finite gradients {where}: first in {bad[0]} ({len(bad)} tensors)")
    opt.step(lr)
    return float(np.mean(losses)), np.mean(probs, axis=0)


@dataclass
class EvalResult:
    accuracy: float
    confusion: np.ndarray
    probabilities: np.ndarray

    @property
    def predictions(self) -> np.ndarray:
        return self.probabilities.argmax(axis=1)


def evaluate(corpus: Corpus, model: InteractionModel, batch_size: int = 32, streams=None) -> EvalResult:
    """Top-1 accuracy of the fused scores, in inference mode."""
    if len(corpus) == 0:
        raise ValueError("empty corpus")
    streams = model._select(streams)
    was = model.training
    model.eval()
    try:
        probs = []
        for i in range(0, len(corpus), batch_size):
            x = batch_stream_inputs(corpus.coords[i : i + batch_size], streams, dtype=_dtype(model))
            probs.append(model.probabilities(x, streams))
    finally:
        model.train(was)
    probs = np.concatenate(probs)
    k = model.config.num_classes
    pred = probs.argmax(axis=1)
    confusion = np.zeros((k, k), dtype=np.int64)
    np.add.at(confusion, (corpus.labels, pred), 1)
    return EvalResult(float(np.mean(pred == corpus.labels)), confusion, probs)


def calibrate_batch_norm(model: InteractionModel, coords: np.ndarray, batch_size: int = 32) -> None:
    """Replace every batch-norm running average by the cumulative mean of batch
    statistics over ``coords``, computed with the current weights.

    Over short schedules the exponential averages trail the weights by several
    steps, which can cost more held-out accuracy than the training itself buys.
    """
    norms = [m for _, m in model.named_modules() if isinstance(m, BatchNorm)]
    saved = [m.momentum for m in norms]
    for m in norms:
        m.running_mean[:] = 0.0
        m.running_var[:] = 1.0
    was = model.training
    model.train()
    try:
        with T.no_grad():
            for k, i in enumerate(range(0, len(coords), batch_size)):
                for m in norms:
                    m.momentum = k / (k + 1)
                model(batch_stream_inputs(coords[i : i + batch_size], model.stream_names, dtype=_dtype(model)))
    finally:
        for m, mom in zip(norms, saved):
            m.momentum = mom
        model.train(was)


def _dtype(model) -> np.dtype:
    return model.parameters()[0].dtype


def split_corpus(corpus: Corpus, test_fraction: float = 0.2, seed: int = 0) -> tuple[Corpus, Corpus]:
    """Per-class random split."""
    rng = np.random.default_rng(seed)
    train_idx, test_idx = [], []
    for c in np.unique(corpus.labels):
        idx = rng.permutation(np.flatnonzero(corpus.labels == c))
        k = int(round(len(idx) * test_fraction))
        test_idx.extend(idx[:k])
        train_idx.extend(idx[k:])
    return corpus.subset(np.sort(train_idx)), corpus.subset(np.sort(test_idx))


def load_data(config: TrainConfig, path: str | None = None) -> tuple[Corpus, Corpus]:
    from .skeleton import read_corpus

    corpus = read_corpus(path) if path else synthetic_corpus(config.classes, config.clips_per_class, config.data_seed, config.catalog)
    return split_corpus(corpus, config.test_fraction, config.data_seed)


@dataclass
class EpochMetrics:
    epoch: int
    lr: float
    loss: float
    train_accuracy: float
    test_accuracy: float | None
    seconds: float


@dataclass
class TrainResult:
    model: InteractionModel
    history: list[EpochMetrics] = field(default_factory=list)
    train_eval: EvalResult | None = None
    test_eval: EvalResult | None = None
    stopped_early: bool = False

    @property
    def first_loss(self) -> float:
        return self.history[0].loss


def train(
    model_config: ModelConfig,
    config: TrainConfig,
    train_data: Corpus,
    test_data: Corpus | None = None,
    dtype=np.float32,
    on_epoch=None,
    final_train_eval: bool = True,
) -> TrainResult:
    """Train from a fresh, seeded initialization. All randomness derives from ``config.seed``."""
    configure_allocator()
    if train_data.labels.max() >= model_config.num_classes:
        raise ValueError("labels exceed the model's class count")
    model = InteractionModel(model_config, seed=config.seed, dtype=dtype)
    opt = SGD(model.parameters(), config.momentum, config.weight_decay)
    rng = np.random.default_rng([config.seed, 1])
    n = len(train_data)
    steps = max(1, math.ceil(n / config.batch_size))
    result = TrainResult(model)
    calib = np.sort(np.random.default_rng([config.seed, 2]).permutation(n)[: config.bn_calibration_clips])
    for epoch in range(config.epochs):
        t0 = time.perf_counter()
        order = rng.permutation(n)
        total, correct = 0.0, 0
        for b in range(steps):
            idx = order[b * config.batch_size : (b + 1) * config.batch_size]
            lr = lr_at(epoch + b / steps, config)
            x = batch_stream_inputs(train_data.coords[idx], model.stream_names, dtype=dtype)
            y = train_data.labels[idx]
            loss, probs = train_step(model, opt, x, y, lr, where=f"at epoch {epoch} batch {b}")
            total += loss * len(idx)
            correct += int(np.sum(probs.argmax(axis=1) == y))
        if len(calib):
            calibrate_batch_norm(model, train_data.coords[calib], config.batch_size)
        test_acc = evaluate(test_data, model).accuracy if test_data is not None and len(test_data) else None
        m = EpochMetrics(epoch, lr_at(epoch, config), total / n, correct / n, test_acc, time.perf_counter() - t0)
        result.history.append(m)
        if on_epoch:
            on_epoch(m)
        if (
            config.stop_train_accuracy is not None
            and m.train_accuracy >= config.stop_train_accuracy
            and (config.stop_test_accuracy is None or (test_acc is not None and test_acc >= config.stop_test_accuracy))
        ):
            result.stopped_early = epoch + 1 < config.epochs
            break
    if final_train_eval:
        result.train_eval = evaluate(train_data, model)
    if test_data is not None and len(test_data):
        result.test_eval = evaluate(test_data, model)
    return result


# checkpoints

_CONFIG_KEY = "__model_config__"


def save_model(path, model: InteractionModel) -> None:
    records = {f"param.{k}": v for k, v in model.state_dict().items()}
    records[_CONFIG_KEY] = np.frombuffer(json.dumps(model.config.to_dict(), sort_keys=True).encode(), dtype=np.uint8)
    save_checkpoint(path, records)


def load_model(path) -> InteractionModel:
    records = load_checkpoint(path)
    if _CONFIG_KEY not in records:
        raise CheckpointError("checkpoint lacks a model configuration")
    config = ModelConfig.from_dict(json.loads(records.pop(_CONFIG_KEY).tobytes().decode()))
    state = {k[len("param.") :]: v for k, v in records.items() if k.startswith("param.")}
    dtype = next(iter(state.values())).dtype if state else np.float64
    model = InteractionModel(config, dtype=dtype)
    model.load_state_dict(state)
    model.eval()
    return model


# ablations


@dataclass
class AblationReport:
    streams: tuple[str, ...]
    params: int
    flops: int
    accuracy: float | None = None

    def row(self) -> str:
        label = "+".join(f"({s})" for s in self.streams)
        acc = "-" if self.accuracy is None else f"{100 * self.accuracy:.1f}"
        return f"{label:<16}{self.params / 1e6:>10.2f} M{self.flops / 1e9:>10.2f} G{acc:>10}"

    @staticmethod
    def header() -> str:
        return f"{'streams':<16}{'params':>12}{'FLOPs':>12}{'acc (%)':>10}"


def run_ablation(
    streams,
    model_config: ModelConfig,
    train_config: TrainConfig | None = None,
    train_data: Corpus | None = None,
    test_data: Corpus | None = None,
) -> AblationReport:
    """Build (and, given data, train and test) only the chosen streams."""
    streams = tuple(sorted(set(streams)))
    if not streams:
        raise ValueError("at least one stream is required")
    cfg = model_config.with_streams(streams)
    report = count_costs(InteractionModel(cfg))
    out = AblationReport(streams, report.total_params, report.total_flops)
    if train_data is not None:
        res = train(cfg, train_config or TrainConfig(), train_data, test_data, final_train_eval=False)
        out.accuracy = res.test_eval.accuracy if res.test_eval is not None else None
    return out


# configuration files


def load_config(path) -> tuple[ModelConfig, TrainConfig]:
    """Read a TOML file with optional ``[model]`` and ``[train]`` tables."""
    with open(path, "rb") as fh:
        raw = tomllib.load(fh)
    unknown = set(raw) - {"model", "train"}
    if unknown:
        raise ValueError(f"unknown config sections: {sorted(unknown)}")
    train_raw = raw.get("train", {})
    bad = set(train_raw) - {f.name for f in fields(TrainConfig)}
    if bad:
        raise ValueError(f"unknown train config keys: {sorted(bad)}")
    return ModelConfig.from_dict(raw.get("model", {})), TrainConfig(**train_raw)


def metrics_line(m: EpochMetrics) -> str:
    test = "-" if m.test_accuracy is None else f"{m.test_accuracy:.4f}"
    return f"epoch {m.epoch:3d} lr {m.lr:.5f} loss {m.loss:.5f} train_acc {m.train_accuracy:.4f} test_acc {test} time {m.seconds:.1f}s"


def metrics_record(m: EpochMetrics) -> str:
    return json.dumps(asdict(m), sort_keys=True)
