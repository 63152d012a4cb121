"""Federated knowledge distillation: teachers train privately, share tempered
soft labels on a public set, and a student learns from their average."""
from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .comms import CommLedger, EncodingModel, record_fkd_round
from .datasets import ExperimentData, LabeledDataset
from .errors import ConfigError, DomainError, FkdError, NumericError, ShapeError
from .nn.losses import PROB_CLAMP, LossSpec, combine, loss_terms, softmax_with_temperature
from .nn.model import ModelState, init_model, predict_logits
from .nn.spec import ModelSpec
from .nn.train import OptimizerConfig, loss_and_grads, sgd_update
from .partition import Partition

log = logging.getLogger(__name__)

# Stream tags for seed derivation; every random draw is keyed by
# (seed, tag, ...) so teacher order and thread count never matter.
_TEACHER_INIT, _TEACHER_FIT, _STUDENT_INIT, _STUDENT_FIT = 10, 11, 12, 13


@dataclass
class SoftLabelBatch:
    probabilities: np.ndarray
    temperature: float
    source: str

    def __post_init__(self):
        p = np.asarray(self.probabilities, dtype=np.float64)
        if p.ndim != 2:
            raise ShapeError(f"soft labels must be a matrix, got shape {p.shape}")
        if np.any(p < 0) or np.any(p > 1) or np.any(np.abs(p.sum(axis=1) - 1.0) > 1e-9):
            raise DomainError("soft-label rows must be probability vectors")
        self.probabilities = p

    @property
    def shape(self):
        return self.probabilities.shape


@dataclass
class DistillConfig:
    teacher_spec: ModelSpec
    student_spec: ModelSpec
    num_teachers: int = 2
    rounds: int = 10
    local_epochs: int = 5
    student_epochs: int | None = None
    temperature: float = 10.0
    alpha: float = 0.1
    num_classes: int = 3
    teacher_optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    student_optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    seed: int = 0
    t_squared: bool = False
    double_softmax: bool = False
    reset_teachers: bool = False
    encoding: EncodingModel = field(default_factory=EncodingModel)

    def __post_init__(self):
        if self.num_teachers < 1 or self.rounds < 1 or self.local_epochs < 0:
            raise ConfigError("num_teachers and rounds must be >= 1, local_epochs >= 0")
        if not self.temperature > 0:
            raise ConfigError(f"temperature must be positive, got {self.temperature}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.student_epochs is None:
            self.student_epochs = self.local_epochs

    def distill_loss_spec(self) -> LossSpec:
        return LossSpec("combined", self.alpha, self.temperature, self.t_squared, self.double_softmax)


@dataclass
class RoundMetrics:
    round: int
    local_losses: list[float]
    test_accuracy: float
    test_loss: float
    upload_bytes: int
    download_bytes: int
    student_total_loss: float | None = None
    student_loss: float | None = None
    distill_loss: float | None = None


@dataclass
class ExperimentReport:
    protocol: str
    rounds: list[RoundMetrics]
    ledger: CommLedger
    final_model: ModelState
    config: dict = field(default_factory=dict)


def fit(model: ModelState, images, labels, soft_targets, epochs: int, loss: LossSpec,
        optimizer: OptimizerConfig, seed, num_classes: int):
    """Minibatch training over seeded per-epoch shuffles.

    Returns per-epoch sample-weighted means of ``(total, ce, kl)`` as seen by
    each batch before its step.
    """
    n = len(labels)
    if n == 0:
        raise DomainError("cannot train on an empty dataset")
    rng = np.random.default_rng(seed)
    bs = optimizer.batch_size
    trace = []
    for _ in range(epochs):
        order = rng.permutation(n)
        sums = np.zeros(3)
        for start in range(0, n, bs):
            idx = order[start : start + bs]
            soft = None if soft_targets is None else soft_targets[idx]
            sums += np.array(_step(model, images[idx], labels[idx], soft, loss, optimizer, num_classes)) * len(idx)
        trace.append(tuple(float(v) for v in sums / n))
    return trace


def _step(model, x, y, soft, loss, optimizer, num_classes):
    # Same as nn.train.train_step, but keeps the (ce, kl) parts for traces.
    model.train()
    value, grads, (ce, kl) = loss_and_grads(model, x, y, soft, loss, num_classes, update_stats=True)
    sgd_update(model, grads, optimizer)
    return value, ce, kl


def train_teacher(state: ModelState, data: LabeledDataset, epochs: int, optimizer: OptimizerConfig,
                  seed, num_classes: int | None = None, teacher_id: str = "teacher"):
    """Cross-entropy training on a teacher's private data.

    Returns ``(state, per-epoch mean losses)``; ``state`` is updated in place.
    """
    if len(data) == 0:
        raise DomainError(f"{teacher_id}: no private data")
    k = data.num_classes if num_classes is None else num_classes
    try:
        trace = fit(state, data.images, data.labels, None, epochs, LossSpec("cross_entropy"), optimizer, seed, k)
    except NumericError as exc:
        raise NumericError(f"{teacher_id}: {exc}") from exc
    return state, [t[0] for t in trace]


def generate_soft_labels(teacher: ModelState, public_inputs, temperature: float,
                         num_classes: int | None = None, source: str = "teacher") -> SoftLabelBatch:
    logits = predict_logits(teacher, public_inputs)
    if num_classes is not None:
        logits = logits[:, :num_classes]
    if not np.all(np.isfinite(logits)):
        raise NumericError(f"{source}: non-finite logits")
    return SoftLabelBatch(softmax_with_temperature(logits, temperature), temperature, source)


def aggregate_soft_labels(batches: list[SoftLabelBatch]) -> SoftLabelBatch:
    """Elementwise mean. Values are summed in sorted order so the result is
    bit-identical under any teacher ordering."""
    if not batches:
        raise DomainError("need at least one soft-label batch")
    shape, temp = batches[0].shape, batches[0].temperature
    for b in batches[1:]:
        if b.shape != shape:
            raise ShapeError(f"soft-label shapes differ: {b.shape} vs {shape}")
        if b.temperature != temp:
            raise ConfigError(f"mixed temperatures: {b.temperature} vs {temp}")
    if len(batches) == 1:
        return SoftLabelBatch(batches[0].probabilities.copy(), temp, "aggregate")
    stacked = np.sort(np.stack([b.probabilities for b in batches]), axis=0)
    mean = stacked.sum(axis=0) / len(batches)
    return SoftLabelBatch(np.clip(mean, 0.0, 1.0), temp, "aggregate")


def student_losses(student: ModelState, public_set: LabeledDataset, p_agg: SoftLabelBatch,
                   alpha: float, temperature: float, num_classes: int | None = None,
                   t_squared: bool = False, double_softmax: bool = False):
    """Eval-mode ``(total, student_loss, distill_loss)`` on the public set."""
    if p_agg.shape[0] != len(public_set):
        raise ShapeError(f"{p_agg.shape[0]} soft-label rows for {len(public_set)} public samples")
    k = p_agg.shape[1] if num_classes is None else num_classes
    logits = predict_logits(student, public_set.images)
    spec = LossSpec("combined", alpha, temperature, t_squared, double_softmax)
    _, _, (ce, kl) = loss_terms(logits, public_set.labels, p_agg.probabilities, spec, k)
    return combine(ce, kl, alpha), ce, kl


def train_student(student: ModelState, public_set: LabeledDataset, p_agg: SoftLabelBatch,
                  cfg: DistillConfig, seed=None):
    """Combined-loss training; returns ``(student, [(total, student, distill), ...])``."""
    if p_agg.shape[0] != len(public_set):
        raise ShapeError(f"{p_agg.shape[0]} soft-label rows for {len(public_set)} public samples")
    seed = cfg.seed if seed is None else seed
    trace = fit(student, public_set.images, public_set.labels, p_agg.probabilities, cfg.student_epochs,
                cfg.distill_loss_spec(), cfg.student_optimizer, seed, cfg.num_classes)
    return student, trace


def evaluate(model: ModelState, test_set: LabeledDataset, num_classes: int | None = None):
    """``(accuracy, mean CE)``; ties in argmax go to the lowest class index."""
    if len(test_set) == 0:
        raise DomainError("cannot evaluate on an empty test set")
    k = test_set.num_classes if num_classes is None else num_classes
    logits = predict_logits(model, test_set.images)
    if logits.shape[1] < k:
        raise ShapeError(f"model has {logits.shape[1]} outputs for {k} classes")
    logits = logits[:, :k]
    acc = float(np.mean(logits.argmax(axis=1) == test_set.labels))
    probs = softmax_with_temperature(logits, 1.0)
    loss = float(-np.log(np.maximum(probs[np.arange(len(probs)), test_set.labels], PROB_CLAMP)).mean())
    return acc, loss


def parallel_map(fn, items, threads: int):
    """Ordered map; results are independent of ``threads``."""
    if threads <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def run_fkd_experiment(cfg: DistillConfig, data: ExperimentData, partition: Partition,
                       threads: int = 1) -> ExperimentReport:
    if partition.num_clients != cfg.num_teachers:
        raise ConfigError(f"partition has {partition.num_clients} clients, config wants {cfg.num_teachers} teachers")
    k = cfg.num_classes
    pool, public = data.private_pool, data.public_set
    shards = [pool.subset(idx) for idx in partition.assignments]
    teachers = [init_model(cfg.teacher_spec, seed=[cfg.seed, _TEACHER_INIT, t]) for t in range(cfg.num_teachers)]
    student = init_model(cfg.student_spec, seed=[cfg.seed, _STUDENT_INIT])
    ledger = CommLedger()
    history = []

    for rnd in range(1, cfg.rounds + 1):
        def local_round(t):
            if cfg.reset_teachers:
                teachers[t] = init_model(cfg.teacher_spec, seed=[cfg.seed, _TEACHER_INIT, t, rnd])
            try:
                _, losses = train_teacher(teachers[t], shards[t], cfg.local_epochs, cfg.teacher_optimizer,
                                          [cfg.seed, _TEACHER_FIT, t, rnd], k, f"teacher{t}")
                soft = generate_soft_labels(teachers[t], public.images, cfg.temperature, k, f"teacher{t}")
            except FkdError as exc:
                raise type(exc)(f"round {rnd}, teacher{t}: {exc}") from exc
            return (losses[-1] if losses else math.nan), soft

        results = parallel_map(local_round, list(range(cfg.num_teachers)), threads)
        p_agg = aggregate_soft_labels([soft for _, soft in results])
        record_fkd_round(ledger, rnd, cfg.num_teachers, len(public), k, cfg.encoding)

        train_student(student, public, p_agg, cfg, seed=[cfg.seed, _STUDENT_FIT, rnd])
        total, ce, kl = student_losses(student, public, p_agg, cfg.alpha, cfg.temperature, k,
                                       cfg.t_squared, cfg.double_softmax)
        acc, test_loss = evaluate(student, data.test_set, k)
        up = sum(e.bytes for e in ledger.entries if e.round == rnd and e.direction == "upload")
        down = sum(e.bytes for e in ledger.entries if e.round == rnd and e.direction == "download")
        history.append(RoundMetrics(rnd, [float(l) for l, _ in results], acc, test_loss, up, down, total, ce, kl))
        log.info("fkd round %d: student acc %.4f total loss %.4f", rnd, acc, total)

    return ExperimentReport("fkd", history, ledger, student)
