"""Teacher pre-training, distillation-driven QAT, evaluation and cost accounting."""
from __future__ import annotations

import csv
import io
import itertools
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .config import ABLATION_AXES, apply_axis
from .data import Dataset, augment, batches
from .distill import LossConfig, ce_loss, ensemble_logits, total_loss
from .models import Model, ModelConfig, build_model, clone_weights, forward, save_checkpoint
from .quantizers import GradientEstimator
from .tensor import Tape, backward

logger = logging.getLogger(__name__)

METRICS_HEADER = ("epoch", "train_loss", "top1", "top5", "seconds")
EVAL_CHUNK = 1024


class TrainingError(ValueError):
    pass


@dataclass(frozen=True)
class OptimizerConfig:
    name: str = "sgd"
    lr: float = 0.05
    momentum: float = 0.0
    weight_decay: float = 0.0
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8


@dataclass(frozen=True)
class LRSchedule:
    name: str = "constant"
    total_steps: Optional[int] = None
    milestones: tuple = ()
    factor: float = 0.1

    def factor_at(self, step: int, total: int) -> float:
        if self.name == "constant":
            return 1.0
        if self.name == "cosine":
            horizon = self.total_steps or total
            return 0.5 * (1.0 + math.cos(math.pi * min(step, horizon) / horizon))
        if self.name == "step":
            return self.factor ** sum(step >= m for m in self.milestones)
        raise TrainingError(f"unknown lr schedule {self.name!r}")


@dataclass(frozen=True)
class TrainConfig:
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    lr_schedule: LRSchedule = field(default_factory=LRSchedule)
    epochs: int = 10
    batch_size: int = 64
    seed: int = 0
    loss: LossConfig = field(default_factory=lambda: LossConfig("KL_only"))
    estimator: GradientEstimator = field(default_factory=GradientEstimator)
    init: str = "from_teacher"
    augment: str = "none"
    shuffle: bool = True
    quant_lr: Optional[float] = None
    label_smoothing: float = 0.0

    def __post_init__(self):
        if self.epochs < 1:
            raise TrainingError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise TrainingError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.init not in ("from_teacher", "random"):
            raise TrainingError(f"init must be 'from_teacher' or 'random', got {self.init!r}")


@dataclass(frozen=True)
class DataSplits:
    train: Dataset
    test: Dataset


@dataclass(frozen=True)
class EpochMetrics:
    epoch: int
    train_loss: float
    top1: float
    top5: float
    seconds: float


@dataclass
class RunRecord:
    epochs: list = field(default_factory=list)
    checkpoint: Optional[str] = None

    @property
    def seconds(self) -> float:
        return self.epochs[-1].seconds if self.epochs else 0.0

    @property
    def final_top1(self) -> float:
        return self.epochs[-1].top1

    def trajectory(self) -> list[tuple]:
        """Every recorded value except wall-clock time."""
        return [(e.epoch, e.train_loss, e.top1, e.top5) for e in self.epochs]

    def first_epoch_reaching(self, top1: float) -> Optional[int]:
        for e in self.epochs:
            if e.top1 >= top1:
                return e.epoch
        return None


@dataclass(frozen=True)
class CostReport:
    N: int
    T_pre: float
    T_s: float
    T_t: float = 0.0
    M_t: int = 0
    M_s: int = 1
    reused_teacher: bool = False

    @property
    def total(self) -> float:
        return self.N * self.T_pre + self.M_t * self.T_t + self.M_s * self.T_s

    def to_json(self) -> dict:
        return {"N": self.N, "T_pre": self.T_pre, "T_s": self.T_s, "T_t": self.T_t,
                "M_t": self.M_t, "M_s": self.M_s, "total": self.total}


# --- optimizers --------------------------------------------------------------

class SGD:
    def __init__(self, cfg: OptimizerConfig, decay_names=()):
        self.cfg = cfg
        self.decay = set(decay_names)
        self.velocity: dict[str, np.ndarray] = {}

    def step(self, params: dict, grads: dict, lrs: dict) -> None:
        c = self.cfg
        for name, g in grads.items():
            if c.weight_decay and name in self.decay:
                g = g + c.weight_decay * params[name]
            if c.momentum:
                v = self.velocity.get(name)
                v = g.copy() if v is None else c.momentum * v + g
                self.velocity[name] = v
                g = v
            params[name] = params[name] - lrs[name] * g


class Adam:
    def __init__(self, cfg: OptimizerConfig, decay_names=()):
        self.cfg = cfg
        self.decay = set(decay_names)
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, params: dict, grads: dict, lrs: dict) -> None:
        c = self.cfg
        b1, b2 = c.betas
        self.t += 1
        for name, g in grads.items():
            if c.weight_decay and name in self.decay:
                g = g + c.weight_decay * params[name]
            m = b1 * self.m.get(name, 0.0) + (1 - b1) * g
            v = b2 * self.v.get(name, 0.0) + (1 - b2) * g * g
            self.m[name], self.v[name] = m, v
            mhat = m / (1 - b1 ** self.t)
            vhat = v / (1 - b2 ** self.t)
            params[name] = params[name] - lrs[name] * mhat / (np.sqrt(vhat) + c.eps)


def make_optimizer(cfg: OptimizerConfig, decay_names=()):
    if cfg.name == "sgd":
        return SGD(cfg, decay_names)
    if cfg.name == "adam":
        return Adam(cfg, decay_names)
    raise TrainingError(f"unknown optimizer {cfg.name!r}")


# --- evaluation --------------------------------------------------------------

def predict_logits(model: Model, images: np.ndarray) -> np.ndarray:
    out = [forward(model, images[i:i + EVAL_CHUNK]).data for i in range(0, len(images), EVAL_CHUNK)]
    return np.concatenate(out, axis=0)


def topk_from_logits(logits: np.ndarray, labels: np.ndarray, ks: Sequence[int]) -> dict:
    classes = logits.shape[1]
    if not ks:
        raise TrainingError("ks must be non-empty")
    for k in ks:
        if not 1 <= k <= classes:
            raise TrainingError(f"k={k} outside [1, {classes}]")
    true = logits[np.arange(len(labels)), labels][:, None]
    idx = np.arange(classes)[None, :]
    # ties go to the lower class index
    ahead = (logits > true) | ((logits == true) & (idx < labels[:, None]))
    rank = ahead.sum(axis=1)
    return {k: float(np.mean(rank < k)) for k in ks}


def evaluate_topk(model: Model, data: Dataset, ks: Sequence[int] = (1, 5)) -> dict:
    return topk_from_logits(predict_logits(model, data.images), data.labels, ks)


def _eval_ks(classes: int) -> tuple[int, int]:
    return 1, min(5, classes)


# --- training ---------------------------------------------------------------

def _fit(model: Model, splits: DataSplits, cfg: TrainConfig,
         teacher_logits: Optional[Callable[[np.ndarray], np.ndarray]],
         clock: Callable[[], float] = time.perf_counter) -> RunRecord:
    model.estimator = cfg.estimator
    quant_names = set(model.quant_param_names())
    decay = [l.weight for l in model.layers]
    opt = make_optimizer(cfg.optimizer, decay)
    steps_per_epoch = math.ceil(len(splits.train) / cfg.batch_size)
    total_steps = steps_per_epoch * cfg.epochs
    aug_rng = np.random.default_rng([cfg.seed, 1])
    k1, k5 = _eval_ks(splits.test.class_count)
    record = RunRecord()
    step = 0
    start = clock()
    for epoch in range(cfg.epochs):
        losses = []
        shuffle_seed = cfg.seed if cfg.shuffle else None
        for xb, yb in batches(splits.train, cfg.batch_size, shuffle_seed, epoch):
            xb = augment(xb, cfg.augment, aug_rng)
            tape = Tape()
            leaves = model.watch(tape)
            h_s = forward(model, xb, step, leaves)
            h_t = teacher_logits(xb) if teacher_logits is not None else None
            if cfg.loss.mode == "CE_only" and cfg.label_smoothing:
                loss = ce_loss(h_s, yb, cfg.label_smoothing)
            else:
                labels = yb if cfg.loss.needs_labels else None
                loss = total_loss(cfg.loss, h_t, h_s, labels)
            grads = backward(loss)
            scale = cfg.lr_schedule.factor_at(step, total_steps)
            base = cfg.optimizer.lr * scale
            qlr = base if cfg.quant_lr is None else cfg.quant_lr * scale
            lrs = {n: (qlr if n in quant_names else base) for n in leaves}
            opt.step(model.params, {n: grads[t].data for n, t in leaves.items()}, lrs)
            losses.append(float(loss.data))
            step += 1
        if not all(np.all(np.isfinite(v)) for v in model.params.values()):
            raise TrainingError(f"non-finite parameters after epoch {epoch + 1}")
        acc = evaluate_topk(model, splits.test, (k1, k5))
        record.epochs.append(EpochMetrics(epoch + 1, float(np.mean(losses)), acc[k1], acc[k5], clock() - start))
        logger.info("epoch %d loss %.4f top1 %.4f", epoch + 1, record.epochs[-1].train_loss, acc[k1])
    return record


def pretrain_teacher(data: DataSplits, model_cfg: ModelConfig, train_cfg: TrainConfig,
                     checkpoint: Optional[str] = None) -> tuple[Model, RunRecord]:
    """Full-precision training on labels with cross entropy."""
    if model_cfg.quantized:
        raise TrainingError("teacher model config must not carry quantizers")
    if train_cfg.loss.mode != "CE_only":
        raise TrainingError(f"teacher pre-training uses CE_only loss, got {train_cfg.loss.mode}")
    teacher = build_model(model_cfg, train_cfg.seed)
    record = _fit(teacher, data, train_cfg, None)
    if checkpoint is not None:
        save_checkpoint(teacher, checkpoint)
        record.checkpoint = str(checkpoint)
    return teacher, record


def _teacher_fn(teachers: Sequence[Model]):
    def logits(xb):
        return ensemble_logits([forward(t, xb).data for t in teachers]).data

    return logits


def train_sqakd(teacher, data: DataSplits, model_cfg: ModelConfig, train_cfg: TrainConfig,
                teacher_records: Sequence[RunRecord] = (), checkpoint: Optional[str] = None):
    """Quantization-aware distillation of a low-bit student from full-precision teacher(s).

    ``teacher`` may be a model, a list of models (their logits are averaged) or
    None for a CE-only run from random initialization.
    """
    teachers = [] if teacher is None else ([teacher] if isinstance(teacher, Model) else list(teacher))
    if train_cfg.loss.needs_teacher and not teachers:
        raise TrainingError("teacher required for a distillation loss")
    if train_cfg.init == "from_teacher" and not teachers:
        raise TrainingError("teacher required for init=from_teacher")
    if not model_cfg.quantized:
        raise TrainingError("student model config must be quantized")
    for t in teachers:
        if t.config.layer_shapes() != model_cfg.layer_shapes():
            raise TrainingError("student architecture differs from the teacher's")
        if t.quantized:
            raise TrainingError("teachers must be full precision")
    student = build_model(model_cfg, train_cfg.seed)
    if train_cfg.init == "from_teacher":
        clone_weights(teachers[0], student)
    fn = _teacher_fn(teachers) if train_cfg.loss.needs_teacher else None
    record = _fit(student, data, train_cfg, fn)
    if checkpoint is not None:
        save_checkpoint(student, checkpoint)
        record.checkpoint = str(checkpoint)
    return student, record, cost_report(record, teacher_records, n_teachers=len(teachers))


def cost_report(student: RunRecord, teachers: Sequence[RunRecord] = (), n_teachers: Optional[int] = None) -> CostReport:
    """Training cost: teacher pre-training plus student-only training.

    Without teacher records the teacher came from an existing checkpoint, so
    T_pre is 0 and the report is flagged as reusing it.
    """
    if student is None:
        raise TrainingError("cost_report needs the student record")
    if teachers:
        n = len(teachers)
        t_pre = sum(r.seconds for r in teachers) / n
        return CostReport(N=n, T_pre=t_pre, T_s=student.seconds)
    return CostReport(N=n_teachers if n_teachers is not None else 1, T_pre=0.0,
                      T_s=student.seconds, reused_teacher=True)


# --- outputs -----------------------------------------------------------------

def metrics_csv(record: RunRecord, wall_clock: bool = True) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRICS_HEADER)
    for e in record.epochs:
        secs = repr(e.seconds) if wall_clock else ""
        w.writerow([e.epoch, repr(e.train_loss), repr(e.top1), repr(e.top5), secs])
    return buf.getvalue()


def write_metrics(record: RunRecord, path, wall_clock: bool = True) -> None:
    Path(path).write_text(metrics_csv(record, wall_clock), encoding="utf-8")


def write_cost(cost: CostReport, path) -> None:
    Path(path).write_text(json.dumps(cost.to_json(), indent=2) + "\n", encoding="utf-8")


def ablation_matrix(base, axes: dict) -> list:
    """Cartesian product of axis values; axes in name order, values as given."""
    for name in axes:
        if name not in ABLATION_AXES:
            raise TrainingError(f"unknown ablation axis {name!r}")
    names = sorted(axes)
    out = []
    for combo in itertools.product(*(list(axes[n]) for n in names)):
        cfg = base
        for name, value in zip(names, combo):
            cfg = apply_axis(cfg, name, value)
        out.append(cfg)
    return out
