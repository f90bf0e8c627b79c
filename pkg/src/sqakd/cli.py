"""Command-line entry point: ``sqakd {pretrain,qat,eval,ablate} --config PATH``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Optional

from .config import ConfigError, RunConfig, config_from_dict, parse_config, write_config
from .data import DataError, load_binary_records, synth_blobs
from .distill import LossConfig
from .models import ModelError, load_checkpoint
from .quantizers import QuantizerError
from .tensor import ShapeError
from .training import (
    CostReport,
    DataSplits,
    LRSchedule,
    OptimizerConfig,
    TrainConfig,
    TrainingError,
    ablation_matrix,
    evaluate_topk,
    pretrain_teacher,
    train_sqakd,
    write_cost,
    write_metrics,
)

logger = logging.getLogger("sqakd")

COMMANDS = ("pretrain", "qat", "eval", "ablate")


class CommandError(RuntimeError):
    pass


def load_data(cfg: RunConfig) -> DataSplits:
    d = cfg.data
    if d.source == "blobs":
        return DataSplits(
            synth_blobs(d.n_per_class, d.classes, d.dim, d.spread, d.seed),
            synth_blobs(d.test_n_per_class, d.classes, d.dim, d.spread, d.test_seed),
        )
    if not d.train_path or not d.test_path:
        raise CommandError("binary data needs data.train_path and data.test_path")
    return DataSplits(
        load_binary_records(d.train_path, tuple(d.shape), d.classes),
        load_binary_records(d.test_path, tuple(d.shape), d.classes),
    )


def train_config(cfg: RunConfig, loss: Optional[LossConfig] = None, teacher: bool = False) -> TrainConfig:
    t = cfg.train
    o = t.optimizer
    lr = cfg.teacher.lr if teacher and cfg.teacher.lr is not None else o.lr
    epochs = cfg.teacher.epochs if teacher and cfg.teacher.epochs is not None else t.epochs
    momentum = cfg.teacher.momentum if teacher and cfg.teacher.momentum is not None else o.momentum
    s = t.lr_schedule
    return TrainConfig(
        optimizer=OptimizerConfig(o.name, lr, momentum, o.weight_decay, tuple(o.betas), o.eps),
        lr_schedule=LRSchedule(s.name, s.total_steps, tuple(s.milestones), s.factor),
        epochs=epochs,
        batch_size=t.batch_size,
        seed=cfg.seed,
        loss=loss if loss is not None else cfg.loss_config(),
        estimator=cfg.gradient_estimator(),
        init=t.init,
        augment=t.augment,
        shuffle=t.shuffle,
        quant_lr=None if teacher else t.quant_lr,
        label_smoothing=cfg.teacher.label_smoothing if teacher and cfg.teacher.pretrain_loss == "label_smoothing" else 0.0,
    )


def _prepare_out(cfg: RunConfig) -> Path:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    write_config(cfg, out / "config.resolved.json")
    return out


def cmd_pretrain(cfg: RunConfig, data: Optional[DataSplits] = None):
    out = _prepare_out(cfg)
    data = data or load_data(cfg)
    ckpt = out / "teacher.ckpt"
    _, record = pretrain_teacher(data, cfg.model_config(quantized=False),
                                 train_config(cfg, LossConfig("CE_only"), teacher=True), str(ckpt))
    write_metrics(record, out / "metrics.csv", cfg.log_wall_clock)
    write_cost(CostReport(N=1, T_pre=record.seconds, T_s=0.0, M_s=0), out / "cost.json")
    return ckpt, record


def cmd_qat(cfg: RunConfig, data: Optional[DataSplits] = None, teacher_records=()) -> Path:
    paths = cfg.teacher_checkpoints()
    loss = cfg.loss_config()
    if loss.needs_teacher and not paths:
        raise CommandError(f"teacher required: {loss.mode} needs teacher.checkpoint")
    if cfg.train.init == "from_teacher" and not paths:
        raise CommandError("teacher required: train.init=from_teacher needs teacher.checkpoint")
    out = _prepare_out(cfg)
    data = data or load_data(cfg)
    teachers = [load_checkpoint(p) for p in paths]
    ckpt = out / "student.ckpt"
    _, record, cost = train_sqakd(teachers or None, data, cfg.model_config(quantized=True),
                                  train_config(cfg), teacher_records, str(ckpt))
    write_metrics(record, out / "metrics.csv", cfg.log_wall_clock)
    write_cost(cost, out / "cost.json")
    return ckpt


def cmd_eval(cfg: RunConfig, data: Optional[DataSplits] = None) -> dict:
    if not cfg.eval.checkpoint:
        raise CommandError("eval needs eval.checkpoint (use --set eval.checkpoint=PATH)")
    model = load_checkpoint(cfg.eval.checkpoint)
    data = data or load_data(cfg)
    k5 = min(5, data.test.class_count)
    acc = evaluate_topk(model, data.test, (1, k5))
    result = {"checkpoint": cfg.eval.checkpoint, "top1": acc[1], "top5": acc[k5]}
    out = _prepare_out(cfg)
    (out / "eval.json").write_text(json.dumps(result, indent=2) + "\n", encoding="utf-8")
    print(json.dumps(result))
    return result


def cmd_ablate(cfg: RunConfig) -> list[Path]:
    """Run every config of the ablation grid in its own subdirectory.

    Teachers are pre-trained once per distinct teacher setup when no
    checkpoint is configured.
    """
    out = _prepare_out(cfg)
    data = load_data(cfg)
    runs = ablation_matrix(cfg, cfg.ablate.axes)
    teacher_cache: dict = {}

    def teacher_for(run: RunConfig):
        key = json.dumps([run.model.__dict__, run.teacher.__dict__, run.train.optimizer.__dict__,
                          run.train.epochs, run.seed], sort_keys=True, default=str)
        if key not in teacher_cache:
            tdir = out / f"teacher_{len(teacher_cache):03d}"
            tcfg = _with(run, out=str(tdir))
            ckpt, record = cmd_pretrain(tcfg, data)
            teacher_cache[key] = (str(ckpt), record)
        return teacher_cache[key]

    prepared = []
    for i, run in enumerate(runs):
        run = _with(run, out=str(out / f"run_{i:03d}"))
        records = ()
        if not run.teacher_checkpoints() and (run.loss_config().needs_teacher or run.train.init == "from_teacher"):
            ckpt, record = teacher_for(run)
            run = _with(run, teacher={**run.to_dict()["teacher"], "checkpoint": ckpt})
            records = (record,)
        prepared.append((run, records))

    def go(item):
        run, records = item
        cmd_qat(run, data, records)
        return Path(run.out)

    if cfg.ablate.workers > 1:
        with ThreadPoolExecutor(cfg.ablate.workers) as ex:
            dirs = list(ex.map(go, prepared))
    else:
        dirs = [go(r) for r in prepared]
    index = ["run,dir," + ",".join(sorted(cfg.ablate.axes))]
    for i, (run, d) in enumerate(zip(runs, dirs)):
        index.append(",".join([str(i), d.name] + [json.dumps(_axis_value(run, a)) for a in sorted(cfg.ablate.axes)]))
    (out / "runs.csv").write_text("\n".join(index) + "\n", encoding="utf-8")
    return dirs


def _axis_value(run: RunConfig, axis: str):
    return {
        "loss_mode": run.loss.mode, "lambda": run.loss.lam, "rho": run.loss.rho,
        "init": run.train.init, "epochs": run.train.epochs,
        "forward_family": [run.quant.weight.family, run.quant.activation.family],
        "backward_estimator": run.estimator.rule,
        "teacher_checkpoint": run.teacher.checkpoint, "teacher_checkpoints": run.teacher.checkpoint,
        "teacher_pretrain_loss": run.teacher.pretrain_loss,
    }[axis]


def _with(cfg: RunConfig, **changes) -> RunConfig:
    d = cfg.to_dict()
    d.update(changes)
    return config_from_dict(d)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sqakd", description="Quantization-aware distillation toolkit")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", required=True, help="JSON run config")
    p.add_argument("--out", help="output directory (overrides config 'out')")
    p.add_argument("--seed", type=int, help="seed (overrides config and --set)")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="dotted-path override, repeatable; last one wins")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def run(command: str, config_path, overrides=(), seed: Optional[int] = None, out: Optional[str] = None) -> int:
    try:
        ov = list(overrides)
        if out is not None:
            ov.append(f"out={json.dumps(out)}")
        cfg = parse_config(config_path, ov, seed)
        if command == "pretrain":
            cmd_pretrain(cfg)
        elif command == "qat":
            cmd_qat(cfg)
        elif command == "eval":
            cmd_eval(cfg)
        elif command == "ablate":
            cmd_ablate(cfg)
        else:
            raise CommandError(f"unknown command {command!r}")
    except ConfigError as exc:
        print(f"sqakd: config error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"sqakd: file not found: {exc.filename}", file=sys.stderr)
        return 2
    except CommandError as exc:
        print(f"sqakd: {exc}", file=sys.stderr)
        return 3
    except (TrainingError, ModelError, DataError, QuantizerError, ShapeError, ValueError) as exc:
        print(f"sqakd: error: {exc}", file=sys.stderr)
        return 1
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    return run(args.command, args.config, args.overrides, args.seed, args.out)


if __name__ == "__main__":
    sys.exit(main())
