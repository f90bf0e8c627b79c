"""The desk-scale experiment shared by the acceptance and training tests.

Results are cached per process so the five teachers are trained once.
"""
from functools import lru_cache

from sqakd.data import synth_blobs
from sqakd.distill import LossConfig
from sqakd.models import ModelConfig
from sqakd.quantizers import GradientEstimator, QuantizerSpec
from sqakd.training import (
    DataSplits,
    OptimizerConfig,
    TrainConfig,
    pretrain_teacher,
    train_sqakd,
)

SEEDS = (0, 1, 2, 3, 4)
WIDTHS = (2, 32, 32, 3)


@lru_cache(maxsize=None)
def splits() -> DataSplits:
    return DataSplits(synth_blobs(1000, 3, 2, 1.0, seed=0), synth_blobs(300, 3, 2, 1.0, seed=1))


def fp_config() -> ModelConfig:
    return ModelConfig("mlp", 3, WIDTHS)


def student_config(bits=2, skip_first_last=False) -> ModelConfig:
    quant = (QuantizerSpec("Uniform", b=bits, v=-1.0, m=1.0, target="weights"),
             QuantizerSpec("Uniform", b=bits, v=0.0, m=4.0))
    return ModelConfig("mlp", 3, WIDTHS, quant=quant, skip_first_last=skip_first_last)


def teacher_train_config(seed) -> TrainConfig:
    return TrainConfig(optimizer=OptimizerConfig("sgd", lr=0.1), epochs=30, batch_size=64,
                       seed=seed, loss=LossConfig("CE_only"))


def student_train_config(seed, mode, estimator=None, epochs=20) -> TrainConfig:
    est = estimator or GradientEstimator("AdditiveDiscretization", mu=0.1)
    return TrainConfig(optimizer=OptimizerConfig("sgd", lr=0.05, momentum=0.9), epochs=epochs,
                       batch_size=64, seed=seed, loss=LossConfig(mode, rho=4.0), estimator=est)


@lru_cache(maxsize=None)
def teacher(seed):
    return pretrain_teacher(splits(), fp_config(), teacher_train_config(seed))


@lru_cache(maxsize=None)
def student(seed, mode="KL_only", bits=2, rule="AdditiveDiscretization", skip_first_last=False):
    est = GradientEstimator(rule, mu=0.1 if rule == "AdditiveDiscretization" else 0.0)
    model, _ = teacher(seed)
    return train_sqakd(model, splits(), student_config(bits, skip_first_last),
                       student_train_config(seed, mode, est), [teacher(seed)[1]])
