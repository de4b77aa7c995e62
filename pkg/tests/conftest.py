"""Shared fixtures: the pinned synthetic benchmark and trained models.

The benchmark is 20 base classes and 10 novel classes in 16 dimensions at
noise 0.35, all seed-pinned.  Training fixtures are session-scoped because
they are expensive; only the tests that need them trigger them.
"""

import dataclasses
import time

import numpy as np
import pytest

from protoflow import episodes, gradnet, metatrain, odeflow

BENCH_DIM = 16
BENCH_NOISE = 0.35
BENCH_BASE_CLASSES = 20
BENCH_NOVEL_CLASSES = 10
BENCH_PER_CLASS = 40


@pytest.fixture(scope="session")
def benchmark_base():
    return episodes.synth_dataset(BENCH_BASE_CLASSES, BENCH_DIM,
                                  BENCH_PER_CLASS, noise_sigma=BENCH_NOISE,
                                  seed=101, split="base")


@pytest.fixture(scope="session")
def benchmark_novel():
    return episodes.synth_dataset(BENCH_NOVEL_CLASSES, BENCH_DIM,
                                  BENCH_PER_CLASS, noise_sigma=BENCH_NOISE,
                                  seed=202, split="novel",
                                  first_class_id=BENCH_BASE_CLASSES)


@dataclasses.dataclass(frozen=True)
class TrainedModel:
    net_cfg: gradnet.GradNetConfig
    params: gradnet.GradNetParams
    train_cfg: metatrain.TrainConfig
    seconds: float
    divergences: int
    skipped_updates: int
    log: tuple


def _train_on_benchmark(base, mode: str) -> TrainedModel:
    net_cfg = gradnet.GradNetConfig(feature_dim=BENCH_DIM)
    cfg = metatrain.TrainConfig(
        epochs=15, episodes_per_epoch=200, mode=mode, seed=0,
        solver=odeflow.SolveConfig(method="euler", integral_time=40.0,
                                   num_steps=10))
    start = time.perf_counter()
    result = metatrain.train(base, net_cfg, cfg)
    seconds = time.perf_counter() - start
    return TrainedModel(net_cfg=net_cfg, params=result.params, train_cfg=cfg,
                        seconds=seconds, divergences=result.divergences,
                        skipped_updates=result.skipped_updates,
                        log=tuple(result.log))


@pytest.fixture(scope="session")
def trained_transductive(benchmark_base):
    return _train_on_benchmark(benchmark_base, "transductive")


@pytest.fixture(scope="session")
def trained_inductive(benchmark_base):
    return _train_on_benchmark(benchmark_base, "inductive")


@pytest.fixture(scope="session")
def mini_trained():
    """A small flow network briefly trained on a small dataset.

    Cheap enough for unit tests that need a non-fresh field, such as the
    solver consistency check.
    """
    ds = episodes.synth_dataset(8, 6, 20, noise_sigma=0.3, seed=77)
    net_cfg = gradnet.GradNetConfig(feature_dim=6, num_modules=2,
                                    hidden_dim=16, embed_dim=16,
                                    attention_heads=2, head_dim=8)
    cfg = metatrain.TrainConfig(
        epochs=2, episodes_per_epoch=30, n_way=3, k_shot=1, m_query=5,
        mode="transductive", seed=5,
        solver=odeflow.SolveConfig(method="euler", integral_time=40.0,
                                   num_steps=10),
        val_episodes=2)
    result = metatrain.train(ds, net_cfg, cfg)
    return ds, net_cfg, result.params
