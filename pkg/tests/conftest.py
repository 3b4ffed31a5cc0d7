"""Shared toy configurations and generated data."""

import copy

import numpy as np
import pytest

from dhen_cvr.config import (CONVERSION_HEADS, SEQUENCE_KINDS, DhenConfig, HeadConfig, LayerConfig,
                             MaskNetConfig, MLPConfig, ModelConfig, RunConfig, SchemaConfig, SequenceConfig,
                             SslConfig, TrainingConfig, TransformerConfig, WorldConfig)
from dhen_cvr.synthetic import generate_partitions


def toy_world(**overrides) -> WorldConfig:
    cfg = WorldConfig(n_users=200, n_ads=40, n_advertisers=8, n_items=60, n_queries=30, emb_dim=4,
                      impressions_per_day=300, downsample_rate=1.0, history_days=2,
                      positive_rate={h: 0.1 for h in CONVERSION_HEADS},
                      seq_rates={"search": 0.5, "org": 0.8, "ads": 0.5, "match": 0.3, "conv": 0.4})
    for k, v in overrides.items():
        setattr(cfg, k, v)
    return cfg


def toy_model(**overrides) -> ModelConfig:
    cfg = ModelConfig(
        token_dim=8,
        dhen=DhenConfig(layers=[
            LayerConfig(modules=[MLPConfig(widths=[16]),
                                 TransformerConfig(layers=1, heads=2, hidden=8, ff_size=16)],
                        width=16, reshape_dim=8),
            LayerConfig(modules=[MLPConfig(widths=[16]), MaskNetConfig(blocks=2, hidden=8)], width=16),
        ]),
        heads=[HeadConfig(h, tower=[8]) for h in CONVERSION_HEADS] + [HeadConfig("ctr", tower=[8], train_only=True)],
        sequence=SequenceConfig(hidden=8, layers=1, heads=2, ff_size=16, action_dim=3, advertiser_dim=3, max_len=12),
    )
    for k, v in overrides.items():
        setattr(cfg, k, v)
    return cfg


def toy_run(**sections) -> RunConfig:
    run = RunConfig(world=toy_world(), schema=SchemaConfig(categorical_dim=4), model=toy_model(),
                    ssl=SslConfig(num_pos=4, num_neg=3),
                    training=TrainingConfig(lr=3e-3, batch_size=64, train_days=2, eval_days=1))
    for k, v in sections.items():
        setattr(run, k, v)
    return run.validate()


@pytest.fixture(scope="session")
def toy_partitions():
    return generate_partitions(toy_world(), range(3))


@pytest.fixture
def run_config():
    return toy_run()


@pytest.fixture
def small_batch(toy_partitions):
    return toy_partitions[0].batch(np.arange(6), 12)


def clone(x):
    return copy.deepcopy(x)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
