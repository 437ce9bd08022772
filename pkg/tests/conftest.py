"""
テスト共通の設定とフィクスチャ
"""
import sys
from pathlib import Path

import numpy as np
import pytest

# プロジェクトルートをパスに追加
sys.path.insert(0, str(Path(__file__).parent.parent))

from core.backbone import BackboneConfig, LabeledBatch
from core.synthgen import SynthConfig, generate_bank
from core.taskbank import Dataset


def pytest_addoption(parser):
    parser.addoption('--runslow', action='store_true', default=False, help='run slow directional tests')


def pytest_configure(config):
    config.addinivalue_line('markers', 'slow: directional checks that train models (enable with --runslow)')


def pytest_collection_modifyitems(config, items):
    if config.getoption('--runslow'):
        return
    skip_slow = pytest.mark.skip(reason='needs --runslow')
    for item in items:
        if 'slow' in item.keywords:
            item.add_marker(skip_slow)


def make_dataset(rows, attributes=('a0',), input_dim=3, seed=0, inputs=None):
    """
    行ごとの (example_id, subject_id, [ラベル...]) からベクトル入力のデータセットを作る

    ラベルに None を書くとラベルなしになる。
    """
    rng = np.random.default_rng(seed)
    example_ids = [r[0] for r in rows]
    example_subjects = [r[1] for r in rows]
    labels = np.array([[-1 if v is None else v for v in r[2]] for r in rows], dtype=np.int8)
    subjects = list(dict.fromkeys(example_subjects))
    if inputs is None:
        inputs = rng.normal(size=(len(rows), input_dim)).astype(np.float32)
    return Dataset(example_ids, example_subjects, inputs, labels, attributes, subjects, 'vector')


def task_rows(subject, n_pos, n_neg, prefix=None):
    """1被験者・1属性ぶんの行（陽性 n_pos、陰性 n_neg）"""
    prefix = prefix or subject
    return (
        [(f"{prefix}_p{i}", subject, [1]) for i in range(n_pos)]
        + [(f"{prefix}_n{i}", subject, [0]) for i in range(n_neg)]
    )


def balanced_batch(n_per_class, dim, seed=0, prefix='x', image_shape=None):
    rng = np.random.default_rng(seed)
    shape = (2 * n_per_class,) + (tuple(image_shape) if image_shape else (dim,))
    return LabeledBatch(
        inputs=rng.normal(size=shape),
        labels=np.array([1] * n_per_class + [0] * n_per_class),
        example_ids=tuple(f"{prefix}{i}" for i in range(2 * n_per_class)),
    )


@pytest.fixture
def tiny_vector_config():
    return BackboneConfig(input_kind='vector', input_shape=(4,), conv_channels=(6,), activation='tanh',
                          dtype='float64', seed=3)


@pytest.fixture
def small_synth_config():
    return SynthConfig(n_subjects=3, n_attributes=3, examples_per_subject=60, feature_dim=4,
                       positive_rate_range=(0.3, 0.5), seed=0)


@pytest.fixture
def small_bank(small_synth_config):
    return generate_bank(small_synth_config)
