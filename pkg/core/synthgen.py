"""
合成タスクバンク生成

被験者 × 属性 の構造を持つ二値ラベル付きデータセットを作る。
属性ごとの判別規則（線形 + tanh の非線形項）は共有方向との混合で互いの類似度を制御し、
被験者ごとの入力オフセットで被験者間の分布のずれを作る。
タスクごとの陽性率は positive_rate_range から引く。
"""
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional, Tuple, Union

import numpy as np

from core.taskbank import Dataset, save_dataset
from utils.logger import get_logger

logger = get_logger(__name__)

# 乱数系列の用途ごとの番号
_ATTRIBUTE_STREAM = 0
_SUBJECT_STREAM = 1
_EXAMPLE_STREAM = 2
_RATE_STREAM = 3
_NOISE_STREAM = 4
_SHARED_STREAM = 5


class SynthConfigError(ValueError):
    """不正な生成設定（対象フィールド名を保持）"""

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


@dataclass(frozen=True)
class SynthConfig:
    """
    合成バンクの生成設定

    attribute_overlap は 0〜1 で、1 なら全属性が同じ判別規則を共有する。
    nonlinear_scale が 0 なら規則は線形。
    image_side を指定すると特徴ベクトルを (1, side, side) の画像として出力する。
    """
    n_subjects: int = 8
    n_attributes: int = 6
    examples_per_subject: int = 200
    feature_dim: int = 16
    subject_shift_scale: float = 1.0
    attribute_overlap: float = 0.5
    positive_rate_range: Tuple[float, float] = (0.05, 0.5)
    noise_scale: float = 0.1
    nonlinear_scale: float = 0.5
    image_side: Optional[int] = None
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, 'positive_rate_range', tuple(float(r) for r in self.positive_rate_range))
        self.validate()

    def validate(self):
        for name in ('n_subjects', 'n_attributes', 'feature_dim'):
            if getattr(self, name) < 1:
                raise SynthConfigError(name, f"must be >= 1, got {getattr(self, name)}")
        if self.examples_per_subject < 2:
            raise SynthConfigError('examples_per_subject', f"must be >= 2, got {self.examples_per_subject}")
        for name in ('subject_shift_scale', 'noise_scale', 'nonlinear_scale'):
            if getattr(self, name) < 0:
                raise SynthConfigError(name, f"must be >= 0, got {getattr(self, name)}")
        if not 0.0 <= self.attribute_overlap <= 1.0:
            raise SynthConfigError('attribute_overlap', f"must be in [0, 1], got {self.attribute_overlap}")
        if len(self.positive_rate_range) != 2:
            raise SynthConfigError('positive_rate_range', f"must be [low, high], got {list(self.positive_rate_range)}")
        low, high = self.positive_rate_range
        if not 0.0 < low <= high < 1.0:
            raise SynthConfigError('positive_rate_range', f"must satisfy 0 < low <= high < 1, got [{low}, {high}]")
        if self.image_side is not None:
            if self.image_side < 1 or self.image_side ** 2 != self.feature_dim:
                raise SynthConfigError(
                    'image_side', f"image_side^2 must equal feature_dim ({self.feature_dim}), got {self.image_side}"
                )
        if self.seed < 0:
            raise SynthConfigError('seed', f"must be >= 0, got {self.seed}")
        self.positive_count_bounds()

    def positive_count_bounds(self) -> Tuple[int, int]:
        """
        1タスクあたりの陽性数の下限・上限

        Raises:
            SynthConfigError: 範囲内に陽性・陰性がともに1例以上となる数がない
        """
        n = self.examples_per_subject
        low, high = self.positive_rate_range
        lo_count = max(1, math.ceil(low * n - 1e-9))
        hi_count = min(n - 1, math.floor(high * n + 1e-9))
        if lo_count > hi_count:
            raise SynthConfigError(
                'positive_rate_range',
                f"[{low}, {high}] admits no positive count for {n} examples per subject",
            )
        return lo_count, hi_count

    def to_dict(self) -> dict:
        data = asdict(self)
        data['positive_rate_range'] = list(self.positive_rate_range)
        return data


def _unit(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v)


def _mix(shared: np.ndarray, own: np.ndarray, overlap: float) -> np.ndarray:
    # overlap = 1 で shared と一致、0 で独立
    return _unit(overlap * shared + math.sqrt(max(0.0, 1.0 - overlap ** 2)) * own)


def attribute_rules(config: SynthConfig) -> Tuple[np.ndarray, np.ndarray]:
    """
    属性ごとの判別方向

    属性 a の規則は (seed, a) だけから決まるため、属性数を増やしても既存属性の規則は変わらない。

    Returns:
        (線形項の方向 W, 非線形項の方向 V)、いずれも (n_attributes, feature_dim)
    """
    d = config.feature_dim
    shared_rng = np.random.default_rng([config.seed, _SHARED_STREAM])
    shared_w = _unit(shared_rng.normal(size=d))
    shared_v = _unit(shared_rng.normal(size=d))

    w = np.empty((config.n_attributes, d))
    v = np.empty((config.n_attributes, d))
    for a in range(config.n_attributes):
        rng = np.random.default_rng([config.seed, _ATTRIBUTE_STREAM, a])
        w[a] = _mix(shared_w, _unit(rng.normal(size=d)), config.attribute_overlap)
        v[a] = _mix(shared_v, _unit(rng.normal(size=d)), config.attribute_overlap)
    return w, v


def task_scores(config: SynthConfig, features: np.ndarray, offset: np.ndarray,
                w: np.ndarray, v: np.ndarray) -> np.ndarray:
    """被験者オフセットを引いた特徴に対する属性規則のスコア（ノイズなし）"""
    z = features - offset
    return z @ w + config.nonlinear_scale * np.tanh(z @ v)


def generate_bank(config: SynthConfig) -> Dataset:
    """
    合成データセットを生成

    Args:
        config: 生成設定

    Returns:
        Dataset（全例が全属性のラベルを持つ）

    Raises:
        SynthConfigError: 陽性率の範囲が例数に対して実現できない
    """
    config.validate()
    n = config.examples_per_subject
    d = config.feature_dim
    lo_count, hi_count = config.positive_count_bounds()
    low, high = config.positive_rate_range
    w, v = attribute_rules(config)

    subjects = tuple(f"s{s:02d}" for s in range(config.n_subjects))
    attributes = tuple(f"a{a:02d}" for a in range(config.n_attributes))

    example_ids, example_subjects, blocks, label_blocks = [], [], [], []
    for s, subject in enumerate(subjects):
        offset = config.subject_shift_scale * np.random.default_rng([config.seed, _SUBJECT_STREAM, s]).normal(size=d)
        features = offset + np.random.default_rng([config.seed, _EXAMPLE_STREAM, s]).normal(size=(n, d))

        labels = np.zeros((n, config.n_attributes), dtype=np.int8)
        for a in range(config.n_attributes):
            score = task_scores(config, features, offset, w[a], v[a])
            if config.noise_scale > 0:
                score = score + config.noise_scale * np.random.default_rng(
                    [config.seed, _NOISE_STREAM, s, a]).normal(size=n)
            rate = np.random.default_rng([config.seed, _RATE_STREAM, s, a]).uniform(low, high)
            k = int(np.clip(round(rate * n), lo_count, hi_count))
            # スコア上位 k 例を陽性にする
            order = np.argsort(-score, kind='stable')
            labels[order[:k], a] = 1

        example_ids.extend(f"{subject}_e{i:04d}" for i in range(n))
        example_subjects.extend([subject] * n)
        blocks.append(features)
        label_blocks.append(labels)

    inputs = np.concatenate(blocks).astype(np.float32)
    input_kind = 'vector'
    if config.image_side is not None:
        side = config.image_side
        # 8bit に量子化しておき、PNG で書き出しても値が変わらないようにする
        squashed = 1.0 / (1.0 + np.exp(-inputs.astype(np.float64)))
        inputs = np.rint(squashed * 255.0).astype(np.float32) / np.float32(255.0)
        inputs = inputs.reshape(len(inputs), 1, side, side)
        input_kind = 'image'

    dataset = Dataset(
        example_ids=tuple(example_ids),
        example_subjects=tuple(example_subjects),
        inputs=inputs,
        label_matrix=np.concatenate(label_blocks),
        attributes=attributes,
        subjects=subjects,
        input_kind=input_kind,
    )
    logger.info(
        f"Generated synthetic bank: {config.n_subjects} subjects x {config.n_attributes} attributes, "
        f"{dataset.n_examples} examples, input {dataset.input_shape}"
    )
    return dataset


def export_bank(config: SynthConfig, directory: Union[str, Path]) -> Path:
    """生成したバンクをマニフェスト形式で書き出す"""
    return save_dataset(generate_bank(config), directory)
