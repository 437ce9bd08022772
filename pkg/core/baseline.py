"""
ベースライン検出器

学習用の全属性を「いずれかが陽性なら陽性」として1つのラベルにまとめ、
タスク分割なしの通常のミニバッチ学習で1つの分類器を作る。
適応はメタ学習モデルと同じ adapt を通す。
"""
import json
import time
from dataclasses import asdict, dataclass, replace
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from tqdm import tqdm

from core import backbone
from core.backbone import BackboneConfig, LabeledBatch, ParameterVector
from core.meta import OUTER_OPTIMIZERS, MetaConfig, OuterOptimizer
from core.taskbank import UNLABELED, Dataset
from utils.logger import get_logger

logger = get_logger(__name__)


class BaselineError(ValueError):
    """ベースラインを学習できない入力"""


@dataclass(frozen=True, eq=False)
class MergedDataset:
    """属性ラベルを論理和でまとめたデータセット"""
    dataset: Dataset
    rows: np.ndarray
    labels: np.ndarray
    attributes: Tuple[str, ...]

    def __len__(self) -> int:
        return len(self.rows)

    @property
    def merged_labels(self) -> Dict[str, int]:
        """{example_id: 0/1}"""
        return {self.dataset.example_ids[r]: int(y) for r, y in zip(self.rows, self.labels)}

    @property
    def positive_rows(self) -> np.ndarray:
        return self.rows[self.labels == 1]

    @property
    def negative_rows(self) -> np.ndarray:
        return self.rows[self.labels == 0]

    def batch(self, rows: Sequence[int]) -> LabeledBatch:
        lookup = dict(zip(self.rows.tolist(), self.labels.tolist()))
        rows = np.asarray(rows, dtype=np.int64)
        return LabeledBatch(
            inputs=self.dataset.inputs[rows],
            labels=np.array([lookup[int(r)] for r in rows]),
            example_ids=tuple(self.dataset.example_ids[r] for r in rows),
        )


@dataclass(frozen=True)
class BaselineConfig:
    """
    ベースラインの学習設定

    iterations が None の場合はメタ学習と同じ勾配ステップ数（parity_iterations）を使う。
    """
    iterations: Optional[int] = None
    shots: int = 5
    beta: float = 0.03
    outer_optimizer: str = 'adam'
    adam_betas: Tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, 'adam_betas', tuple(float(b) for b in self.adam_betas))
        if self.iterations is not None and self.iterations < 0:
            raise ValueError(f"iterations must be >= 0, got {self.iterations}")
        if self.shots < 1:
            raise ValueError(f"shots must be >= 1, got {self.shots}")
        if not self.beta > 0:
            raise ValueError(f"beta must be > 0, got {self.beta}")
        if self.outer_optimizer not in OUTER_OPTIMIZERS:
            raise ValueError(f"outer_optimizer must be one of {OUTER_OPTIMIZERS}, got {self.outer_optimizer!r}")
        if self.seed < 0:
            raise ValueError(f"seed must be >= 0, got {self.seed}")

    def resolved(self, meta_config: MetaConfig) -> 'BaselineConfig':
        if self.iterations is not None:
            return self
        return replace(self, iterations=parity_iterations(meta_config))


@dataclass(frozen=True)
class BaselineProgress:
    iteration: int
    loss: float
    wall_ms: float

    def to_json(self) -> str:
        return json.dumps(asdict(self))


def parity_iterations(meta_config: MetaConfig) -> int:
    """メタ学習1回分と同じ勾配評価回数"""
    if meta_config.meta_batch_size is None:
        raise ValueError("meta_batch_size must be resolved before computing parity iterations")
    return meta_config.meta_iterations * meta_config.meta_batch_size * (meta_config.inner_steps_train + 1)


def merge_labels(dataset: Dataset, training_attributes: Sequence[str],
                 exclude_subjects: Sequence[str] = ()) -> MergedDataset:
    """
    指定属性のラベルの論理和をとる

    Args:
        dataset: データセット
        training_attributes: まとめる属性（順序と重複は無視）
        exclude_subjects: 除外する被験者（LOSO のテスト被験者）

    Returns:
        MergedDataset（いずれの属性にもラベルがない例は含まない）
    """
    attributes = sorted(set(training_attributes), key=dataset.attributes.index)
    if not attributes:
        raise BaselineError("merge_labels needs at least one training attribute")
    cols = [dataset.attribute_index(a) for a in attributes]

    sub = dataset.label_matrix[:, cols]
    labeled = (sub != UNLABELED).any(axis=1)
    merged = (sub == 1).any(axis=1).astype(np.int8)
    if exclude_subjects:
        excluded = np.isin(np.asarray(dataset.example_subjects, dtype=object), list(exclude_subjects))
        labeled &= ~excluded

    rows = np.flatnonzero(labeled)
    logger.info(
        f"Merged {len(attributes)} attributes over {len(rows)} examples "
        f"({int(merged[rows].sum())} positive)"
    )
    return MergedDataset(dataset, rows, merged[rows], tuple(attributes))


class BaselineTrainer:
    """クラス均衡ミニバッチによる通常学習"""

    def __init__(self, backbone_config: BackboneConfig, merged: MergedDataset, config: BaselineConfig,
                 progress_callback: Optional[Callable[[BaselineProgress], None]] = None,
                 show_progress: bool = False):
        if config.iterations is None:
            raise ValueError("BaselineConfig.iterations must be resolved before training")
        if len(merged) == 0:
            raise BaselineError("Merged dataset is empty")
        if len(merged.positive_rows) == 0 or len(merged.negative_rows) == 0:
            raise BaselineError(
                f"Merged dataset has a single class ({len(merged.positive_rows)} positive, "
                f"{len(merged.negative_rows)} negative); balanced batching is impossible"
            )
        self.backbone_config = backbone_config
        self.merged = merged
        self.config = config
        self.progress_callback = progress_callback
        self.show_progress = show_progress
        self.history: List[BaselineProgress] = []
        logger.info(f"BaselineTrainer initialized: {config.iterations} iterations, batch {2 * config.shots}")

    def _draw(self, rows: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        return rng.choice(rows, size=self.config.shots, replace=len(rows) < self.config.shots)

    def train(self, seed: Optional[int] = None) -> ParameterVector:
        cfg = self.config
        theta = backbone.init_params(self.backbone_config)
        if cfg.iterations == 0:
            return theta

        rng = np.random.default_rng(cfg.seed if seed is None else seed)
        optimizer = OuterOptimizer(theta, cfg.outer_optimizer, cfg.beta, cfg.adam_betas, cfg.adam_eps)
        pos, neg = self.merged.positive_rows, self.merged.negative_rows

        for iteration in tqdm(range(1, cfg.iterations + 1), desc='baseline', disable=not self.show_progress):
            started = time.perf_counter()
            rows = np.concatenate([self._draw(pos, rng), self._draw(neg, rng)])
            value, grad = backbone.value_and_grad(theta, self.merged.batch(rows))
            theta = optimizer.step(grad)

            record = BaselineProgress(iteration, value, (time.perf_counter() - started) * 1000.0)
            self.history.append(record)
            if self.progress_callback:
                self.progress_callback(record)

        logger.info(f"Baseline training finished: final batch loss {self.history[-1].loss:.4f}")
        return theta


def train_baseline(backbone_config: BackboneConfig, merged: MergedDataset, config: BaselineConfig,
                   seed: Optional[int] = None,
                   progress_callback: Optional[Callable[[BaselineProgress], None]] = None,
                   show_progress: bool = False) -> ParameterVector:
    """BaselineTrainer を作って学習し、θ を返す"""
    return BaselineTrainer(backbone_config, merged, config, progress_callback, show_progress).train(seed)
