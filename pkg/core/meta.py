"""
MAML 学習ループ

タスクごとの内側更新（サポート集合での勾配降下）と、
適応後パラメータのクエリ損失の総和に対する外側更新を行う。
厳密モードでは内側更新を通して微分し、ヘッセ行列ベクトル積で
二次の項を各ステップに連鎖させる。
"""
import json
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, replace
from typing import TYPE_CHECKING, Callable, Iterable, List, Optional, Protocol, Sequence, Tuple

import numpy as np
import torch
from tqdm import tqdm

from core import backbone
from core.backbone import BackboneConfig, LabeledBatch, ParameterVector
from utils.logger import get_logger

if TYPE_CHECKING:
    from core.taskbank import TaskId

logger = get_logger(__name__)

GRADIENT_ORDERS = ('exact', 'first_order')
OUTER_OPTIMIZERS = ('sgd', 'adam')


class TaskSourceExhausted(RuntimeError):
    """タスク供給元が必要数のタスクを出せない"""


class MetaTrainingError(RuntimeError):
    """メタ学習中のエラー（発生したイテレーション番号を保持）"""

    def __init__(self, iteration: int, message: str):
        super().__init__(f"Meta-training failed at iteration {iteration}: {message}")
        self.iteration = iteration


@dataclass(frozen=True)
class MetaConfig:
    """
    メタ学習設定

    meta_batch_size が None の場合はデータセットの属性数を使う。
    validate_every > 0 かつ patience > 0 で検証損失による早期終了を有効にする。
    """
    alpha: float = 0.03
    beta: float = 0.03
    inner_steps_train: int = 1
    meta_batch_size: Optional[int] = None
    gradient_order: str = 'exact'
    outer_optimizer: str = 'adam'
    adam_betas: Tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    meta_iterations: int = 2000
    shots_train: int = 5
    seed: int = 0
    validate_every: int = 0
    patience: int = 0
    workers: int = 1

    def __post_init__(self):
        object.__setattr__(self, 'adam_betas', tuple(float(b) for b in self.adam_betas))
        self.validate()

    def validate(self):
        if not self.alpha > 0:
            raise ValueError(f"alpha must be > 0, got {self.alpha}")
        if not self.beta > 0:
            raise ValueError(f"beta must be > 0, got {self.beta}")
        if self.inner_steps_train < 1:
            raise ValueError(f"inner_steps_train must be >= 1, got {self.inner_steps_train}")
        if self.meta_batch_size is not None and self.meta_batch_size < 1:
            raise ValueError(f"meta_batch_size must be >= 1, got {self.meta_batch_size}")
        if self.gradient_order not in GRADIENT_ORDERS:
            raise ValueError(f"gradient_order must be one of {GRADIENT_ORDERS}, got {self.gradient_order!r}")
        if self.outer_optimizer not in OUTER_OPTIMIZERS:
            raise ValueError(f"outer_optimizer must be one of {OUTER_OPTIMIZERS}, got {self.outer_optimizer!r}")
        if len(self.adam_betas) != 2 or not all(0.0 <= b < 1.0 for b in self.adam_betas):
            raise ValueError(f"adam_betas must be two values in [0, 1), got {self.adam_betas}")
        if self.meta_iterations < 0:
            raise ValueError(f"meta_iterations must be >= 0, got {self.meta_iterations}")
        if self.shots_train < 1:
            raise ValueError(f"shots_train must be >= 1, got {self.shots_train}")
        if self.seed < 0 or self.validate_every < 0 or self.patience < 0:
            raise ValueError("seed, validate_every and patience must be >= 0")
        if self.workers < 1:
            raise ValueError(f"workers must be >= 1, got {self.workers}")

    def resolved(self, n_attributes: int) -> 'MetaConfig':
        """meta_batch_size 未指定ならば属性数で埋めた設定を返す"""
        if self.meta_batch_size is not None:
            return self
        return replace(self, meta_batch_size=int(n_attributes))


@dataclass(frozen=True, eq=False)
class TaskEpisode:
    """1タスク分のサポート集合とクエリ集合"""
    task: 'TaskId'
    support: LabeledBatch
    query: LabeledBatch

    def __post_init__(self):
        for name, batch in (('support', self.support), ('query', self.query)):
            if batch.n_positive != batch.n_negative:
                raise ValueError(
                    f"{name} set of {self.task} is not class-balanced "
                    f"({batch.n_positive}+ / {batch.n_negative}-)"
                )
        if self.support.example_ids and self.query.example_ids:
            shared = set(self.support.example_ids) & set(self.query.example_ids)
            if shared:
                raise ValueError(f"support and query of {self.task} share examples: {sorted(shared)[:5]}")


class LossObjective(Protocol):
    """内側・外側ループが必要とする損失のインターフェース"""

    def value_and_grad(self, params: ParameterVector, batch: LabeledBatch) -> Tuple[float, ParameterVector]:
        ...

    def hessian_vector_product(self, params: ParameterVector, batch: LabeledBatch,
                               v: ParameterVector) -> ParameterVector:
        ...


class BackboneObjective:
    """バックボーンの二値交差エントロピー"""

    def value_and_grad(self, params: ParameterVector, batch: LabeledBatch) -> Tuple[float, ParameterVector]:
        return backbone.value_and_grad(params, batch)

    def hessian_vector_product(self, params: ParameterVector, batch: LabeledBatch,
                               v: ParameterVector) -> ParameterVector:
        return backbone.hessian_vector_product(params, batch, v)


DEFAULT_OBJECTIVE = BackboneObjective()


@dataclass(frozen=True)
class ProgressRecord:
    """1イテレーション分の診断値"""
    iteration: int
    mean_support_loss: float
    mean_query_loss: float
    wall_ms: float

    def to_json(self) -> str:
        return json.dumps(asdict(self))


@dataclass(frozen=True, eq=False)
class MetaStep:
    """メタ勾配とその計算中に得た損失の平均"""
    grad: ParameterVector
    mean_support_loss: float
    mean_query_loss: float


@dataclass(frozen=True, eq=False)
class _TaskContribution:
    grad: ParameterVector
    support_loss: float
    query_loss: float


def inner_update(params: ParameterVector, support: LabeledBatch, alpha: float, steps: int,
                 objective: Optional[LossObjective] = None) -> ParameterVector:
    """
    内側更新 θ ← θ - α∇L(θ; support) を steps 回繰り返す

    Args:
        params: 初期パラメータ
        support: サポート集合
        alpha: ステップ幅
        steps: 勾配ステップ数（0 なら params をそのまま返す）
        objective: 損失（省略時はバックボーンの BCE）

    Returns:
        更新後のパラメータ
    """
    if steps < 0:
        raise ValueError(f"steps must be >= 0, got {steps}")
    objective = objective or DEFAULT_OBJECTIVE
    theta = params
    for _ in range(steps):
        _, grad = objective.value_and_grad(theta, support)
        theta = theta - alpha * grad
    return theta


def adapt(theta: ParameterVector, support: LabeledBatch, alpha: float = 0.03, steps: int = 5,
          objective: Optional[LossObjective] = None) -> ParameterVector:
    """新しいタスクへの適応（テスト時の inner_update）"""
    return inner_update(theta, support, alpha, steps, objective)


def _task_contribution(params: ParameterVector, episode: TaskEpisode, alpha: float, steps: int,
                       order: str, objective: LossObjective) -> _TaskContribution:
    trajectory = [params]
    support_loss = None
    for _ in range(steps):
        value, grad = objective.value_and_grad(trajectory[-1], episode.support)
        if support_loss is None:
            support_loss = value
        trajectory.append(trajectory[-1] - alpha * grad)
    if support_loss is None:
        support_loss, _ = objective.value_and_grad(params, episode.support)

    query_loss, grad = objective.value_and_grad(trajectory[-1], episode.query)

    if order == 'exact':
        # d θ_{j+1} / d θ_j = I - α H(θ_j) を最後のステップから順に掛ける
        for theta_j in reversed(trajectory[:-1]):
            grad = grad - alpha * objective.hessian_vector_product(theta_j, episode.support, grad)

    return _TaskContribution(grad, float(support_loss), float(query_loss))


def map_ordered(fn: Callable, items: Sequence, workers: int) -> List:
    # 並列実行しても結果は入力順で返す
    if workers <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def meta_gradient_step(params: ParameterVector, episodes: Sequence[TaskEpisode], alpha: float,
                       inner_steps: int, order: str = 'exact', objective: Optional[LossObjective] = None,
                       workers: int = 1) -> MetaStep:
    """meta_gradient と同じ計算を行い、損失の平均も返す"""
    if not episodes:
        raise ValueError("meta_gradient needs at least one episode")
    if order not in GRADIENT_ORDERS:
        raise ValueError(f"order must be one of {GRADIENT_ORDERS}, got {order!r}")
    if inner_steps < 0:
        raise ValueError(f"inner_steps must be >= 0, got {inner_steps}")
    objective = objective or DEFAULT_OBJECTIVE

    contributions = map_ordered(
        lambda episode: _task_contribution(params, episode, alpha, inner_steps, order, objective),
        list(episodes),
        workers,
    )

    # タスク番号順に足し合わせる
    total = contributions[0].grad
    for contribution in contributions[1:]:
        total = total + contribution.grad

    return MetaStep(
        grad=total,
        mean_support_loss=float(np.mean([c.support_loss for c in contributions])),
        mean_query_loss=float(np.mean([c.query_loss for c in contributions])),
    )


def meta_gradient(params: ParameterVector, episodes: Sequence[TaskEpisode], alpha: float, inner_steps: int,
                  order: str = 'exact', objective: Optional[LossObjective] = None,
                  workers: int = 1) -> ParameterVector:
    """
    元の θ に関する Σ_i L(θ_i; query_i) の勾配

    θ_i = inner_update(θ, support_i)。first_order ではヘッセ行列の項を落とす。
    """
    return meta_gradient_step(params, episodes, alpha, inner_steps, order, objective, workers).grad


class OuterOptimizer:
    """外側ループの最適化器（torch.optim の Adam / SGD をフラットなベクトルに適用）"""

    def __init__(self, params: ParameterVector, kind: str = 'adam', lr: float = 0.03,
                 betas: Tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        if kind not in OUTER_OPTIMIZERS:
            raise ValueError(f"outer optimizer must be one of {OUTER_OPTIMIZERS}, got {kind!r}")
        self.kind = kind
        self._layout = params.layout
        self._tensor = params.values.detach().clone().requires_grad_(True)
        if kind == 'adam':
            self._optimizer = torch.optim.Adam([self._tensor], lr=lr, betas=betas, eps=eps)
        else:
            self._optimizer = torch.optim.SGD([self._tensor], lr=lr)

    def step(self, grad: ParameterVector) -> ParameterVector:
        """勾配を1回適用して新しいパラメータを返す"""
        self._tensor.grad = grad.values.detach().to(self._tensor.dtype).clone()
        self._optimizer.step()
        self._optimizer.zero_grad(set_to_none=True)
        return self.current()

    def current(self) -> ParameterVector:
        return ParameterVector(self._tensor.detach().clone(), self._layout)


class MetaTrainer:
    """MAML の学習フェーズを実行"""

    def __init__(self, backbone_config: BackboneConfig, meta_config: MetaConfig, task_source,
                 progress_callback: Optional[Callable[[ProgressRecord], None]] = None,
                 validation_source=None, objective: Optional[LossObjective] = None,
                 show_progress: bool = False):
        """
        Args:
            backbone_config: バックボーン設定
            meta_config: メタ学習設定
            task_source: sample_batch(count, rng) でエピソードのリストを返す供給元
            progress_callback: イテレーションごとに ProgressRecord を受け取るコールバック
            validation_source: 早期終了用の検証エピソード供給元（省略可）
            objective: 損失（省略時はバックボーンの BCE）
            show_progress: tqdm の進捗バーを表示するか
        """
        self.backbone_config = backbone_config
        self.meta_config = meta_config
        self.task_source = task_source
        self.progress_callback = progress_callback
        self.validation_source = validation_source
        self.objective = objective or DEFAULT_OBJECTIVE
        self.show_progress = show_progress
        self.history: List[ProgressRecord] = []
        self.validation_history: List[Tuple[int, float]] = []

        batch_size = meta_config.meta_batch_size
        if batch_size is None:
            batch_size = getattr(task_source, 'default_batch_size', None)
        if batch_size is None:
            raise ValueError("meta_batch_size is unset and the task source gives no default")
        self.batch_size = int(batch_size)

        logger.info(
            f"MetaTrainer initialized: {meta_config.meta_iterations} iterations, |T|={self.batch_size}, "
            f"alpha={meta_config.alpha}, beta={meta_config.beta}, order={meta_config.gradient_order}, "
            f"outer={meta_config.outer_optimizer}"
        )

    def train(self, init: Optional[ParameterVector] = None) -> ParameterVector:
        """
        メタ学習を実行

        Args:
            init: 初期パラメータ（省略時は init_params(backbone_config)）

        Returns:
            学習後の θ（早期終了が有効な場合は検証損失が最良の θ）
        """
        cfg = self.meta_config
        theta = init if init is not None else backbone.init_params(self.backbone_config)
        if cfg.meta_iterations == 0:
            return theta

        rng = np.random.default_rng(cfg.seed)
        optimizer = OuterOptimizer(theta, cfg.outer_optimizer, cfg.beta, cfg.adam_betas, cfg.adam_eps)

        validation_episodes = self._validation_episodes()
        early_stop = bool(validation_episodes) and cfg.validate_every > 0
        best_loss = math.inf
        best_theta = theta
        stale_checks = 0

        iterations = tqdm(range(1, cfg.meta_iterations + 1), desc='meta-train', disable=not self.show_progress)
        for iteration in iterations:
            started = time.perf_counter()
            try:
                episodes = self.task_source.sample_batch(self.batch_size, rng)
            except (TaskSourceExhausted, ValueError) as e:
                logger.error(f"Task source failed at iteration {iteration}: {e}")
                raise MetaTrainingError(iteration, str(e)) from e

            step = meta_gradient_step(
                theta, episodes, cfg.alpha, cfg.inner_steps_train, cfg.gradient_order,
                self.objective, cfg.workers,
            )
            try:
                theta = optimizer.step(step.grad)
            except ValueError as e:
                logger.error(f"Outer update diverged at iteration {iteration}: {e}")
                raise MetaTrainingError(iteration, str(e)) from e

            record = ProgressRecord(
                iteration=iteration,
                mean_support_loss=step.mean_support_loss,
                mean_query_loss=step.mean_query_loss,
                wall_ms=(time.perf_counter() - started) * 1000.0,
            )
            self.history.append(record)
            if self.progress_callback:
                self.progress_callback(record)
            logger.debug(
                f"iter {iteration}: support={record.mean_support_loss:.4f} query={record.mean_query_loss:.4f}"
            )

            if early_stop and iteration % cfg.validate_every == 0:
                val_loss = self.validation_loss(theta, validation_episodes)
                self.validation_history.append((iteration, val_loss))
                if val_loss < best_loss:
                    best_loss, best_theta, stale_checks = val_loss, theta, 0
                else:
                    stale_checks += 1
                    if cfg.patience and stale_checks >= cfg.patience:
                        logger.info(f"Early stop at iteration {iteration} (best validation loss {best_loss:.4f})")
                        return best_theta

        if early_stop and best_loss < math.inf:
            return best_theta
        return theta

    def _validation_episodes(self) -> List[TaskEpisode]:
        if self.validation_source is None or self.meta_config.validate_every == 0:
            return []
        # 検証エピソードは学習用とは別の乱数系列で一度だけ引く
        rng = np.random.default_rng([self.meta_config.seed, 1])
        count = min(self.batch_size, getattr(self.validation_source, 'n_tasks', self.batch_size))
        return list(self.validation_source.sample_batch(count, rng))

    def validation_loss(self, theta: ParameterVector, episodes: Iterable[TaskEpisode]) -> float:
        """適応後パラメータでのクエリ損失の平均"""
        losses = []
        for episode in episodes:
            adapted = inner_update(theta, episode.support, self.meta_config.alpha,
                                   self.meta_config.inner_steps_train, self.objective)
            value, _ = self.objective.value_and_grad(adapted, episode.query)
            losses.append(value)
        return float(np.mean(losses))


def meta_train(backbone_config: BackboneConfig, meta_config: MetaConfig, task_source,
               progress_sink: Optional[Callable[[ProgressRecord], None]] = None,
               **kwargs) -> ParameterVector:
    """MetaTrainer を作って学習し、最終的な θ を返す"""
    return MetaTrainer(backbone_config, meta_config, task_source, progress_sink, **kwargs).train()
