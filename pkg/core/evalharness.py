"""
K-shot 適応評価

タスクごとに「K+K 例で G ステップ適応し、別の E+E 例で正解率を測る」を
repetitions 回繰り返し、属性別・被験者別に集計する。
メタ学習モデルとベースラインは与える θ だけが異なり、同じ経路・同じ乱数系列で評価される。
"""
import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from tqdm import tqdm

from config import Config
from core import backbone
from core.backbone import LabeledBatch, ParameterVector, ShapeMismatchError
from core.meta import adapt, inner_update, map_ordered
from core.taskbank import (
    Dataset,
    InsufficientExamplesError,
    TaskId,
    UnknownTaskError,
    enumerate_tasks,
    sample_adaptation_pair,
)
from utils.fileio import atomic_write_text
from utils.logger import get_logger

logger = get_logger(__name__)

TASK_COLUMNS = ['model', 'task', 'subject', 'attribute', 'K', 'steps', 'mean_acc', 'std_acc', 'n_reps', 'novel']


class EvaluationError(RuntimeError):
    """タスクの評価に失敗（対象タスクを保持）"""

    def __init__(self, task: TaskId, message: str):
        super().__init__(f"Evaluation of task {task} failed: {message}")
        self.task = task


class MissingFoldError(RuntimeError):
    """フォールドに対応する θ がない"""

    def __init__(self, model: str, fold: str):
        super().__init__(f"No {model} parameters for fold {fold!r}")
        self.model = model
        self.fold = fold


@dataclass(frozen=True)
class EvalConfig:
    """
    評価設定

    K: クラスあたりの適応用例数
    G: 適応の勾配ステップ数（0 なら適応しない）
    repetitions: 1タスクあたりの繰り返し回数
    eval_per_class: 評価集合のクラスあたり例数
    """
    K: int = 5
    G: int = 5
    repetitions: int = 500
    eval_per_class: int = 10
    alpha: float = 0.03
    seed: int = 0
    workers: int = 1

    def __post_init__(self):
        self.validate()

    def validate(self):
        for name in ('K', 'repetitions', 'eval_per_class', 'workers'):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.G < 0:
            raise ValueError(f"G must be >= 0, got {self.G}")
        if self.alpha < 0:
            raise ValueError(f"alpha must be >= 0, got {self.alpha}")
        if self.seed < 0:
            raise ValueError(f"seed must be >= 0, got {self.seed}")


@dataclass(frozen=True, eq=False)
class RepetitionTrace:
    """1回の適応・評価の記録"""
    task: TaskId
    repetition: int
    K: int
    steps: int
    support_ids: Tuple[str, ...]
    eval_ids: Tuple[str, ...]
    predictions: Tuple[int, ...]
    labels: Tuple[int, ...]

    @property
    def accuracy(self) -> float:
        return float(np.mean(np.asarray(self.predictions) == np.asarray(self.labels)))


def repetition_rng(seed: int, dataset: Dataset, task: TaskId, repetition: int) -> np.random.Generator:
    """(seed, 被験者番号, 属性番号, 繰り返し番号) から決まる乱数系列"""
    subject_idx = dataset.subjects.index(task.subject_id)
    attribute_idx = dataset.attribute_index(task.attribute_id)
    return np.random.default_rng([seed, subject_idx, attribute_idx, repetition])


def predict(theta: ParameterVector, batch: LabeledBatch) -> np.ndarray:
    """確率が 0.5 を超えた例を陽性とする（ちょうど 0.5 は陰性）"""
    probs = backbone.forward(theta, batch, mode='eval')
    return (probs > Config.PREDICTION_THRESHOLD).astype(np.int64)


def _draw(dataset: Dataset, task: TaskId, config: EvalConfig,
          repetition: int) -> Tuple[LabeledBatch, LabeledBatch]:
    rng = repetition_rng(config.seed, dataset, task, repetition)
    try:
        return sample_adaptation_pair(dataset, task, config.K, config.eval_per_class, rng)
    except (InsufficientExamplesError, UnknownTaskError) as e:
        logger.error(f"Cannot draw adaptation pair for {task}: {e}")
        raise EvaluationError(task, str(e)) from e


def _trace(task: TaskId, repetition: int, config: EvalConfig, steps: int, support: LabeledBatch,
           evalset: LabeledBatch, predictions: np.ndarray) -> RepetitionTrace:
    return RepetitionTrace(
        task=task,
        repetition=repetition,
        K=config.K,
        steps=steps,
        support_ids=support.example_ids,
        eval_ids=evalset.example_ids,
        predictions=tuple(int(p) for p in predictions),
        labels=tuple(int(y) for y in evalset.labels),
    )


def evaluate_task(theta: ParameterVector, dataset: Dataset, task: TaskId, eval_config: EvalConfig,
                  trace: Optional[List[RepetitionTrace]] = None) -> np.ndarray:
    """
    1タスクの K-shot 適応評価

    Args:
        theta: 適応前のパラメータ
        dataset: データセット
        task: 対象タスク
        eval_config: 評価設定
        trace: 指定すると繰り返しごとの RepetitionTrace を順に追加する

    Returns:
        繰り返しごとの正解率（長さ repetitions）

    Raises:
        EvaluationError: 適応用・評価用の例を引けない
    """
    cfg = eval_config

    def run(repetition: int) -> RepetitionTrace:
        support, evalset = _draw(dataset, task, cfg, repetition)
        adapted = adapt(theta, support, cfg.alpha, cfg.G)
        return _trace(task, repetition, cfg, cfg.G, support, evalset, predict(adapted, evalset))

    records = map_ordered(run, list(range(cfg.repetitions)), cfg.workers)
    if trace is not None:
        trace.extend(records)
    return np.array([r.accuracy for r in records], dtype=np.float64)


@dataclass(frozen=True, eq=False)
class EvalReport:
    """
    評価結果

    accuracies は (タスク, K) ごとの繰り返し正解率。集計値はすべてここから計算する。
    """
    model: str
    steps: int
    accuracies: Dict[Tuple[TaskId, int], np.ndarray]
    novel_attributes: Tuple[str, ...] = ()

    @property
    def shots(self) -> Tuple[int, ...]:
        return tuple(sorted({k for _, k in self.accuracies}))

    def task_table(self) -> pd.DataFrame:
        """タスクごとの平均・標準偏差"""
        novel = set(self.novel_attributes)
        records = []
        for (task, k), accs in self.accuracies.items():
            records.append({
                'model': self.model,
                'task': str(task),
                'subject': task.subject_id,
                'attribute': task.attribute_id,
                'K': k,
                'steps': self.steps,
                'mean_acc': float(np.mean(accs)),
                'std_acc': float(np.std(accs)),
                'n_reps': len(accs),
                'novel': task.attribute_id in novel,
            })
        return pd.DataFrame.from_records(records, columns=TASK_COLUMNS)

    def per_attribute(self) -> pd.DataFrame:
        """属性ごとの被験者平均"""
        table = self.task_table()
        return (table.groupby(['K', 'attribute'], sort=False)['mean_acc']
                .agg(mean_acc='mean', n_subjects='count').reset_index())

    def per_subject(self) -> pd.DataFrame:
        """被験者ごとの属性平均"""
        table = self.task_table()
        return (table.groupby(['K', 'subject'], sort=False)['mean_acc']
                .agg(mean_acc='mean', n_attributes='count').reset_index())

    def grand_mean(self, K: Optional[int] = None) -> float:
        """タスク平均の平均（K を省略できるのは K が1種類のときのみ）"""
        if K is None:
            if len(self.shots) != 1:
                raise ValueError(f"Report covers K={list(self.shots)}; pass K explicitly")
            K = self.shots[0]
        means = [float(np.mean(a)) for (_, k), a in self.accuracies.items() if k == K]
        if not means:
            raise KeyError(f"Report has no entries for K={K}")
        return float(np.mean(means))

    def summary(self) -> dict:
        """JSON 用の要約"""
        per_attribute = self.per_attribute()
        per_subject = self.per_subject()
        return {
            'model': self.model,
            'steps': self.steps,
            'novel_attributes': list(self.novel_attributes),
            'shots': {
                str(k): {
                    'grand_mean': self.grand_mean(k),
                    'n_tasks': int(sum(1 for _, kk in self.accuracies if kk == k)),
                    'per_attribute': dict(zip(
                        per_attribute.loc[per_attribute['K'] == k, 'attribute'],
                        per_attribute.loc[per_attribute['K'] == k, 'mean_acc'].astype(float),
                    )),
                    'per_subject': dict(zip(
                        per_subject.loc[per_subject['K'] == k, 'subject'],
                        per_subject.loc[per_subject['K'] == k, 'mean_acc'].astype(float),
                    )),
                }
                for k in self.shots
            },
        }


@dataclass(frozen=True, eq=False)
class ReportPair:
    """同じ評価手順で得たメタ学習モデルとベースラインの結果"""
    meta: EvalReport
    baseline: EvalReport

    def __iter__(self):
        return iter((self.meta, self.baseline))


def _shots_of(eval_config: EvalConfig, shots: Optional[Sequence[int]]) -> Tuple[int, ...]:
    values = tuple(shots) if shots else (eval_config.K,)
    if any(k < 1 for k in values):
        raise ValueError(f"shots must be >= 1, got {list(values)}")
    return values


def _evaluate_tasks(model: str, theta_for, dataset: Dataset, tasks: Sequence[TaskId], eval_config: EvalConfig,
                    shots: Sequence[int], trace: Optional[List[RepetitionTrace]],
                    novel_attributes: Sequence[str] = (), show_progress: bool = False) -> EvalReport:
    accuracies: Dict[Tuple[TaskId, int], np.ndarray] = {}
    jobs = [(task, k) for k in shots for task in tasks]
    for task, k in tqdm(jobs, desc=f'eval {model}', disable=not show_progress):
        accuracies[(task, k)] = evaluate_task(theta_for(task), dataset, task, replace(eval_config, K=k), trace)
    report = EvalReport(model, eval_config.G, accuracies, tuple(novel_attributes))
    for k in report.shots:
        logger.info(f"{model} K={k}: grand mean accuracy {report.grand_mean(k):.4f} over {len(tasks)} tasks")
    return report


def run_loso(dataset: Dataset, meta_theta_per_fold: Mapping[str, ParameterVector],
             baseline_theta_per_fold: Mapping[str, ParameterVector], eval_config: EvalConfig,
             shots: Optional[Sequence[int]] = None, folds: Optional[Sequence[str]] = None,
             trace: Optional[Dict[str, List[RepetitionTrace]]] = None,
             show_progress: bool = False) -> ReportPair:
    """
    leave-one-subject-out 評価

    各フォールドで、テスト被験者の全タスクをそのフォールドの θ から適応・評価する。

    Args:
        dataset: データセット
        meta_theta_per_fold: {テスト被験者: メタ学習の θ}
        baseline_theta_per_fold: {テスト被験者: ベースラインの θ}
        eval_config: 評価設定
        shots: 評価する K の一覧（省略時は eval_config.K のみ）
        folds: 評価するフォールド（省略時は全被験者）
        trace: {'meta': [...], 'baseline': [...]} を渡すと記録を追加する

    Returns:
        ReportPair

    Raises:
        MissingFoldError: いずれかのフォールドの θ がない
    """
    folds = tuple(folds) if folds is not None else dataset.subjects
    shots = _shots_of(eval_config, shots)
    for model, thetas in (('meta', meta_theta_per_fold), ('baseline', baseline_theta_per_fold)):
        for fold in folds:
            if fold not in thetas:
                logger.error(f"Missing {model} parameters for fold {fold}")
                raise MissingFoldError(model, fold)

    tasks = [task for fold in folds for task in enumerate_tasks(dataset, fold).test_tasks]
    logger.info(f"LOSO evaluation: {len(folds)} folds, {len(tasks)} test tasks, K={list(shots)}, G={eval_config.G}")

    trace = trace if trace is not None else {}
    reports = [
        _evaluate_tasks(model, lambda task, t=thetas: t[task.subject_id], dataset, tasks, eval_config, shots,
                        trace.get(model), show_progress=show_progress)
        for model, thetas in (('meta', meta_theta_per_fold), ('baseline', baseline_theta_per_fold))
    ]
    return ReportPair(*reports)


def cross_bank_eval(theta: ParameterVector, dataset: Dataset, source_attributes: Sequence[str],
                    eval_config: EvalConfig, shots: Optional[Sequence[int]] = None, model: str = 'meta',
                    trace: Optional[List[RepetitionTrace]] = None, show_progress: bool = False) -> EvalReport:
    """
    別のデータセットで学習した θ を、このデータセットの全タスクで適応・評価する

    Args:
        theta: 学習元データセットで学習した θ
        dataset: 評価先データセット
        source_attributes: 学習元の属性（含まれない属性を novel とする）

    Raises:
        ShapeMismatchError: 入力形状が θ の設定と一致しない
    """
    config = theta.layout.config
    if config is not None and tuple(config.input_shape) != dataset.input_shape:
        logger.error(f"Input shape mismatch: parameters expect {config.input_shape}, dataset has {dataset.input_shape}")
        raise ShapeMismatchError(
            f"Parameters expect example shape {tuple(config.input_shape)}, dataset provides {dataset.input_shape}"
        )
    source = set(source_attributes)
    novel = tuple(a for a in dataset.attributes if a not in source)
    if novel:
        logger.info(f"Novel attributes in target bank: {list(novel)}")
    return _evaluate_tasks(model, lambda task: theta, dataset, dataset.tasks(), eval_config,
                           _shots_of(eval_config, shots), trace, novel, show_progress)


def compare_reports(reports: Sequence[EvalReport]) -> pd.DataFrame:
    """
    属性ごとの比較表（列は モデル_K、最終行は AVG）

    AVG 行は各列の全タスク平均（grand_mean）。
    """
    columns = {}
    attributes: List[str] = []
    for report in reports:
        per_attribute = report.per_attribute()
        for k in report.shots:
            rows = per_attribute[per_attribute['K'] == k]
            columns[f"{report.model}_K{k}"] = pd.Series(rows['mean_acc'].to_numpy(), index=rows['attribute'].to_numpy())
            attributes.extend(a for a in rows['attribute'] if a not in attributes)
    table = pd.DataFrame(columns).reindex(attributes)
    avg = {f"{report.model}_K{k}": report.grand_mean(k) for report in reports for k in report.shots}
    table.loc['AVG'] = pd.Series(avg)
    table.index.name = 'attribute'
    return table.reset_index()


def subject_comparison(pair: ReportPair, K: int) -> pd.DataFrame:
    """被験者ごとのベースライン・メタ学習の平均と差（gain = meta - baseline）"""
    meta = pair.meta.per_subject()
    baseline = pair.baseline.per_subject()
    meta = meta[meta['K'] == K].set_index('subject')['mean_acc']
    baseline = baseline[baseline['K'] == K].set_index('subject')['mean_acc']
    table = pd.DataFrame({'baseline': baseline, 'meta': meta})
    table['gain'] = table['meta'] - table['baseline']
    table.index.name = 'subject'
    return table.reset_index()


def novelty_summary(report: EvalReport) -> pd.DataFrame:
    """学習元にもあった属性と新しい属性に分けた平均"""
    table = report.task_table()
    table['group'] = np.where(table['novel'], 'novel', 'shared')
    return (table.groupby(['K', 'group'])['mean_acc']
            .agg(mean_acc='mean', n_tasks='count').reset_index())


@dataclass(eq=False)
class SweepCurve:
    """(K, ステップ数) ごとの正解率（タスク・繰り返しをまとめた生の値）"""
    model: str
    max_steps: int
    accuracies: Dict[Tuple[int, int], List[float]] = field(default_factory=dict)

    def add(self, K: int, step: int, values: Iterable[float]):
        self.accuracies.setdefault((K, step), []).extend(float(v) for v in values)

    def merge(self, other: 'SweepCurve') -> 'SweepCurve':
        if other.max_steps != self.max_steps:
            raise ValueError(f"Cannot merge sweeps with max_steps {self.max_steps} and {other.max_steps}")
        merged = SweepCurve(self.model, self.max_steps)
        for curve in (self, other):
            for (k, step), values in curve.accuracies.items():
                merged.add(k, step, values)
        return merged

    def mean(self, K: int, step: int) -> float:
        return float(np.mean(self.accuracies[(K, step)]))

    def table(self) -> pd.DataFrame:
        """K, step ごとに1行（行数は (max_steps + 1) × K の種類数）"""
        records = [
            {'model': self.model, 'K': k, 'step': step, 'mean_acc': float(np.mean(values)),
             'std_acc': float(np.std(values)), 'n': len(values)}
            for (k, step), values in sorted(self.accuracies.items())
        ]
        return pd.DataFrame.from_records(records, columns=['model', 'K', 'step', 'mean_acc', 'std_acc', 'n'])


def gradient_step_sweep(theta: Union[ParameterVector, Mapping[str, ParameterVector]], dataset: Dataset,
                        tasks: Sequence[TaskId], K_values: Sequence[int], max_steps: int,
                        eval_config: EvalConfig, model: str = 'meta',
                        show_progress: bool = False) -> SweepCurve:
    """
    適応ステップ数ごとの正解率

    繰り返しごとに1本の適応軌道をたどり、0〜max_steps の各ステップで評価集合の正解率を測る。
    乱数系列は evaluate_task と同じなので、ステップ 0 は G=0 の evaluate_task と一致する。

    Args:
        theta: θ、または {被験者: θ}（LOSO の各フォールドを使う場合）
        tasks: 対象タスク
        K_values: K の一覧
        max_steps: 最大ステップ数（1以上）
    """
    if max_steps < 1:
        raise ValueError(f"max_steps must be >= 1, got {max_steps}")
    if not tasks:
        raise ValueError("gradient_step_sweep needs at least one task")

    def theta_for(task: TaskId) -> ParameterVector:
        if isinstance(theta, ParameterVector):
            return theta
        if task.subject_id not in theta:
            raise MissingFoldError(model, task.subject_id)
        return theta[task.subject_id]

    curve = SweepCurve(model, max_steps)
    jobs = [(k, task) for k in K_values for task in tasks]
    for k, task in tqdm(jobs, desc=f'sweep {model}', disable=not show_progress):
        cfg = replace(eval_config, K=k)
        start = theta_for(task)

        def run(repetition: int) -> List[float]:
            support, evalset = _draw(dataset, task, cfg, repetition)
            current = start
            accs = [float(np.mean(predict(current, evalset) == evalset.labels))]
            for _ in range(max_steps):
                current = inner_update(current, support, cfg.alpha, 1)
                accs.append(float(np.mean(predict(current, evalset) == evalset.labels)))
            return accs

        per_rep = np.array(map_ordered(run, list(range(cfg.repetitions)), cfg.workers))
        for step in range(max_steps + 1):
            curve.add(k, step, per_rep[:, step])

    for k in K_values:
        logger.info(f"Sweep {model} K={k}: step 0 {curve.mean(k, 0):.4f} -> step {max_steps} {curve.mean(k, max_steps):.4f}")
    return curve


def write_task_csv(reports: Sequence[EvalReport], path: Union[str, Path]) -> Path:
    """タスクごとの表を1つの CSV にまとめて書き出す"""
    table = pd.concat([r.task_table() for r in reports], ignore_index=True)
    return atomic_write_text(Path(path), table.to_csv(index=False, lineterminator='\n',
                                                      float_format=Config.REPORT_FLOAT_FORMAT))


def write_table_csv(table: pd.DataFrame, path: Union[str, Path]) -> Path:
    return atomic_write_text(Path(path), table.to_csv(index=False, lineterminator='\n',
                                                      float_format=Config.REPORT_FLOAT_FORMAT))


def write_summary_json(summary: dict, path: Union[str, Path]) -> Path:
    return atomic_write_text(Path(path), json.dumps(summary, indent=2, sort_keys=True) + '\n')
