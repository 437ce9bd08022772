"""
タスクバンク

(被験者 × 属性) の組をタスクとして扱うデータセットモデル、マニフェストの読み書き、
leave-one-subject-out 分割、クラス均衡なエピソードサンプリングを提供する。
"""
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from config import Config
from core.backbone import LabeledBatch
from core.image_scanner import ImageScanner
from core.meta import TaskEpisode, TaskSourceExhausted
from utils.fileio import atomic_write_bytes, atomic_write_text
from utils.logger import get_logger

logger = get_logger(__name__)

LABEL_MODES = ('binary', 'intensity')
MAX_INTENSITY = 5
UNLABELED = -1


class ManifestError(ValueError):
    """マニフェストの検証エラー（ファイルと行番号を保持）"""

    def __init__(self, message: str, path: Optional[Path] = None, line: Optional[int] = None):
        location = ''
        if path is not None:
            location = f"{path}"
            if line is not None:
                location += f":{line}"
            location += ': '
        super().__init__(f"{location}{message}")
        self.path = path
        self.line = line


class ManifestFileMissingError(ManifestError, FileNotFoundError):
    """マニフェストのファイルが存在しない"""


class DuplicateExampleError(ManifestError):
    """example_id の重複"""


class UnknownReferenceError(ManifestError):
    """存在しない ID を参照している"""


class IntensityRangeError(ValueError):
    """強度が 0〜5 の範囲外"""


class UnknownSubjectError(ValueError):
    """データセットにない被験者"""


class UnknownTaskError(ValueError):
    """データセットにないタスク"""


class InsufficientExamplesError(ValueError):
    """タスクの例数が足りない"""


@dataclass(frozen=True, order=True)
class TaskId:
    """(被験者, 属性) の組"""
    subject_id: str
    attribute_id: str

    def __str__(self) -> str:
        return f"{self.subject_id}/{self.attribute_id}"


@dataclass(frozen=True)
class Skipped:
    """クラス不足のため学習エピソードを作れなかったタスク"""
    task: TaskId
    positive_deficit: int = 0
    negative_deficit: int = 0


@dataclass(frozen=True, eq=False)
class Dataset:
    """
    読み込み済みのデータセット（読み込み後は変更しない）

    label_matrix は (例, 属性) の 0/1 で、ラベルのない組は -1。
    """
    example_ids: Tuple[str, ...]
    example_subjects: Tuple[str, ...]
    inputs: np.ndarray
    label_matrix: np.ndarray
    attributes: Tuple[str, ...]
    subjects: Tuple[str, ...]
    input_kind: str = 'vector'
    _rows: Dict[str, int] = field(default=None, init=False, repr=False)
    _subject_rows: Dict[str, np.ndarray] = field(default=None, init=False, repr=False)

    def __post_init__(self):
        object.__setattr__(self, 'example_ids', tuple(self.example_ids))
        object.__setattr__(self, 'example_subjects', tuple(self.example_subjects))
        object.__setattr__(self, 'attributes', tuple(self.attributes))
        object.__setattr__(self, 'subjects', tuple(self.subjects))
        object.__setattr__(self, 'inputs', np.asarray(self.inputs, dtype=np.float32))
        object.__setattr__(self, 'label_matrix', np.asarray(self.label_matrix, dtype=np.int8))

        n = len(self.example_ids)
        rows: Dict[str, int] = {}
        for row, eid in enumerate(self.example_ids):
            if eid in rows:
                raise DuplicateExampleError(f"Duplicate example_id {eid!r}")
            rows[eid] = row
        if len(set(self.subjects)) != len(self.subjects):
            raise ValueError("Duplicate subject ids")
        if len(set(self.attributes)) != len(self.attributes):
            raise ValueError("Duplicate attribute ids")
        if len(self.example_subjects) != n or len(self.inputs) != n:
            raise ValueError(f"Dataset has {n} example ids, {len(self.example_subjects)} subjects, {len(self.inputs)} inputs")
        if self.label_matrix.shape != (n, len(self.attributes)):
            raise ValueError(f"label_matrix shape {self.label_matrix.shape} != ({n}, {len(self.attributes)})")
        if not np.isin(self.label_matrix, (UNLABELED, 0, 1)).all():
            raise ValueError("label_matrix entries must be -1, 0 or 1")
        unknown = set(self.example_subjects) - set(self.subjects)
        if unknown:
            raise UnknownReferenceError(f"Examples reference unknown subjects {sorted(unknown)}")

        subjects = np.asarray(self.example_subjects, dtype=object)
        object.__setattr__(self, '_rows', rows)
        object.__setattr__(self, '_subject_rows', {s: np.flatnonzero(subjects == s) for s in self.subjects})

    @property
    def n_examples(self) -> int:
        return len(self.example_ids)

    @property
    def input_shape(self) -> Tuple[int, ...]:
        return tuple(self.inputs.shape[1:])

    @property
    def labels(self) -> Dict[Tuple[str, str], int]:
        """{(example_id, attribute_id): 0/1}（ラベルのある組のみ）"""
        rows, cols = np.nonzero(self.label_matrix != UNLABELED)
        return {
            (self.example_ids[r], self.attributes[c]): int(self.label_matrix[r, c])
            for r, c in zip(rows, cols)
        }

    def tasks(self) -> List[TaskId]:
        return [TaskId(s, a) for s in self.subjects for a in self.attributes]

    def row_of(self, example_id: str) -> int:
        return self._rows[example_id]

    def subject_rows(self, subject_id: str) -> np.ndarray:
        if subject_id not in self._subject_rows:
            raise UnknownSubjectError(f"Unknown subject {subject_id!r}")
        return self._subject_rows[subject_id]

    def attribute_index(self, attribute_id: str) -> int:
        try:
            return self.attributes.index(attribute_id)
        except ValueError:
            raise UnknownTaskError(f"Unknown attribute {attribute_id!r}") from None

    def task_rows(self, task: TaskId) -> Tuple[np.ndarray, np.ndarray]:
        """
        タスクの陽性・陰性の行番号

        Returns:
            (陽性の行, 陰性の行)
        """
        if task.subject_id not in self._subject_rows:
            raise UnknownTaskError(f"Unknown task {task}: subject not in dataset")
        col = self.attribute_index(task.attribute_id)
        rows = self._subject_rows[task.subject_id]
        values = self.label_matrix[rows, col]
        return rows[values == 1], rows[values == 0]

    def batch(self, rows: Sequence[int], attribute_id: str) -> LabeledBatch:
        rows = np.asarray(rows, dtype=np.int64)
        col = self.attribute_index(attribute_id)
        return LabeledBatch(
            inputs=self.inputs[rows],
            labels=self.label_matrix[rows, col],
            example_ids=tuple(self.example_ids[r] for r in rows),
        )

    def select_attributes(self, attributes: Sequence[str]) -> 'Dataset':
        """指定した属性の列だけを持つデータセット"""
        cols = [self.attribute_index(a) for a in attributes]
        return Dataset(
            example_ids=self.example_ids,
            example_subjects=self.example_subjects,
            inputs=self.inputs,
            label_matrix=self.label_matrix[:, cols],
            attributes=tuple(attributes),
            subjects=self.subjects,
            input_kind=self.input_kind,
        )


@dataclass(frozen=True)
class SplitPlan:
    """leave-one-subject-out の1フォールド"""
    held_out_subject: Optional[str]
    train_tasks: Tuple[TaskId, ...]
    test_tasks: Tuple[TaskId, ...]
    skipped_tasks: Tuple[Skipped, ...] = ()


def binarize_intensity(intensity: Union[int, float]) -> int:
    """
    強度 (0〜5) を二値化（0 は陰性、1 以上は陽性）

    Raises:
        IntensityRangeError: 0〜5 の整数でない
    """
    value = float(intensity)
    if not value.is_integer() or not 0 <= value <= MAX_INTENSITY:
        raise IntensityRangeError(f"Intensity must be an integer in 0..{MAX_INTENSITY}, got {intensity!r}")
    return 0 if value == 0 else 1


def _read_csv(path: Path, columns: Sequence[str]) -> pd.DataFrame:
    if not path.exists():
        raise ManifestFileMissingError("File not found", path)
    frame = pd.read_csv(path, dtype=str, keep_default_na=False)
    missing = [c for c in columns if c not in frame.columns]
    if missing:
        raise ManifestError(f"Missing columns {missing} (header: {list(frame.columns)})", path, 1)
    return frame


def _resolve_manifest(manifest_path: Union[str, Path]) -> Tuple[Path, Path]:
    path = Path(manifest_path)
    if path.is_dir():
        return path, path / Config.MANIFEST_HEADER
    return path.parent, path


def load_dataset(manifest_path: Union[str, Path]) -> Dataset:
    """
    マニフェストディレクトリからデータセットを読み込む

    Args:
        manifest_path: マニフェストディレクトリまたは manifest.json のパス

    Returns:
        Dataset（強度ラベルは二値化済み）

    Raises:
        ManifestFileMissingError: ファイルがない
        DuplicateExampleError: example_id が重複
        UnknownReferenceError: ラベル行が存在しない ID を参照
        ManifestError: その他の形式エラー
    """
    directory, header_path = _resolve_manifest(manifest_path)
    if not header_path.exists():
        logger.error(f"Manifest header not found: {header_path}")
        raise ManifestFileMissingError("Manifest header not found", header_path)

    logger.info(f"Loading dataset from {directory}")
    try:
        header = json.loads(header_path.read_text(encoding='utf-8'))
    except json.JSONDecodeError as e:
        raise ManifestError(f"Invalid JSON: {e.msg}", header_path, e.lineno) from e

    input_kind = header.get('input_kind')
    if input_kind not in ('vector', 'image'):
        raise ManifestError(f"input_kind must be 'vector' or 'image', got {input_kind!r}", header_path)
    input_shape = tuple(int(s) for s in header.get('input_shape', ()))
    expected_dims = 1 if input_kind == 'vector' else 3
    if len(input_shape) != expected_dims or any(s < 1 for s in input_shape):
        raise ManifestError(f"input_shape {list(input_shape)} is invalid for {input_kind} payloads", header_path)
    label_mode = header.get('label_mode', 'binary')
    if label_mode not in LABEL_MODES:
        raise ManifestError(f"label_mode must be one of {LABEL_MODES}, got {label_mode!r}", header_path)

    # examples.csv
    examples_path = directory / header.get('examples', Config.MANIFEST_EXAMPLES)
    examples = _read_csv(examples_path, ['example_id', 'subject_id'])
    duplicated = examples['example_id'].duplicated()
    if duplicated.any():
        idx = int(np.flatnonzero(duplicated.to_numpy())[0])
        raise DuplicateExampleError(
            f"Duplicate example_id {examples['example_id'].iloc[idx]!r}", examples_path, idx + 2
        )
    example_ids = tuple(examples['example_id'])
    example_subjects = tuple(examples['subject_id'])
    subjects = tuple(header.get('subjects') or pd.unique(examples['subject_id']))
    unknown_subjects = sorted(set(example_subjects) - set(subjects))
    if unknown_subjects:
        idx = example_subjects.index(unknown_subjects[0])
        raise UnknownReferenceError(f"Unknown subject_id {unknown_subjects[0]!r}", examples_path, idx + 2)
    rows = {eid: i for i, eid in enumerate(example_ids)}

    # labels.csv
    labels_path = directory / header.get('labels', Config.MANIFEST_LABELS)
    labels = _read_csv(labels_path, ['example_id', 'subject_id', 'attribute_id', 'value'])
    attributes = tuple(header.get('attributes') or pd.unique(labels['attribute_id']))
    attr_index = {a: i for i, a in enumerate(attributes)}
    label_matrix = np.full((len(example_ids), len(attributes)), UNLABELED, dtype=np.int8)

    for i, (eid, sid, aid, raw) in enumerate(labels[['example_id', 'subject_id', 'attribute_id', 'value']].itertuples(index=False)):
        line = i + 2
        if eid not in rows:
            raise UnknownReferenceError(f"Label row references unknown example_id {eid!r}", labels_path, line)
        row = rows[eid]
        if sid != example_subjects[row]:
            raise UnknownReferenceError(
                f"Label row gives subject {sid!r} for example {eid!r} of subject {example_subjects[row]!r}",
                labels_path, line,
            )
        if aid not in attr_index:
            raise UnknownReferenceError(f"Label row references unknown attribute_id {aid!r}", labels_path, line)
        try:
            value = float(raw)
        except ValueError:
            raise ManifestError(f"Label value {raw!r} is not a number", labels_path, line) from None
        if label_mode == 'intensity':
            try:
                value = binarize_intensity(value)
            except IntensityRangeError as e:
                raise ManifestError(str(e), labels_path, line) from None
        elif value not in (0.0, 1.0):
            raise ManifestError(f"Binary label must be 0 or 1, got {raw!r}", labels_path, line)
        col = attr_index[aid]
        if label_matrix[row, col] != UNLABELED:
            raise ManifestError(f"Duplicate label for ({eid!r}, {aid!r})", labels_path, line)
        label_matrix[row, col] = int(value)

    # ペイロード
    if input_kind == 'vector':
        payload_path = directory / header.get('payload', Config.MANIFEST_FEATURES)
        if not payload_path.exists():
            raise ManifestFileMissingError("Feature payload not found", payload_path)
        flat = np.fromfile(payload_path, dtype='<f4')
        expected = len(example_ids) * input_shape[0]
        if flat.size != expected:
            raise ManifestError(
                f"Feature payload holds {flat.size} floats, expected {expected} "
                f"({len(example_ids)} examples x {input_shape[0]})", payload_path,
            )
        inputs = flat.reshape(len(example_ids), input_shape[0]).astype(np.float32)
    else:
        payload_path = directory / header.get('payload', Config.MANIFEST_IMAGE_DIR)
        try:
            inputs = ImageScanner().load_images(payload_path, example_ids, input_shape)
        except FileNotFoundError as e:
            raise ManifestFileMissingError(str(e), payload_path) from e
        except ValueError as e:
            raise ManifestError(str(e), payload_path) from e

    dataset = Dataset(
        example_ids=example_ids,
        example_subjects=example_subjects,
        inputs=inputs,
        label_matrix=label_matrix,
        attributes=attributes,
        subjects=subjects,
        input_kind=input_kind,
    )
    logger.info(
        f"Loaded {dataset.n_examples} examples, {len(subjects)} subjects, {len(attributes)} attributes, "
        f"{int((label_matrix != UNLABELED).sum())} labels ({label_mode})"
    )
    return dataset


def save_dataset(dataset: Dataset, directory: Union[str, Path]) -> Path:
    """
    データセットをマニフェスト形式で書き出す（load_dataset の逆）

    Returns:
        マニフェストディレクトリ
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)

    if dataset.input_kind == 'vector':
        payload = Config.MANIFEST_FEATURES
        atomic_write_bytes(directory / payload, dataset.inputs.astype('<f4').tobytes(order='C'))
    else:
        payload = Config.MANIFEST_IMAGE_DIR
        ImageScanner().save_images(directory / payload, dataset.example_ids, dataset.inputs)

    examples = pd.DataFrame({'example_id': dataset.example_ids, 'subject_id': dataset.example_subjects})
    atomic_write_text(directory / Config.MANIFEST_EXAMPLES, examples.to_csv(index=False, lineterminator='\n'))

    rows, cols = np.nonzero(dataset.label_matrix != UNLABELED)
    labels = pd.DataFrame({
        'example_id': [dataset.example_ids[r] for r in rows],
        'subject_id': [dataset.example_subjects[r] for r in rows],
        'attribute_id': [dataset.attributes[c] for c in cols],
        'value': dataset.label_matrix[rows, cols].astype(int),
    })
    atomic_write_text(directory / Config.MANIFEST_LABELS, labels.to_csv(index=False, lineterminator='\n'))

    header = {
        'input_kind': dataset.input_kind,
        'input_shape': list(dataset.input_shape),
        'payload': payload,
        'examples': Config.MANIFEST_EXAMPLES,
        'labels': Config.MANIFEST_LABELS,
        'label_mode': 'binary',
        'attributes': list(dataset.attributes),
        'subjects': list(dataset.subjects),
    }
    atomic_write_text(directory / Config.MANIFEST_HEADER, json.dumps(header, indent=2, sort_keys=True) + '\n')
    logger.info(f"Saved dataset manifest to {directory}")
    return directory


def episode_deficits(dataset: Dataset, task: TaskId, shots: int) -> Tuple[int, int]:
    """学習エピソードに必要な 2N 個に対する陽性・陰性の不足数"""
    pos, neg = dataset.task_rows(task)
    need = 2 * shots
    return max(0, need - len(pos)), max(0, need - len(neg))


def enumerate_tasks(dataset: Dataset, held_out_subject: Optional[str], shots: Optional[int] = None) -> SplitPlan:
    """
    タスクを列挙して学習用・テスト用に分ける

    Args:
        dataset: データセット
        held_out_subject: テストに回す被験者（None なら全タスクを学習用にする）
        shots: 指定すると学習エピソードを作れないタスクを除外して記録する

    Returns:
        SplitPlan
    """
    if held_out_subject is not None and held_out_subject not in dataset.subjects:
        raise UnknownSubjectError(f"Unknown subject {held_out_subject!r}")

    train = [TaskId(s, a) for s in dataset.subjects if s != held_out_subject for a in dataset.attributes]
    test = [TaskId(held_out_subject, a) for a in dataset.attributes] if held_out_subject is not None else []

    skipped: List[Skipped] = []
    if shots is not None:
        kept = []
        for task in train:
            pos_deficit, neg_deficit = episode_deficits(dataset, task, shots)
            if pos_deficit or neg_deficit:
                skipped.append(Skipped(task, pos_deficit, neg_deficit))
            else:
                kept.append(task)
        train = kept
        if skipped:
            logger.warning(f"Skipping {len(skipped)} training tasks with fewer than {2 * shots} examples per class")

    return SplitPlan(held_out_subject, tuple(train), tuple(test), tuple(skipped))


def loso_folds(dataset: Dataset, shots: Optional[int] = None) -> List[SplitPlan]:
    """全被験者についての leave-one-subject-out 分割"""
    return [enumerate_tasks(dataset, subject, shots) for subject in dataset.subjects]


def sample_episode(dataset: Dataset, task: TaskId, shots: int,
                   rng: np.random.Generator) -> Union[TaskEpisode, Skipped]:
    """
    学習用エピソード（サポート N+/N-、クエリ N+/N-）を非復元抽出

    陽性・陰性のいずれかが 2N 未満なら Skipped を返す。
    """
    if shots < 1:
        raise ValueError(f"shots must be >= 1, got {shots}")
    pos, neg = dataset.task_rows(task)
    need = 2 * shots
    if len(pos) < need or len(neg) < need:
        return Skipped(task, max(0, need - len(pos)), max(0, need - len(neg)))

    pos_draw = rng.choice(pos, size=need, replace=False)
    neg_draw = rng.choice(neg, size=need, replace=False)
    support_rows = np.concatenate([pos_draw[:shots], neg_draw[:shots]])
    query_rows = np.concatenate([pos_draw[shots:], neg_draw[shots:]])
    return TaskEpisode(
        task=task,
        support=dataset.batch(support_rows, task.attribute_id),
        query=dataset.batch(query_rows, task.attribute_id),
    )


def _fill_counts(n_pos: int, n_neg: int, avail_pos: int, avail_neg: int, per_class: int) -> Tuple[int, int]:
    # 足りない分は残っている陰性で埋め、それでも足りなければ陽性で埋める
    short = 2 * per_class - n_pos - n_neg
    extra = min(short, avail_neg - n_neg)
    n_neg += extra
    short -= extra
    n_pos += min(short, avail_pos - n_pos)
    return n_pos, n_neg


def sample_adaptation_pair(dataset: Dataset, task: TaskId, shots: int, eval_per_class: int = 10,
                           rng: Optional[np.random.Generator] = None) -> Tuple[LabeledBatch, LabeledBatch]:
    """
    適応用サポート集合（K+, K-）と評価集合（E+, E-）を互いに素に抽出

    各クラスの例はまずサポート集合に K 個まで割り当て、残りから評価集合に E 個まで割り当てる。
    そのあと評価集合、サポート集合の順に、不足分をもう一方のクラスの残りで埋め、サイズ 2K / 2E を保つ。
    陽性が K 個以下のタスクではサポート集合が陽性をすべて受け取る。

    Raises:
        InsufficientExamplesError: タスクの例数が 2K + 2E 未満
    """
    if shots < 1 or eval_per_class < 1:
        raise ValueError(f"shots and eval_per_class must be >= 1, got {shots}, {eval_per_class}")
    rng = rng if rng is not None else np.random.default_rng()
    pos, neg = dataset.task_rows(task)
    need = 2 * shots + 2 * eval_per_class
    if len(pos) + len(neg) < need:
        raise InsufficientExamplesError(
            f"Task {task} has {len(pos) + len(neg)} labeled examples, needs {need} for K={shots}"
        )

    pos = rng.permutation(pos)
    neg = rng.permutation(neg)

    s_pos, s_neg = min(shots, len(pos)), min(shots, len(neg))
    e_pos = min(eval_per_class, len(pos) - s_pos)
    e_neg = min(eval_per_class, len(neg) - s_neg)
    e_pos, e_neg = _fill_counts(e_pos, e_neg, len(pos) - s_pos, len(neg) - s_neg, eval_per_class)
    s_pos, s_neg = _fill_counts(s_pos, s_neg, len(pos) - e_pos, len(neg) - e_neg, shots)

    # サポート集合は先頭から、評価集合は末尾から取る
    support_rows = np.concatenate([pos[:s_pos], neg[:s_neg]])
    eval_rows = np.concatenate([pos[len(pos) - e_pos:], neg[len(neg) - e_neg:]])

    if s_pos != shots or e_pos != eval_per_class:
        logger.debug(f"{task}: filled support ({s_pos}+, {s_neg}-), evalset ({e_pos}+, {e_neg}-)")

    return dataset.batch(support_rows, task.attribute_id), dataset.batch(eval_rows, task.attribute_id)


def imbalance_stats(dataset: Dataset) -> pd.DataFrame:
    """
    タスクごとの陽性率

    Returns:
        subject, attribute, n_labeled, n_positive, positive_fraction の表
    """
    records = []
    for task in dataset.tasks():
        pos, neg = dataset.task_rows(task)
        n_labeled = len(pos) + len(neg)
        records.append({
            'subject': task.subject_id,
            'attribute': task.attribute_id,
            'n_labeled': n_labeled,
            'n_positive': len(pos),
            'positive_fraction': len(pos) / n_labeled if n_labeled else 0.0,
        })
    return pd.DataFrame.from_records(
        records, columns=['subject', 'attribute', 'n_labeled', 'n_positive', 'positive_fraction']
    )


class EpisodeSampler:
    """メタ学習用のタスク供給元（学習不能なタスクは最初に除外）"""

    def __init__(self, dataset: Dataset, tasks: Sequence[TaskId], shots: int):
        """
        Args:
            dataset: データセット
            tasks: 対象タスク（SplitPlan.train_tasks など）
            shots: クラスあたりの例数 N
        """
        if shots < 1:
            raise ValueError(f"shots must be >= 1, got {shots}")
        self.dataset = dataset
        self.shots = shots
        self.default_batch_size = len(dataset.attributes)

        eligible, skipped = [], []
        for task in tasks:
            pos_deficit, neg_deficit = episode_deficits(dataset, task, shots)
            if pos_deficit or neg_deficit:
                skipped.append(Skipped(task, pos_deficit, neg_deficit))
            else:
                eligible.append(task)
        self.tasks: Tuple[TaskId, ...] = tuple(eligible)
        self.skipped: Tuple[Skipped, ...] = tuple(skipped)

        for s in skipped:
            logger.debug(f"Skipped {s.task}: positive deficit {s.positive_deficit}, negative deficit {s.negative_deficit}")
        logger.info(f"EpisodeSampler: {len(eligible)} trainable tasks, {len(skipped)} skipped (N={shots})")

    @property
    def n_tasks(self) -> int:
        return len(self.tasks)

    def sample_batch(self, count: int, rng: np.random.Generator) -> List[TaskEpisode]:
        """
        異なる count 個のタスクを選び、それぞれのエピソードを作る

        Raises:
            TaskSourceExhausted: 学習可能なタスクが count 未満
        """
        if count > len(self.tasks):
            raise TaskSourceExhausted(f"{count} tasks requested but only {len(self.tasks)} trainable tasks available")
        chosen = rng.choice(len(self.tasks), size=count, replace=False)
        return [sample_episode(self.dataset, self.tasks[int(i)], self.shots, rng) for i in chosen]
