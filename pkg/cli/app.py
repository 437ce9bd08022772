"""
コマンドラインインターフェース

    python main.py synth  [--out DIR]
    python main.py train  --mode meta|baseline --fold <被験者>|all|none
    python main.py eval   --protocol loso|cross_bank|sweep [--shots 1 5] [--max-steps N]
    python main.py stats

共通オプション: --config FILE --workdir DIR --log-dir DIR --quiet
設定値は --section.key value で上書きできる（例: --meta.meta_iterations 100）。

終了コード: 0 成功、1 使い方・設定のエラー、2 実行時エラー
"""
import argparse
import logging
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import pandas as pd

from cli.run_config import ConfigError, RunConfig
from config import Config
from core.backbone import ParameterVector, ShapeMismatchError
from core.baseline import merge_labels, train_baseline
from core.evalharness import (
    MissingFoldError,
    compare_reports,
    cross_bank_eval,
    gradient_step_sweep,
    novelty_summary,
    run_loso,
    subject_comparison,
    write_summary_json,
    write_table_csv,
    write_task_csv,
)
from core.meta import MetaTrainer
from core.synthgen import export_bank
from core.taskbank import Dataset, EpisodeSampler, UnknownSubjectError, enumerate_tasks, imbalance_stats, load_dataset
from models.checkpoint import Checkpoint, CheckpointStore
from utils.logger import get_logger, setup_logger

logger = get_logger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_RUNTIME = 2

PROTOCOLS = ('loso', 'cross_bank', 'sweep')


class UsageError(Exception):
    """コマンドラインの使い方の誤り"""


class _Parser(argparse.ArgumentParser):
    # argparse は既定で終了コード 2 を返すため、例外にして 1 に揃える
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog='main.py', description='Few-shot meta-learning of per-subject binary attribute detectors')
    parser.add_argument('--config', type=Path, default=None, help='Run configuration YAML')
    parser.add_argument('--workdir', type=Path, default=None, help='Base directory for relative paths (default: cwd)')
    parser.add_argument('--log-dir', type=Path, default=None, help='Log directory')
    parser.add_argument('--quiet', action='store_true', help='Only warnings and errors on the console')

    sub = parser.add_subparsers(dest='command')

    synth = sub.add_parser('synth', help='Generate a synthetic task bank')
    synth.add_argument('--out', type=Path, default=None, help='Manifest directory (default: paths.dataset)')

    train = sub.add_parser('train', help='Train meta or baseline checkpoints')
    train.add_argument('--mode', choices=('meta', 'baseline'), default='meta')
    train.add_argument('--fold', default='all', help="Held-out subject id, 'all' (one per subject) or 'none'")

    evaluate = sub.add_parser('eval', help='Evaluate checkpoints')
    evaluate.add_argument('--protocol', choices=PROTOCOLS, default='loso')
    evaluate.add_argument('--shots', type=int, nargs='+', default=None, help='K values (default: eval.K)')
    evaluate.add_argument('--max-steps', type=int, default=None, help='Sweep length (default: eval.G)')

    sub.add_parser('stats', help='Per-task positive fractions')
    return parser


def parse_overrides(extras: Sequence[str]) -> List[Tuple[str, str]]:
    """
    残りの引数から --section.key value / --section.key=value を取り出す

    Raises:
        UsageError: 解釈できない引数
    """
    overrides = []
    tokens = list(extras)
    i = 0
    while i < len(tokens):
        token = tokens[i]
        if not token.startswith('--') or '.' not in token:
            raise UsageError(f"unrecognized argument: {token}")
        key = token[2:]
        if '=' in key:
            key, value = key.split('=', 1)
            i += 1
        else:
            if i + 1 >= len(tokens):
                raise UsageError(f"override {token} needs a value")
            value = tokens[i + 1]
            i += 2
        overrides.append((key, value))
    return overrides


class ProgressWriter:
    """進捗レコードを1行1 JSON で書き出す"""

    def __init__(self, path: Path):
        self.path = path
        self._file = None

    def __enter__(self) -> 'ProgressWriter':
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._file = open(self.path, 'w', encoding='utf-8', newline='\n')
        return self

    def __exit__(self, exc_type, exc, tb):
        self._file.close()
        return False

    def write(self, record):
        self._file.write(record.to_json() + '\n')
        self._file.flush()


def _resolve_folds(dataset: Dataset, fold: str) -> List[Optional[str]]:
    if fold == 'all':
        return list(dataset.subjects)
    if fold == 'none':
        return [None]
    if fold not in dataset.subjects:
        raise UnknownSubjectError(f"Unknown fold {fold!r}; subjects are {list(dataset.subjects)}")
    return [fold]


def _train_meta(run: RunConfig, dataset: Dataset, fold: Optional[str], progress: ProgressWriter,
                show_progress: bool) -> Tuple[ParameterVector, dict]:
    backbone_config = run.backbone_config(dataset)
    meta_config = run.meta_config(dataset)
    plan = enumerate_tasks(dataset, fold, shots=meta_config.shots_train)
    train_tasks = list(plan.train_tasks)

    validation, validation_subject = None, None
    if meta_config.validate_every > 0:
        # 学習用被験者の最後の1人を早期終了の検証用に回す
        subjects = [s for s in dataset.subjects if s != fold]
        if len(subjects) < 2:
            raise ValueError("Early stopping needs at least two training subjects")
        validation_subject = subjects[-1]
        validation = EpisodeSampler(
            dataset, [t for t in train_tasks if t.subject_id == validation_subject], meta_config.shots_train
        )
        train_tasks = [t for t in train_tasks if t.subject_id != validation_subject]

    sampler = EpisodeSampler(dataset, train_tasks, meta_config.shots_train)
    trainer = MetaTrainer(backbone_config, meta_config, sampler, progress.write,
                          validation_source=validation, show_progress=show_progress)
    theta = trainer.train()
    extra = {
        'iterations': len(trainer.history),
        'skipped_tasks': [str(s.task) for s in plan.skipped_tasks],
        'validation_subject': validation_subject,
    }
    return theta, extra


def _train_baseline(run: RunConfig, dataset: Dataset, fold: Optional[str], progress: ProgressWriter,
                    show_progress: bool) -> Tuple[ParameterVector, dict]:
    backbone_config = run.backbone_config(dataset)
    config = run.baseline_config().resolved(run.meta_config(dataset))
    merged = merge_labels(dataset, dataset.attributes, exclude_subjects=[fold] if fold is not None else [])
    theta = train_baseline(backbone_config, merged, config, progress_callback=progress.write,
                           show_progress=show_progress)
    return theta, {'iterations': config.iterations, 'n_examples': len(merged)}


def cmd_synth(run: RunConfig, args: argparse.Namespace, workdir: Path) -> Path:
    """合成バンクを生成してマニフェストを書く"""
    out = _under(workdir, args.out) if args.out is not None else run.resolve_path(workdir, 'dataset')
    directory = export_bank(run.synth_config(), out)
    run.write_effective(directory)
    logger.info(f"Synthetic bank written to {directory}")
    return directory


def cmd_train(run: RunConfig, args: argparse.Namespace, workdir: Path) -> List[Path]:
    """フォールドごとにメタ学習またはベースラインを学習してチェックポイントを書く"""
    dataset = load_dataset(run.resolve_path(workdir, 'dataset'))
    store = CheckpointStore(run.resolve_path(workdir, 'checkpoints'))
    folds = _resolve_folds(dataset, args.fold)
    train = _train_meta if args.mode == 'meta' else _train_baseline

    written = []
    for fold in folds:
        logger.info(f"Training {args.mode} model (held-out subject: {fold if fold is not None else 'none'})")
        path = store.path(args.mode, fold)
        with ProgressWriter(path.with_name(path.name + Config.PROGRESS_SUFFIX)) as progress:
            theta, extra = train(run, dataset, fold, progress, not args.quiet)
        written.append(store.save(theta, args.mode, fold, dataset.attributes, extra))

    run.write_effective(store.root / args.mode, dataset)
    logger.info(f"Wrote {len(written)} {args.mode} checkpoints to {store.root / args.mode}")
    return written


def _checked(checkpoint: Checkpoint, dataset: Dataset) -> Checkpoint:
    shape = tuple(checkpoint.config.input_shape)
    if shape != dataset.input_shape:
        logger.error(f"Checkpoint expects input {shape}, dataset has {dataset.input_shape}")
        raise ShapeMismatchError(f"Checkpoint expects example shape {shape}, dataset provides {dataset.input_shape}")
    return checkpoint


def _fold_params(store: CheckpointStore, origin: str, dataset: Dataset) -> Dict[str, ParameterVector]:
    params = {}
    for fold in dataset.subjects:
        if not store.exists(origin, fold):
            raise MissingFoldError(origin, fold)
        params[fold] = _checked(store.load(origin, fold), dataset).params
    return params


def _sweep_params(store: CheckpointStore, origin: str, dataset: Dataset):
    # 全フォールドのチェックポイントがあればそれを、なければ全被験者で学習したものを使う
    if all(store.exists(origin, s) for s in dataset.subjects):
        return _fold_params(store, origin, dataset)
    if store.exists(origin, None):
        return _checked(store.load(origin, None), dataset).params
    missing = next(s for s in dataset.subjects if not store.exists(origin, s))
    raise MissingFoldError(origin, missing)


def cmd_eval(run: RunConfig, args: argparse.Namespace, workdir: Path) -> Path:
    """評価してレポート（CSV と JSON）を書く"""
    eval_config = run.eval_config()
    shots = args.shots or [eval_config.K]
    store = CheckpointStore(run.resolve_path(workdir, 'checkpoints'))
    out = run.resolve_path(workdir, 'reports') / args.protocol
    show_progress = not args.quiet

    if args.protocol == 'loso':
        dataset = load_dataset(run.resolve_path(workdir, 'dataset'))
        pair = run_loso(dataset, _fold_params(store, 'meta', dataset), _fold_params(store, 'baseline', dataset),
                        eval_config, shots, show_progress=show_progress)
        reports = list(pair)
        write_task_csv(reports, out / 'tasks.csv')
        write_table_csv(compare_reports(reports), out / 'comparison.csv')
        write_table_csv(
            pd.concat([r.per_attribute().assign(model=r.model) for r in reports], ignore_index=True),
            out / 'attributes.csv',
        )
        for k in shots:
            write_table_csv(subject_comparison(pair, k), out / f'subjects_K{k}.csv')
        write_summary_json({r.model: r.summary() for r in reports}, out / 'summary.json')

    elif args.protocol == 'cross_bank':
        target = run.resolve_path(workdir, 'target_dataset') or run.resolve_path(workdir, 'dataset')
        dataset = load_dataset(target)
        reports = []
        for origin in ('meta', 'baseline'):
            checkpoint = _checked(store.load(origin, None), dataset)
            reports.append(cross_bank_eval(checkpoint.params, dataset, checkpoint.attributes, eval_config, shots,
                                           model=origin, show_progress=show_progress))
        write_task_csv(reports, out / 'tasks.csv')
        write_table_csv(compare_reports(reports), out / 'comparison.csv')
        write_table_csv(
            pd.concat([novelty_summary(r).assign(model=r.model) for r in reports], ignore_index=True),
            out / 'novelty.csv',
        )
        write_summary_json({r.model: r.summary() for r in reports}, out / 'summary.json')

    else:
        dataset = load_dataset(run.resolve_path(workdir, 'dataset'))
        max_steps = args.max_steps if args.max_steps is not None else eval_config.G
        for origin in ('meta', 'baseline'):
            curve = gradient_step_sweep(_sweep_params(store, origin, dataset), dataset, dataset.tasks(), shots,
                                        max_steps, eval_config, model=origin, show_progress=show_progress)
            write_table_csv(curve.table(), out / f'sweep_{origin}.csv')

    run.write_effective(out, dataset)
    logger.info(f"Reports written to {out}")
    return out


def cmd_stats(run: RunConfig, args: argparse.Namespace, workdir: Path) -> Path:
    """タスクごとの陽性率を CSV に書く"""
    dataset = load_dataset(run.resolve_path(workdir, 'dataset'))
    out = run.resolve_path(workdir, 'reports') / 'stats'
    path = write_table_csv(imbalance_stats(dataset), out / 'imbalance.csv')
    run.write_effective(out, dataset)
    logger.info(f"Imbalance table written to {path}")
    return path


def _under(workdir: Path, path: Optional[Path]) -> Optional[Path]:
    # 相対パスは workdir 基準
    if path is None or path.is_absolute():
        return path
    return workdir / path


COMMANDS = {
    'synth': cmd_synth,
    'train': cmd_train,
    'eval': cmd_eval,
    'stats': cmd_stats,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    """
    CLI エントリーポイント

    Returns:
        終了コード
    """
    parser = build_parser()
    try:
        args, extras = parser.parse_known_args(argv)
        overrides = parse_overrides(extras)
        if args.command is None:
            raise UsageError(f"a command is required ({', '.join(COMMANDS)})")
        workdir = (args.workdir if args.workdir is not None else Path.cwd()).absolute()
        setup_logger(Config.APP_NAME, _under(workdir, args.log_dir), logging.WARNING if args.quiet else logging.INFO)
        run = RunConfig.from_yaml(_under(workdir, args.config)) if args.config is not None else RunConfig()
        run = run.with_overrides(overrides)
    except (UsageError, ConfigError) as e:
        logger.error(f"Usage error: {e}")
        return EXIT_CONFIG

    logger.info(f"Command {args.command} started (workdir {workdir})")
    try:
        COMMANDS[args.command](run, args, workdir)
    except ConfigError as e:
        logger.error(f"Configuration error: {e}")
        return EXIT_CONFIG
    except Exception as e:
        logger.error(f"{args.command} failed: {e}", exc_info=True)
        return EXIT_RUNTIME

    logger.info(f"Command {args.command} finished")
    return EXIT_OK
