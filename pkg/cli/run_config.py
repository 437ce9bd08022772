"""
実行設定ファイル（YAML）

セクション paths / backbone / meta / baseline / eval / synth を持つ。
未知のセクション・キーはエラーにする。
"""
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Any, Dict, Iterable, Optional, Tuple, Union

import yaml

from config import Config
from core.backbone import BackboneConfig
from core.baseline import BaselineConfig
from core.evalharness import EvalConfig
from core.meta import MetaConfig
from core.synthgen import SynthConfig, SynthConfigError
from core.taskbank import Dataset
from utils.fileio import atomic_write_text
from utils.logger import get_logger

logger = get_logger(__name__)

AUTO = 'auto'


class ConfigError(ValueError):
    """設定ファイル・上書き指定のエラー（対象フィールド名を保持）"""

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


@dataclass(frozen=True)
class PathsConfig:
    """入出力パス（workdir からの相対パス）"""
    dataset: str = 'bank'
    target_dataset: Optional[str] = None
    checkpoints: str = 'checkpoints'
    reports: str = 'reports'


def _backbone_defaults() -> Dict[str, Any]:
    # input_kind / input_shape は読み込んだデータセットから決める
    data = BackboneConfig().to_dict()
    data['input_kind'] = AUTO
    data['input_shape'] = None
    return data


SECTION_TYPES = {
    'paths': PathsConfig,
    'backbone': BackboneConfig,
    'meta': MetaConfig,
    'baseline': BaselineConfig,
    'eval': EvalConfig,
    'synth': SynthConfig,
}


def _section_defaults(section: str) -> Dict[str, Any]:
    if section == 'backbone':
        return _backbone_defaults()
    cls = SECTION_TYPES[section]
    default = cls()
    return {f.name: getattr(default, f.name) for f in fields(cls)}


def _plain(value):
    # YAML に書ける形（タプルはリスト）にする
    if isinstance(value, (tuple, list)):
        return [_plain(v) for v in value]
    if isinstance(value, dict):
        return {k: _plain(v) for k, v in value.items()}
    return value


class RunConfig:
    """
    実行設定

    全フィールドに各モジュールのデフォルト値を持ち、設定ファイルと
    コマンドラインの上書き指定（--section.key value）で値を変える。
    """

    def __init__(self, sections: Optional[Dict[str, Dict[str, Any]]] = None):
        self.sections: Dict[str, Dict[str, Any]] = {name: _section_defaults(name) for name in SECTION_TYPES}
        for section, values in (sections or {}).items():
            self._update(section, values)
        self.validate()

    @classmethod
    def from_yaml(cls, path: Union[str, Path]) -> 'RunConfig':
        """
        YAML ファイルから読み込む

        Raises:
            ConfigError: 構文エラー、未知のセクション・キー、不正な値
        """
        path = Path(path)
        if not path.exists():
            raise ConfigError('config', f"file not found: {path}")
        try:
            with open(path, 'r', encoding='utf-8') as f:
                data = yaml.safe_load(f) or {}
        except yaml.YAMLError as e:
            raise ConfigError('config', f"invalid YAML in {path}: {e}") from e
        if not isinstance(data, dict):
            raise ConfigError('config', f"{path} must contain a mapping of sections")
        logger.info(f"Loaded run config from {path}")
        return cls(data)

    def _update(self, section: str, values: Any):
        if section not in SECTION_TYPES:
            raise ConfigError(section, f"unknown section (expected one of {sorted(SECTION_TYPES)})")
        if values is None:
            return
        if not isinstance(values, dict):
            raise ConfigError(section, "section must be a mapping")
        known = self.sections[section]
        for key, value in values.items():
            if key not in known:
                raise ConfigError(f"{section}.{key}", "unknown key")
            known[key] = value

    def with_overrides(self, overrides: Iterable[Tuple[str, str]]) -> 'RunConfig':
        """
        上書き指定を適用した新しい設定を返す

        Args:
            overrides: ('section.key', 'YAML で解釈する値') の列
        """
        sections = {name: dict(values) for name, values in self.sections.items()}
        for key, raw in overrides:
            if '.' not in key:
                raise ConfigError(key, "override must be written as section.key")
            section, name = key.split('.', 1)
            try:
                value = yaml.safe_load(raw)
            except yaml.YAMLError as e:
                raise ConfigError(key, f"cannot parse value {raw!r}: {e}") from e
            if section not in sections:
                raise ConfigError(section, f"unknown section (expected one of {sorted(SECTION_TYPES)})")
            if name not in sections[section]:
                raise ConfigError(key, "unknown key")
            sections[section][name] = value
            logger.debug(f"Override {key} = {value!r}")
        return RunConfig(sections)

    def validate(self):
        """全セクションを各設定クラスで検証"""
        self.paths()
        self._build('meta', MetaConfig)
        self._build('baseline', BaselineConfig)
        self._build('eval', EvalConfig)
        self.synth_config()
        backbone = dict(self.sections['backbone'])
        if backbone['input_kind'] == AUTO or backbone['input_shape'] is None:
            # 形状以外の項目だけを検証する
            backbone.update(input_kind='vector', input_shape=[1])
        self._build('backbone', BackboneConfig, backbone)

    def _build(self, section: str, cls, values: Optional[dict] = None):
        values = self.sections[section] if values is None else values
        try:
            return cls(**values)
        except (TypeError, ValueError) as e:
            field_name = getattr(e, 'field', None)
            raise ConfigError(f"{section}.{field_name}" if field_name else section, str(e)) from e

    def paths(self) -> PathsConfig:
        return self._build('paths', PathsConfig)

    def resolve_path(self, workdir: Union[str, Path], name: str) -> Optional[Path]:
        """paths.<name> を workdir からの絶対パスにする"""
        value = getattr(self.paths(), name)
        if value is None:
            return None
        path = Path(value)
        return path if path.is_absolute() else Path(workdir) / path

    def backbone_config(self, dataset: Dataset) -> BackboneConfig:
        """
        データセットから入力の種類・形状を補ったバックボーン設定

        Raises:
            ConfigError: 指定された入力がデータセットと一致しない
        """
        values = dict(self.sections['backbone'])
        if values['input_kind'] == AUTO:
            values['input_kind'] = dataset.input_kind
        elif values['input_kind'] != dataset.input_kind:
            raise ConfigError('backbone.input_kind',
                              f"{values['input_kind']!r} does not match dataset kind {dataset.input_kind!r}")
        if values['input_shape'] is None:
            values['input_shape'] = list(dataset.input_shape)
        elif tuple(values['input_shape']) != dataset.input_shape:
            raise ConfigError('backbone.input_shape',
                              f"{list(values['input_shape'])} does not match dataset shape {list(dataset.input_shape)}")
        return self._build('backbone', BackboneConfig, values)

    def meta_config(self, dataset: Optional[Dataset] = None) -> MetaConfig:
        config = self._build('meta', MetaConfig)
        return config.resolved(len(dataset.attributes)) if dataset is not None else config

    def baseline_config(self) -> BaselineConfig:
        return self._build('baseline', BaselineConfig)

    def eval_config(self) -> EvalConfig:
        return self._build('eval', EvalConfig)

    def synth_config(self) -> SynthConfig:
        try:
            return SynthConfig(**self.sections['synth'])
        except SynthConfigError as e:
            raise ConfigError(f"synth.{e.field}", str(e)) from e
        except TypeError as e:
            raise ConfigError('synth', str(e)) from e

    def effective(self, dataset: Optional[Dataset] = None) -> Dict[str, Dict[str, Any]]:
        """デフォルト値とデータセット由来の値を埋めた設定"""
        data = {name: _plain(dict(values)) for name, values in self.sections.items()}
        if dataset is not None:
            data['backbone'] = _plain(self.backbone_config(dataset).to_dict())
            meta = self.meta_config(dataset)
            data['meta']['meta_batch_size'] = meta.meta_batch_size
            if data['baseline']['iterations'] is None:
                data['baseline']['iterations'] = self.baseline_config().resolved(meta).iterations
        return data

    def write_effective(self, directory: Union[str, Path], dataset: Optional[Dataset] = None) -> Path:
        """effective_config.yaml を出力ディレクトリに書く"""
        text = yaml.safe_dump(self.effective(dataset), sort_keys=True, default_flow_style=False)
        return atomic_write_text(Path(directory) / Config.EFFECTIVE_CONFIG_NAME, text)
