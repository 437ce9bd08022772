"""
パラメータのチェックポイント保存・読み込み

本体ファイルはレイアウトのヘッダー（名前・オフセット・長さ）の後に
リトルエンディアンの float32 を並べたもの。
同名の .json サイドカーにバックボーン設定・由来（meta / baseline）・
学習属性・テスト被験者・内容の SHA-256 を書く。
"""
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Union

import numpy as np
import torch

from config import Config
from core.backbone import BackboneConfig, ParameterLayout, ParameterVector
from utils.fileio import atomic_write_bytes, atomic_write_text
from utils.logger import get_logger

logger = get_logger(__name__)

ORIGINS = ('meta', 'baseline')
_END = 'END'


class CheckpointError(ValueError):
    """チェックポイントが壊れている、または設定と一致しない"""


@dataclass(frozen=True, eq=False)
class Checkpoint:
    """読み込んだチェックポイント"""
    params: ParameterVector
    origin: str
    attributes: tuple = ()
    fold: Optional[str] = None
    extra: dict = field(default_factory=dict)

    @property
    def config(self) -> BackboneConfig:
        return self.params.layout.config


def sidecar_path(path: Union[str, Path]) -> Path:
    path = Path(path)
    return path.with_name(path.name + Config.SIDECAR_SUFFIX)


def _encode(params: ParameterVector) -> bytes:
    lines = [Config.CHECKPOINT_MAGIC]
    for slot in params.layout.slots:
        shape = 'x'.join(str(s) for s in slot.shape)
        lines.append(f"{slot.name} {slot.offset} {slot.length} {shape}")
    lines.append(_END)
    header = ('\n'.join(lines) + '\n').encode('ascii')
    values = params.values.detach().cpu().numpy().astype('<f4')
    return header + values.tobytes(order='C')


def _decode(data: bytes, path: Path) -> tuple:
    # ヘッダー行を END まで読み、残りを float32 として解釈する
    slots = []
    pos = 0
    first = True
    while True:
        end = data.find(b'\n', pos)
        if end < 0:
            raise CheckpointError(f"{path}: truncated header")
        line = data[pos:end].decode('ascii', errors='replace')
        pos = end + 1
        if first:
            if line != Config.CHECKPOINT_MAGIC:
                raise CheckpointError(f"{path}: not a checkpoint file (magic {line!r})")
            first = False
            continue
        if line == _END:
            break
        parts = line.split()
        if len(parts) != 4:
            raise CheckpointError(f"{path}: malformed layout line {line!r}")
        name, offset, length, shape = parts
        slots.append((name, int(offset), int(length), tuple(int(s) for s in shape.split('x'))))

    payload = data[pos:]
    if len(payload) % 4:
        raise CheckpointError(f"{path}: payload of {len(payload)} bytes is not a whole number of float32 values")
    return slots, np.frombuffer(payload, dtype='<f4')


def save_checkpoint(params: ParameterVector, path: Union[str, Path], origin: str,
                    attributes: Sequence[str] = (), fold: Optional[str] = None,
                    extra: Optional[dict] = None) -> Path:
    """
    チェックポイントとサイドカーを書き出す

    Args:
        params: 保存するパラメータ（レイアウトにバックボーン設定を持つこと）
        path: 保存先
        origin: 'meta' または 'baseline'
        attributes: 学習に使った属性
        fold: LOSO のテスト被験者（全被験者で学習した場合は None）
        extra: サイドカーに追加で書く情報

    Returns:
        保存先のパス
    """
    if origin not in ORIGINS:
        raise ValueError(f"origin must be one of {ORIGINS}, got {origin!r}")
    config = params.layout.config
    if config is None:
        raise CheckpointError("Parameters carry no backbone configuration")

    path = Path(path)
    data = _encode(params)
    atomic_write_bytes(path, data)

    sidecar = {
        'backbone': config.to_dict(),
        'origin': origin,
        'attributes': list(attributes),
        'fold': fold,
        'n_parameters': params.layout.size,
        'layout_checksum': params.layout.checksum(),
        'sha256': hashlib.sha256(data).hexdigest(),
        'extra': extra or {},
    }
    atomic_write_text(sidecar_path(path), json.dumps(sidecar, indent=2, sort_keys=True) + '\n')
    logger.info(f"Checkpoint saved: {path} ({origin}, fold={fold}, {params.layout.size} parameters)")
    return path


def load_checkpoint(path: Union[str, Path]) -> Checkpoint:
    """
    チェックポイントを読み込み、サイドカーと照合する

    Raises:
        FileNotFoundError: 本体またはサイドカーがない
        CheckpointError: チェックサム・レイアウトの不一致
    """
    path = Path(path)
    meta_path = sidecar_path(path)
    for p in (path, meta_path):
        if not p.exists():
            logger.error(f"Checkpoint file not found: {p}")
            raise FileNotFoundError(f"Checkpoint file not found: {p}")

    data = path.read_bytes()
    try:
        sidecar = json.loads(meta_path.read_text(encoding='utf-8'))
    except json.JSONDecodeError as e:
        raise CheckpointError(f"{meta_path}: invalid JSON ({e.msg})") from e

    if hashlib.sha256(data).hexdigest() != sidecar.get('sha256'):
        logger.error(f"Checksum mismatch for {path}")
        raise CheckpointError(f"{path}: content checksum does not match {meta_path.name}")

    try:
        config = BackboneConfig.from_dict(sidecar['backbone'])
    except (KeyError, TypeError, ValueError) as e:
        raise CheckpointError(f"{meta_path}: invalid backbone configuration ({e})") from e
    layout = ParameterLayout.from_config(config)

    slots, values = _decode(data, path)
    expected = [(s.name, s.offset, s.length, tuple(s.shape)) for s in layout.slots]
    if slots != expected:
        raise CheckpointError(f"{path}: layout header does not match the backbone configuration in {meta_path.name}")
    if values.size != layout.size:
        raise CheckpointError(f"{path}: holds {values.size} values, layout expects {layout.size}")

    params = ParameterVector(torch.from_numpy(values.astype(np.float32)).to(config.torch_dtype), layout)
    origin = sidecar.get('origin')
    if origin not in ORIGINS:
        raise CheckpointError(f"{meta_path}: unknown origin {origin!r}")
    logger.info(f"Checkpoint loaded: {path} ({origin}, fold={sidecar.get('fold')})")
    return Checkpoint(
        params=params,
        origin=origin,
        attributes=tuple(sidecar.get('attributes', ())),
        fold=sidecar.get('fold'),
        extra=sidecar.get('extra', {}),
    )


class CheckpointStore:
    """<root>/<origin>/fold_<被験者>.ckpt と <root>/<origin>/all.ckpt を扱う"""

    def __init__(self, root: Union[str, Path]):
        self.root = Path(root)
        logger.debug(f"Checkpoint store: {self.root}")

    def path(self, origin: str, fold: Optional[str]) -> Path:
        if origin not in ORIGINS:
            raise ValueError(f"origin must be one of {ORIGINS}, got {origin!r}")
        name = 'all' if fold is None else f"fold_{fold}"
        return self.root / origin / f"{name}{Config.CHECKPOINT_SUFFIX}"

    def exists(self, origin: str, fold: Optional[str]) -> bool:
        return self.path(origin, fold).exists()

    def save(self, params: ParameterVector, origin: str, fold: Optional[str],
             attributes: Sequence[str] = (), extra: Optional[dict] = None) -> Path:
        return save_checkpoint(params, self.path(origin, fold), origin, attributes, fold, extra)

    def load(self, origin: str, fold: Optional[str]) -> Checkpoint:
        checkpoint = load_checkpoint(self.path(origin, fold))
        if checkpoint.origin != origin:
            raise CheckpointError(f"{self.path(origin, fold)} is tagged {checkpoint.origin!r}, expected {origin!r}")
        return checkpoint

    def folds(self, origin: str) -> List[str]:
        """保存済みのフォールド（テスト被験者）の一覧"""
        directory = self.root / origin
        if not directory.is_dir():
            return []
        prefix = 'fold_'
        return sorted(
            p.name[len(prefix):-len(Config.CHECKPOINT_SUFFIX)]
            for p in directory.glob(f"{prefix}*{Config.CHECKPOINT_SUFFIX}")
        )
