"""
アトミックなファイル書き込み
"""
import os
from contextlib import contextmanager
from pathlib import Path
from typing import Iterator, Union

from utils.logger import get_logger

logger = get_logger(__name__)

PathLike = Union[str, Path]


@contextmanager
def atomic_path(path: PathLike) -> Iterator[Path]:
    """
    一時ファイルへ書き込ませ、成功時のみ最終パスへ置き換える

    一時ファイル名を経由して競合を回避する。

    Args:
        path: 最終的な書き込み先

    Yields:
        書き込み用の一時パス
    """
    final_path = Path(path)
    final_path.parent.mkdir(parents=True, exist_ok=True)
    temp_path = final_path.parent / f".tmp_{final_path.name}"

    try:
        yield temp_path
        os.replace(temp_path, final_path)
        logger.debug(f"Wrote {final_path}")
    except BaseException:
        if temp_path.exists():
            temp_path.unlink()
        logger.error(f"Failed to write {final_path}")
        raise


def atomic_write_bytes(path: PathLike, data: bytes) -> Path:
    """バイト列をアトミックに書き込む"""
    with atomic_path(path) as temp_path:
        temp_path.write_bytes(data)
    return Path(path)


def atomic_write_text(path: PathLike, text: str) -> Path:
    """テキストをアトミックに書き込む（UTF-8, 改行は LF 固定）"""
    with atomic_path(path) as temp_path:
        with open(temp_path, 'w', encoding='utf-8', newline='\n') as f:
            f.write(text)
    return Path(path)
