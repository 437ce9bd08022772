"""
画像ペイロードディレクトリのスキャンと読み書き
"""
from pathlib import Path
from typing import Dict, List, Sequence, Tuple

import numpy as np
from PIL import Image

from config import Config
from utils.logger import get_logger

logger = get_logger(__name__)


class ImageScanner:
    """example_id ごとに1ファイルの画像ディレクトリを扱う"""

    SUPPORTED_EXTENSIONS = set(Config.SUPPORTED_IMAGE_FORMATS)

    def __init__(self):
        """画像スキャナーを初期化"""
        logger.debug("ImageScanner initialized")

    def scan_folder(self, folder_path: Path) -> Dict[str, Path]:
        """
        フォルダ内の画像ファイルをスキャン

        Args:
            folder_path: スキャン対象フォルダ

        Returns:
            {ファイル名の stem (= example_id): パス}

        Raises:
            FileNotFoundError: フォルダが存在しない
            ValueError: 同じ stem のファイルが複数ある
        """
        folder = Path(folder_path)
        if not folder.exists():
            logger.error(f"Image folder not found: {folder}")
            raise FileNotFoundError(f"Image folder not found: {folder}")

        if not folder.is_dir():
            logger.error(f"Path is not a directory: {folder}")
            raise NotADirectoryError(f"Path is not a directory: {folder}")

        found: Dict[str, Path] = {}
        for file in sorted(folder.iterdir(), key=lambda x: x.name):
            if not (file.is_file() and file.suffix.lower() in self.SUPPORTED_EXTENSIONS):
                continue
            if file.stem in found:
                raise ValueError(f"Duplicate image files for example {file.stem!r}: {found[file.stem].name}, {file.name}")
            found[file.stem] = file

        logger.info(f"Found {len(found)} image files in {folder}")
        return found

    def load_images(self, folder_path: Path, example_ids: Sequence[str],
                    shape: Tuple[int, int, int]) -> np.ndarray:
        """
        example_id の順に画像を読み込み (N, C, H, W) の配列にする

        画素値は [0, 1] に正規化する。サイズ変更は行わない。

        Args:
            folder_path: 画像フォルダ
            example_ids: 読み込む example_id（出力の行順）
            shape: (C, H, W)

        Returns:
            float32 配列

        Raises:
            FileNotFoundError: example_id に対応する画像がない
            ValueError: チャンネル数またはサイズが一致しない
        """
        channels, height, width = shape
        if channels not in (1, 3):
            raise ValueError(f"Image payloads must have 1 or 3 channels, got {channels}")
        mode = 'L' if channels == 1 else 'RGB'

        files = self.scan_folder(folder_path)
        missing = [eid for eid in example_ids if eid not in files]
        if missing:
            logger.error(f"{len(missing)} examples have no image file")
            raise FileNotFoundError(f"No image file for examples {missing[:5]} in {folder_path}")

        out = np.empty((len(example_ids), channels, height, width), dtype=np.float32)
        for row, eid in enumerate(example_ids):
            with Image.open(files[eid]) as img:
                if img.size != (width, height):
                    raise ValueError(
                        f"Image {files[eid].name} has size {img.size[0]}x{img.size[1]}, expected {width}x{height}"
                    )
                pixels = np.asarray(img.convert(mode), dtype=np.float32) / 255.0
            if channels == 1:
                out[row, 0] = pixels
            else:
                out[row] = pixels.transpose(2, 0, 1)
        return out

    def save_images(self, folder_path: Path, example_ids: Sequence[str], images: np.ndarray) -> List[Path]:
        """
        (N, C, H, W) の [0, 1] 配列を PNG として保存

        Returns:
            書き込んだパスのリスト
        """
        folder = Path(folder_path)
        folder.mkdir(parents=True, exist_ok=True)
        paths = []
        for eid, image in zip(example_ids, images):
            pixels = np.clip(np.rint(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
            if pixels.shape[0] == 1:
                img = Image.fromarray(pixels[0])
            else:
                img = Image.fromarray(np.ascontiguousarray(pixels.transpose(1, 2, 0)))
            path = folder / f"{eid}.png"
            tmp = folder / f".tmp_{eid}.png"
            img.save(tmp, format='PNG')
            tmp.replace(path)
            paths.append(path)
        logger.info(f"Saved {len(paths)} images to {folder}")
        return paths
