"""
アプリケーション設定ファイル
"""
from pathlib import Path


class Config:
    """アプリケーション設定"""

    APP_NAME = 'meta_au'

    # プロジェクトパス
    PROJECT_DIR = Path(__file__).parent.absolute()
    LOG_DIR = PROJECT_DIR / 'logs'

    # 数値設定
    PROB_EPSILON = 1e-7  # 確率のクランプ幅 [ε, 1-ε]
    BATCHNORM_EPSILON = 1e-5
    PREDICTION_THRESHOLD = 0.5  # p > 0.5 のみ陽性（0.5ちょうどは陰性）

    # チェックポイント設定
    CHECKPOINT_MAGIC = 'MAUCKPT 1'
    CHECKPOINT_SUFFIX = '.ckpt'
    SIDECAR_SUFFIX = '.json'
    PROGRESS_SUFFIX = '.progress.jsonl'

    # マニフェスト設定
    MANIFEST_HEADER = 'manifest.json'
    MANIFEST_LABELS = 'labels.csv'
    MANIFEST_EXAMPLES = 'examples.csv'
    MANIFEST_FEATURES = 'features.f32'
    MANIFEST_IMAGE_DIR = 'images'
    SUPPORTED_IMAGE_FORMATS = ['.png', '.jpg', '.jpeg', '.bmp', '.webp']

    # 出力設定
    EFFECTIVE_CONFIG_NAME = 'effective_config.yaml'
    REPORT_FLOAT_FORMAT = '%.6f'

    @classmethod
    def ensure_directories(cls):
        """必要なディレクトリを作成"""
        cls.LOG_DIR.mkdir(parents=True, exist_ok=True)
