"""
AU検出器の few-shot メタ学習ツール
メインエントリーポイント
"""
import sys
from pathlib import Path

# プロジェクトルートをパスに追加
sys.path.insert(0, str(Path(__file__).parent))

from cli.app import main as cli_main
from config import Config


def main():
    """アプリケーションエントリーポイント"""
    # 必要なディレクトリを作成
    Config.ensure_directories()
    sys.exit(cli_main(sys.argv[1:]))


if __name__ == '__main__':
    main()
