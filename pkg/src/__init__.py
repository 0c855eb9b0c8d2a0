"""
キーポイント位置合わせツール

学習したキーポイントの閉形式フィットで3次元ボリュームを剛体・アフィン位置合わせする。
"""

__version__ = "0.1.0"
