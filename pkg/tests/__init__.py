"""静的解析分類ツールのテストパッケージ。"""
