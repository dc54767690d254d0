"""シーン設定と診断出力の列定義."""
