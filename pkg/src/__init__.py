"""固体と流体の侵入のない結合シミュレーション."""
