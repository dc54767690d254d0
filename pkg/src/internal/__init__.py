"""シミュレーションの内部実装."""
