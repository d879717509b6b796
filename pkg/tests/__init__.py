# Tests for btc-chord
