"""Mid-level CNN representations for face attribute prediction."""
