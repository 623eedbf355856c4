"""Single-layer Transformer encoders (Con and Add) and attention identifiability analysis."""

__version__ = "0.1.0"
