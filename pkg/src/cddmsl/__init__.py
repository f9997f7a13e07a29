"""Cross-domain descriptive multi-scale learning for semi-supervised domain-generalized detection."""

__version__ = "0.1.0"
