"""Few-shot novel-label node classification with meta-learned embedding
transformations."""

__version__ = "0.1.0"
