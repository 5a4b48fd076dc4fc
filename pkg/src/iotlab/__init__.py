"""Instance-wise layer-order routing for small seq2seq transformers."""

__version__ = "0.1.0"
