"""factlab: a desk-scale laboratory for the head/tail imbalance mechanism of
factual errors in small autoregressive language models, and for the
preference-based continual-training remedy."""

__version__ = "0.1.0"
