"""gapfill: general-purpose incomplete-time-series imputation.

A patch-token causal transformer trained with dual-mask reconstruction and a
contrastive auxiliary objective, adaptable to new domains through per-layer
key/value prefixes, plus the variable-wise benchmarking harness and the HTTP
service / CLI front ends.
"""

__version__ = "0.1.0"
