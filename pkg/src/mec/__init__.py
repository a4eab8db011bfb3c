"""Two-stage embedding compression for CTR models.

Stage 1 pretrains dense embeddings with a small CTR model, then learns
product-quantization codebooks with popularity-weighted entropy
regularization and a contrastive term. Stage 2 retrains the CTR model on
the frozen code assignments and reports accuracy / memory / latency
trade-offs against a dense baseline.
"""

__version__ = "0.1.0"

VARIANTS = ("MEC", "no_cons", "no_reg", "basic_pq", "freq_pq", "dense_baseline")
