"""periloom: postoperative-risk prediction from short procedure notes.

Synthetic note corpora with planted token signals, classic word embeddings
and a small from-scratch transformer as document encoders, four fine-tuning
strategies, boosted-tree/linear/forest predictors, and a stratified nested
cross-validation harness with fold-aggregated reports.
"""

__version__ = "0.1.0"
