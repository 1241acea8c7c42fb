"""Gated fusion of sentence embeddings with auxiliary lyric features.

Modules:

- ``features``: auxiliary text features and z-score scaling
- ``data``: ingestion, binary reframing, stratified splits, synthetic data
- ``sfl``: the gated fusion classifier and its trainer
- ``forest``: random forest baseline with MDI importances
- ``metrics``: threshold, probability and ranking metrics
- ``experiment``: the batch pipeline used by the command line
"""

__version__ = "0.1.0"
