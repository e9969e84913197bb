"""Batch-based zero-shot anomaly detection.

A test batch is scored against itself: every patch token is compared with
its nearest counterpart in every other image/volume of the batch, and the
resulting mutual-distance statistics drive anomaly scoring, the mining of
suspicious near-duplicate links, community-based filtering of repeated
anomalies, and final multi-layer multi-scale rescoring.
"""

__version__ = "0.1.0"

from batchad.errors import (
    CollectionExhausted,
    ConfigError,
    DataError,
    SchemaError,
)

__all__ = [
    "CollectionExhausted",
    "ConfigError",
    "DataError",
    "SchemaError",
    "__version__",
]
