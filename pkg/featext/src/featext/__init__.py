"""Offline image-region feature extraction for the mmtkit translator."""

from featext.extract import (
    ExtractError,
    FeatureNet,
    extract,
    read_rows,
    write_features,
)

__all__ = [
    "ExtractError",
    "FeatureNet",
    "extract",
    "read_rows",
    "write_features",
]
