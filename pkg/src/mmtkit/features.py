"""Binary image-feature files and the in-memory store backing training.

A feature file holds one (L, D) float32 matrix of region vectors per
corpus example.  Layout, all integers little-endian:

    magic 'MMTF' | u32 version=1 | u32 count | u32 L | u32 D
    then per record: u32 id byte-length | UTF-8 id | L*D little-endian
    float32, row-major

Record ids follow the corpus convention ``<row>_<image_id>`` where
``row`` is the 0-based TSV row index, so one image backing several rows
still yields unique ids.  The same layout is produced by the standalone
extractor utility; this module also generates seeded synthetic files so
the toolkit's tests and demos need no image pipeline at all.
"""

from __future__ import annotations

import struct
from typing import Iterable, Sequence

import numpy as np

from .autodiff import make_rng

MAGIC = b"MMTF"
VERSION = 1


class FeatureFormatError(ValueError):
    """Feature file violates the MMTF layout."""


def feature_key(row_index: int, image_id: str) -> str:
    """Record id for a corpus row: 0-based row index + '_' + image id."""
    return f"{row_index}_{image_id}"


class FeatureStore:
    """Ordered id -> (L, D) float32 matrix map read from one file."""

    def __init__(self, n_regions: int, dim: int):
        if n_regions < 1 or dim < 1:
            raise ValueError("feature dims must be >= 1")
        self.n_regions = n_regions
        self.dim = dim
        self._records: dict[str, np.ndarray] = {}

    def __len__(self) -> int:
        return len(self._records)

    def __contains__(self, key: str) -> bool:
        return key in self._records

    def __getitem__(self, key: str) -> np.ndarray:
        try:
            return self._records[key]
        except KeyError:
            raise KeyError(f"no features stored for id {key!r}") from None

    def ids(self) -> list[str]:
        return list(self._records)

    def add(self, key: str, features) -> None:
        arr = np.asarray(features, dtype=np.float32)
        if arr.shape != (self.n_regions, self.dim):
            raise ValueError(
                f"features for id {key!r} have shape {arr.shape}, "
                f"expected ({self.n_regions}, {self.dim})"
            )
        if not np.isfinite(arr).all():
            raise ValueError(f"features for id {key!r} contain non-finite values")
        if key in self._records:
            raise ValueError(f"duplicate feature id {key!r}")
        self._records[key] = arr

    def zero_matrix(self) -> np.ndarray:
        """All-zero visual input used by the text-only training phase."""
        return np.zeros((self.n_regions, self.dim), dtype=np.float32)


def write_features(path, records: Iterable[tuple[str, np.ndarray]],
                   n_regions: int, dim: int) -> int:
    """Write records to `path`; returns the record count."""
    items = []
    for key, arr in records:
        a = np.asarray(arr, dtype=np.float32)
        if a.shape != (n_regions, dim):
            raise ValueError(
                f"features for id {key!r} have shape {a.shape}, "
                f"expected ({n_regions}, {dim})"
            )
        items.append((key, a))
    with open(path, "wb") as fp:
        fp.write(MAGIC)
        fp.write(struct.pack("<IIII", VERSION, len(items), n_regions, dim))
        for key, a in items:
            raw = key.encode("utf-8")
            fp.write(struct.pack("<I", len(raw)))
            fp.write(raw)
            fp.write(a.astype("<f4", copy=False).tobytes(order="C"))
    return len(items)


def read_features(path) -> FeatureStore:
    with open(path, "rb") as fp:
        blob = fp.read()
    if blob[:4] != MAGIC:
        raise FeatureFormatError(f"{path}: bad magic {blob[:4]!r}, expected {MAGIC!r}")
    if len(blob) < 20:
        raise FeatureFormatError(f"{path}: truncated header")
    version, count, n_regions, dim = struct.unpack_from("<IIII", blob, 4)
    if version != VERSION:
        raise FeatureFormatError(f"{path}: unsupported version {version}")
    if n_regions < 1 or dim < 1:
        raise FeatureFormatError(f"{path}: invalid dims L={n_regions} D={dim}")
    store = FeatureStore(n_regions, dim)
    offset = 20
    payload = 4 * n_regions * dim
    for _ in range(count):
        if offset + 4 > len(blob):
            raise FeatureFormatError(f"{path}: truncated at record {len(store)}")
        (id_len,) = struct.unpack_from("<I", blob, offset)
        offset += 4
        if offset + id_len + payload > len(blob):
            raise FeatureFormatError(f"{path}: truncated at record {len(store)}")
        key = blob[offset : offset + id_len].decode("utf-8")
        offset += id_len
        arr = np.frombuffer(blob, dtype="<f4", count=n_regions * dim, offset=offset)
        offset += payload
        try:
            store.add(key, arr.reshape(n_regions, dim))
        except ValueError as exc:
            raise FeatureFormatError(f"{path}: {exc}") from None
    if offset != len(blob):
        raise FeatureFormatError(f"{path}: {len(blob) - offset} trailing bytes after {count} records")
    return store


def synthetic_features(keys: Sequence[str], n_regions: int = 49, dim: int = 512,
                       seed: int = 0) -> list[tuple[str, np.ndarray]]:
    """Deterministic stand-in features, one record per key in order.

    Values are uniform in [0, 1); each record depends only on the seed
    and its position, so regenerating with the same arguments is
    bitwise identical.
    """
    rng = make_rng(seed, stream=7)
    return [(key, rng.random((n_regions, dim), dtype=np.float32)) for key in keys]
