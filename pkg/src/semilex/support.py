"""The two recognition-confidence metrics backing the integrity constraints.

Global support: exact k-nearest-neighbour voting over penultimate-layer
embeddings.  The support of class c is (neighbours tagged c) / k, with
neighbours ranked by Euclidean distance and ties at the k-th distance broken
by lower entry ordinal.  The search is a full scan plus a stable sort, so it
is exactly the brute-force computation, just vectorised.

Local support: mean matched-feature descriptor distance between a token and
the same-tagged tokens appearing in the same word (low values mean the same
writer or object produced them).  When some pair has no matched features the
result is the sentinel :data:`INCOMPARABLE`.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from . import descriptors as desc
from ._kernels import pairwise_sqdist
from .core import DIGITS, Alphabet
from .errors import FormatError, InputError, ParameterError
from .nn import EMBED_DIM, Model, embed_batch

__all__ = [
    "INCOMPARABLE",
    "SupportMap",
    "EmbeddingIndex",
    "build_index",
    "global_support",
    "global_support_batch",
    "local_support",
    "is_globally_consistent",
    "is_locally_consistent",
    "save_index",
    "load_index",
]


class _Incomparable:
    """Result of a local-support query with no matched features anywhere."""

    __slots__ = ()
    _instance = None

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __repr__(self) -> str:
        return "INCOMPARABLE"

    def __bool__(self) -> bool:
        return False


INCOMPARABLE = _Incomparable()


@dataclass(frozen=True)
class SupportMap:
    """Per-symbol recognition confidence; values are neighbour fractions."""

    weights: Mapping = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "weights", dict(self.weights))
        for sym, w in self.weights.items():
            if not 0.0 <= w <= 1.0:
                raise InputError(f"support weight for {sym!r} is {w}, outside [0, 1]")
        if sum(self.weights.values()) > 1.0 + 1e-9:
            raise InputError("support weights sum above 1")

    def get(self, symbol) -> float:
        return self.weights.get(symbol, 0.0)

    def total(self) -> float:
        return float(sum(self.weights.values()))

    def top(self):
        """(symbol, weight) of the best-supported symbol; None when empty."""
        if not self.weights:
            return None
        return max(self.weights.items(), key=lambda kv: (kv[1], -_rank(kv[0])))

    def entropy(self) -> float:
        w = np.array([v for v in self.weights.values() if v > 0.0])
        if w.size == 0:
            return 0.0
        return float(-(w * np.log(w)).sum())


def _rank(symbol) -> float:
    # Deterministic tie-break for top(): smaller symbols win among equals.
    try:
        return float(symbol)
    except (TypeError, ValueError):
        return float(abs(hash(symbol)) % 10**9)


@dataclass
class EmbeddingIndex:
    """Immutable store of (embedding, tag) training entries.

    ``tags`` holds integer codes into ``alphabet``; ``k_default`` is the
    neighbour count used when a query does not pass its own.
    """

    embeddings: np.ndarray
    tags: np.ndarray
    alphabet: Alphabet = DIGITS
    k_default: int = 1000

    def __post_init__(self):
        self.embeddings = np.ascontiguousarray(self.embeddings, dtype=np.float64)
        self.tags = np.ascontiguousarray(self.tags, dtype=np.int64)
        if self.embeddings.ndim != 2 or self.embeddings.shape[1] != EMBED_DIM:
            raise InputError(
                f"embeddings must be (n, {EMBED_DIM}), got {self.embeddings.shape}"
            )
        if self.tags.shape != (self.embeddings.shape[0],):
            raise InputError("one tag per embedding required")
        if self.tags.size and (self.tags.min() < 0 or self.tags.max() >= len(self.alphabet)):
            raise InputError("tag codes must index the alphabet")
        if not 1 <= self.k_default <= max(1, len(self)):
            raise ParameterError(
                f"k_default {self.k_default} outside 1..{len(self)}"
            )

    def __len__(self) -> int:
        return int(self.embeddings.shape[0])

    def symbol(self, code: int):
        return self.alphabet.symbols[code]


def build_index(model: Model, training, alphabet: Alphabet = DIGITS,
                k_default: int | None = None, batch_size: int = 256) -> EmbeddingIndex:
    """Embed every training image; entry tags are the training labels."""
    images = np.asarray(training.images, dtype=np.float64)
    labels = np.asarray(training.labels, dtype=np.int64)
    if images.shape[0] == 0:
        raise InputError("cannot build an index from an empty training set")
    chunks = [
        embed_batch(model, images[s:s + batch_size])
        for s in range(0, images.shape[0], batch_size)
    ]
    embeddings = np.concatenate(chunks, axis=0)
    codes = np.array([alphabet.index(int(lbl)) for lbl in labels], dtype=np.int64)
    if k_default is None:
        k_default = min(1000, len(labels))
    return EmbeddingIndex(embeddings=embeddings, tags=codes, alphabet=alphabet,
                          k_default=k_default)


def _check_query(index: EmbeddingIndex, k: int | None) -> int:
    k = index.k_default if k is None else k
    if k < 1 or k > len(index):
        raise ParameterError(f"k={k} outside 1..{len(index)} (index size)")
    return k


def global_support(index: EmbeddingIndex, query: np.ndarray, k: int | None = None) -> SupportMap:
    """Support map of one query embedding from its k nearest index entries."""
    return global_support_batch(index, np.asarray(query, dtype=np.float64)[None], k)[0]


def global_support_batch(index: EmbeddingIndex, queries: np.ndarray,
                         k: int | None = None) -> list:
    """Vectorised :func:`global_support` over a batch of query embeddings."""
    k = _check_query(index, k)
    queries = np.asarray(queries, dtype=np.float64)
    if queries.ndim != 2 or queries.shape[1] != EMBED_DIM:
        raise InputError(f"queries must be (m, {EMBED_DIM}), got {queries.shape}")
    d2 = pairwise_sqdist(queries, index.embeddings)
    maps = []
    n_symbols = len(index.alphabet)
    for row in d2:
        order = np.argsort(row, kind="stable")[:k]  # stable: ordinal breaks ties
        counts = np.bincount(index.tags[order], minlength=n_symbols)
        weights = {
            index.symbol(code): counts[code] / k
            for code in range(n_symbols)
            if counts[code] > 0
        }
        maps.append(SupportMap(weights=weights))
    return maps


def is_globally_consistent(support: SupportMap, symbol, lower_bound: float) -> bool:
    """True when the symbol's support clears the lower confidence bound.

    Unknown symbols have zero support and fail for any positive bound.
    """
    if not 0.0 <= lower_bound <= 1.0:
        raise ParameterError(f"lower_bound must lie in [0, 1], got {lower_bound}")
    return support.get(symbol) >= lower_bound


def _as_descriptor(token) -> desc.LocalDescriptor:
    if isinstance(token, desc.LocalDescriptor):
        return token
    return desc.extract(np.asarray(token, dtype=np.float64))


def local_support(token, similar_tokens, descriptor_fn=None):
    """Mean matched-feature distance between a token and its same-tag peers.

    ``token`` and the members of ``similar_tokens`` may be images or
    pre-extracted :class:`~semilex.descriptors.LocalDescriptor` objects
    (callers that compare the same tokens repeatedly should pre-extract).
    Returns a nonnegative float, or :data:`INCOMPARABLE` when some pair has
    no matched features.
    """
    if len(similar_tokens) == 0:
        raise ParameterError("similar_tokens must be non-empty")
    if descriptor_fn is None:
        descriptor_fn = _as_descriptor
    token_desc = descriptor_fn(token)
    means = []
    for peer in similar_tokens:
        m, mean = desc.mean_feature_distance(token_desc, descriptor_fn(peer))
        if m == 0:
            return INCOMPARABLE
        means.append(mean)
    return float(np.mean(means))


def is_locally_consistent(value, tolerance: float) -> bool:
    """True when the local-support value does not exceed the tolerance.

    An incomparable value passes: missing matched features is not evidence of
    dissimilarity.
    """
    if value is INCOMPARABLE or value is None:
        return True
    return value <= tolerance


# ---------------------------------------------------------------------------
# persistence: little-endian binary, versioned header
#
#   magic     4s   b"SLXI"
#   version   u32  1
#   count     u64  entries
#   dim       u32  128
#   k_default u32
#   n_symbols u32, then per symbol: u16 length + utf-8 bytes
#   tags:     count x u16 codes
#   embeddings: count x dim float64 LE
# ---------------------------------------------------------------------------

_MAGIC = b"SLXI"
_VERSION = 1


def save_index(index: EmbeddingIndex, path) -> None:
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<IQII", _VERSION, len(index), EMBED_DIM, index.k_default))
        fh.write(struct.pack("<I", len(index.alphabet)))
        for sym in index.alphabet:
            raw = str(sym).encode("utf-8")
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
        fh.write(index.tags.astype("<u2").tobytes())
        fh.write(np.ascontiguousarray(index.embeddings, dtype="<f8").tobytes())


def load_index(path, alphabet: Alphabet | None = None) -> EmbeddingIndex:
    """Reload an index file.

    Symbols are stored as strings; pass ``alphabet`` to restore non-string
    symbols (defaults to the digit alphabet when the stored symbols are all
    digits).
    """
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != _MAGIC:
        raise FormatError(f"{path}: bad magic {blob[:4]!r}, expected {_MAGIC!r}")
    version, count, dim, k_default = struct.unpack_from("<IQII", blob, 4)
    if version != _VERSION:
        raise FormatError(f"{path}: unsupported index version {version}")
    if dim != EMBED_DIM:
        raise FormatError(f"{path}: embedding dim {dim}, expected {EMBED_DIM}")
    (n_symbols,) = struct.unpack_from("<I", blob, 24)
    off = 28
    symbols = []
    for _ in range(n_symbols):
        (length,) = struct.unpack_from("<H", blob, off)
        off += 2
        symbols.append(blob[off:off + length].decode("utf-8"))
        off += length
    if alphabet is None:
        alphabet = (
            Alphabet(tuple(int(s) for s in symbols))
            if all(s.isdigit() for s in symbols)
            else Alphabet(tuple(symbols))
        )
    if len(alphabet) != n_symbols:
        raise FormatError(f"{path}: alphabet size {len(alphabet)} != stored {n_symbols}")
    tags = np.frombuffer(blob, dtype="<u2", count=count, offset=off).astype(np.int64)
    off += 2 * count
    need = off + 8 * count * dim
    if need > len(blob):
        raise FormatError(f"{path}: truncated embedding blob at offset {off}")
    embeddings = np.frombuffer(blob, dtype="<f8", count=count * dim, offset=off).reshape(count, dim).copy()
    return EmbeddingIndex(embeddings=embeddings, tags=tags, alphabet=alphabet,
                          k_default=k_default)
