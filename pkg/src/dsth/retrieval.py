"""Packed binary codes and exhaustive Hamming ranking.

Bit ``l`` of a code lives in word ``l // 64`` at bit position ``l % 64``;
padding bits past the code length are always zero.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import FormatError

DIDX_MAGIC = b"DIDX"
_DIDX_HEADER = struct.Struct("<4sIIQ")
_BIT_WEIGHTS = np.left_shift(np.uint64(1), np.arange(64, dtype=np.uint64))

# popcount of every byte value, for the portable path
_BYTE_POPCOUNT = np.array([bin(i).count("1") for i in range(256)], dtype=np.uint8)


def words_per_code(code_length: int) -> int:
    return (code_length + 63) // 64


def pack(bits) -> np.ndarray:
    """Pack {0,1} bits into uint64 words.

    ``bits`` is a length-L vector (returns ``ceil(L/64)`` words) or an
    ``n x L`` array (returns ``n x ceil(L/64)``).
    """
    b = np.asarray(bits)
    if b.size and not np.all((b == 0) | (b == 1)):
        raise ValueError("pack: entries must be 0 or 1")
    single = b.ndim == 1
    b = np.atleast_2d(b).astype(np.uint64)
    n, L = b.shape
    w = words_per_code(L)
    padded = np.zeros((n, w * 64), dtype=np.uint64)
    padded[:, :L] = b
    words = (padded.reshape(n, w, 64) * _BIT_WEIGHTS).sum(axis=2, dtype=np.uint64)
    return words[0] if single else words


def unpack(words, code_length: int) -> np.ndarray:
    """Inverse of :func:`pack`."""
    w = np.asarray(words, dtype=np.uint64)
    single = w.ndim == 1
    w = np.atleast_2d(w)
    bits = ((w[:, :, None] >> np.arange(64, dtype=np.uint64)) & np.uint64(1)).astype(np.uint8)
    bits = bits.reshape(w.shape[0], -1)[:, :code_length]
    return bits[0] if single else bits


def popcount(words, portable: bool = False) -> np.ndarray:
    """Per-element popcount of uint64 words."""
    w = np.asarray(words, dtype=np.uint64)
    if not portable and hasattr(np, "bitwise_count"):
        return np.bitwise_count(w).astype(np.int64)
    as_bytes = w.reshape(w.shape + (1,)).view(np.uint8)
    return _BYTE_POPCOUNT[as_bytes].sum(axis=-1, dtype=np.int64)


def hamming(a, b, portable: bool = False):
    """Hamming distance between packed codes (broadcasts over leading axes)."""
    a = np.asarray(a, dtype=np.uint64)
    b = np.asarray(b, dtype=np.uint64)
    if a.shape[-1] != b.shape[-1]:
        raise ValueError("hamming: codes have different word counts")
    d = popcount(np.bitwise_xor(a, b), portable=portable).sum(axis=-1)
    return int(d) if np.ndim(d) == 0 else d


@dataclass(frozen=True)
class PackedCodeIndex:
    code_length: int
    words: np.ndarray  # n x words_per_code, uint64
    ids: np.ndarray  # n, uint64

    def __post_init__(self):
        words = np.ascontiguousarray(self.words, dtype=np.uint64)
        ids = np.ascontiguousarray(self.ids, dtype=np.uint64)
        if words.ndim != 2 or words.shape[1] != words_per_code(self.code_length):
            raise ValueError("word array does not match code length")
        if ids.shape != (words.shape[0],):
            raise ValueError("ids must align with codes")
        if np.unique(ids).size != ids.size:
            raise ValueError("ids must be unique")
        pad = self.code_length % 64
        if pad and np.any(words[:, -1] >> np.uint64(pad)):
            raise ValueError("pad bits beyond code length must be zero")
        object.__setattr__(self, "words", words)
        object.__setattr__(self, "ids", ids)

    @classmethod
    def from_bits(cls, bits, ids=None) -> "PackedCodeIndex":
        """Build from an ``n x L`` {0,1} array (one code per row)."""
        bits = np.atleast_2d(np.asarray(bits))
        if ids is None:
            ids = np.arange(bits.shape[0])
        return cls(code_length=bits.shape[1], words=pack(bits), ids=np.asarray(ids))

    @property
    def n(self) -> int:
        return self.words.shape[0]

    def distances(self, query, portable: bool = False) -> np.ndarray:
        return hamming(self.words, np.asarray(query, dtype=np.uint64)[None, :], portable=portable)


def rank(index: PackedCodeIndex, query) -> tuple[np.ndarray, np.ndarray]:
    """Full ranking of the index: ids and distances by (distance, id)."""
    d = index.distances(query)
    order = np.lexsort((index.ids, d))
    return index.ids[order], d[order]


def search_topk(index: PackedCodeIndex, query, k: int) -> list[tuple[int, int]]:
    """The ``k`` nearest codes as ``(id, distance)``, ties by ascending id."""
    if k < 0 or k > index.n:
        raise ValueError(f"k={k} outside [0, n={index.n}]")
    ids, d = rank(index, query)
    return [(int(i), int(di)) for i, di in zip(ids[:k], d[:k])]


def save_index(index: PackedCodeIndex, path) -> None:
    with open(path, "wb") as fh:
        fh.write(_DIDX_HEADER.pack(DIDX_MAGIC, 1, index.code_length, index.n))
        fh.write(index.ids.astype("<u8").tobytes())
        fh.write(index.words.astype("<u8").tobytes())


def load_index(path) -> PackedCodeIndex:
    data = Path(path).read_bytes()
    if len(data) < _DIDX_HEADER.size:
        raise FormatError("truncated DIDX header", len(data))
    magic, version, L, n = _DIDX_HEADER.unpack_from(data)
    if magic != DIDX_MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {DIDX_MAGIC!r}", 0)
    if version != 1:
        raise FormatError(f"unsupported version {version}", 4)
    w = words_per_code(L)
    expected = _DIDX_HEADER.size + 8 * n * (1 + w)
    if len(data) != expected:
        raise FormatError(f"expected {expected} bytes, found {len(data)}", min(len(data), expected))
    off = _DIDX_HEADER.size
    ids = np.frombuffer(data, dtype="<u8", count=n, offset=off)
    words = np.frombuffer(data, dtype="<u8", count=n * w, offset=off + 8 * n).reshape(n, w)
    return PackedCodeIndex(code_length=L, words=words.copy(), ids=ids.copy())
