"""Flat exact-similarity chunk store.

Scores are cosine similarities of unit vectors, defined as the correctly
rounded dot product (``math.fsum`` of the component products), clamped to
[-1, 1]. Ranking is by ``(-score, chunk_id)``. numpy does the full scan; only
entries within a small slack of the k-th score are re-scored exactly, so the
result never depends on BLAS summation order.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import dataclass

import numpy as np

from .chunking import Chunk
from .errors import CorruptIndex, DuplicateChunkId, EmptyCorpus, FormatVersionMismatch, ProviderMismatch
from .providers import EmbeddingProvider

MAGIC = b"SRAGIDX\0"
FORMAT_VERSION = 1
_SLACK = 1e-9
_HEADER = struct.Struct("<8sIII")  # magic, version, dimension, count


@dataclass(frozen=True)
class ScoredChunk:
    chunk: Chunk
    score: float
    rank: int


def exact_score(a, b) -> float:
    s = math.fsum(float(x) * float(y) for x, y in zip(a, b))
    return max(-1.0, min(1.0, s))


class VectorIndex:
    def __init__(self, chunks: list[Chunk], vectors: np.ndarray, provider_name: str, strategy_fingerprint: str):
        if not chunks:
            raise EmptyCorpus("cannot build an index over zero chunks")
        ids = [c.chunk_id for c in chunks]
        if len(set(ids)) != len(ids):
            dup = next(i for i in ids if ids.count(i) > 1)
            raise DuplicateChunkId(f"duplicate chunk id {dup!r}")
        vectors = np.ascontiguousarray(vectors, dtype=np.float64)
        if vectors.ndim != 2 or vectors.shape[0] != len(chunks):
            raise ValueError("need one vector per chunk")
        norms = np.linalg.norm(vectors, axis=1)
        if np.any(np.abs(norms - 1.0) > 1e-6):
            raise ValueError("index vectors must have unit L2 norm")
        self.chunks = list(chunks)
        self.vectors = vectors
        self.vectors.setflags(write=False)
        self.provider_name = provider_name
        self.strategy_fingerprint = strategy_fingerprint

    @property
    def dimension(self) -> int:
        return self.vectors.shape[1]

    def __len__(self):
        return len(self.chunks)

    def __eq__(self, other):
        return (isinstance(other, VectorIndex)
                and self.provider_name == other.provider_name
                and self.strategy_fingerprint == other.strategy_fingerprint
                and self.chunks == other.chunks
                and self.vectors.tobytes() == other.vectors.tobytes())

    def search(self, query_vec, k: int) -> list[ScoredChunk]:
        if k <= 0:
            raise ValueError("k must be positive")
        q = np.asarray(query_vec, dtype=np.float64)
        approx = self.vectors @ q
        n = len(self.chunks)
        k = min(k, n)
        kth = np.partition(approx, n - k)[n - k]
        candidates = np.nonzero(approx >= kth - _SLACK)[0]
        scored = sorted(((exact_score(self.vectors[i], q), self.chunks[i]) for i in candidates),
                        key=lambda sc: (-sc[0], sc[1].chunk_id))
        return [ScoredChunk(chunk, score, rank) for rank, (score, chunk) in enumerate(scored[:k], 1)]


def build_index(chunks: list[Chunk], p: EmbeddingProvider, strategy_fingerprint: str | None = None,
                batch_size: int = 256) -> VectorIndex:
    if not chunks:
        raise EmptyCorpus("cannot build an index over zero chunks")
    if strategy_fingerprint is None:
        strategy_fingerprint = chunks[0].strategy.fingerprint
    texts = [c.embedding_input for c in chunks]
    vecs = []
    for i in range(0, len(texts), batch_size):
        vecs.extend(p.embed_batch(texts[i:i + batch_size]))
    return VectorIndex(chunks, np.vstack(vecs), p.name, strategy_fingerprint)


def query_index(idx: VectorIndex, query_text: str, p: EmbeddingProvider, k: int) -> list[ScoredChunk]:
    if p.name != idx.provider_name:
        raise ProviderMismatch(f"index built with {idx.provider_name!r}, queried with {p.name!r}")
    (vec,) = p.embed_batch([query_text])
    return idx.search(vec, k)


def _blob(b: bytes) -> bytes:
    return struct.pack("<I", len(b)) + b


def save_index(idx: VectorIndex) -> bytes:
    body = bytearray(_HEADER.pack(MAGIC, FORMAT_VERSION, idx.dimension, len(idx)))
    body += _blob(idx.provider_name.encode("utf-8"))
    body += _blob(idx.strategy_fingerprint.encode("utf-8"))
    body += idx.vectors.astype("<f8").tobytes()
    for chunk in idx.chunks:
        body += _blob(json.dumps(chunk.to_dict(), ensure_ascii=False, separators=(",", ":")).encode("utf-8"))
    return bytes(body) + hashlib.sha256(body).digest()


def load_index(data: bytes) -> VectorIndex:
    if len(data) < _HEADER.size + 32 or data[:8] != MAGIC:
        raise CorruptIndex("not an index file or truncated header")
    body, digest = data[:-32], data[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise CorruptIndex("checksum mismatch")
    _, version, dim, count = _HEADER.unpack_from(body)
    if version != FORMAT_VERSION:
        raise FormatVersionMismatch(f"index format {version}, expected {FORMAT_VERSION}")
    pos = _HEADER.size
    try:
        def read_blob():
            nonlocal pos
            (n,) = struct.unpack_from("<I", body, pos)
            pos += 4
            out = body[pos:pos + n]
            if len(out) != n:
                raise CorruptIndex("record overruns file")
            pos += n
            return out

        provider = read_blob().decode("utf-8")
        fingerprint = read_blob().decode("utf-8")
        nbytes = dim * count * 8
        vectors = np.frombuffer(body[pos:pos + nbytes], dtype="<f8").reshape(count, dim).astype(np.float64)
        pos += nbytes
        chunks = [Chunk.from_dict(json.loads(read_blob())) for _ in range(count)]
    except (struct.error, ValueError, KeyError, UnicodeDecodeError) as exc:
        raise CorruptIndex(f"cannot decode index: {exc}") from exc
    if pos != len(body):
        raise CorruptIndex("trailing bytes after last record")
    return VectorIndex(chunks, vectors, provider, fingerprint)
