"""Chunk retriever: query text in, ranked chunks plus a deduplicated endpoint list out."""

from __future__ import annotations

from dataclasses import dataclass

from .index import ScoredChunk, VectorIndex, query_index
from .openapi_model import EndpointId
from .providers import EmbeddingProvider
from .tokenizer import TokenizerSpec, count_tokens


@dataclass(frozen=True)
class RetrievalResult:
    query: str
    scored_chunks: list[ScoredChunk]
    endpoints: list[EndpointId]
    retrieved_token_count: int

    def to_dict(self):
        return {
            "query": self.query,
            "chunks": [{"chunk_id": sc.chunk.chunk_id, "rank": sc.rank, "score": sc.score,
                        "endpoint_refs": [str(r) for r in sc.chunk.endpoint_refs]}
                       for sc in self.scored_chunks],
            "endpoints": [str(e) for e in self.endpoints],
            "retrieved_token_count": self.retrieved_token_count,
        }


def dedup_endpoints(scored: list[ScoredChunk]) -> list[EndpointId]:
    seen = {}
    for sc in scored:
        for ref in sc.chunk.endpoint_refs:
            seen.setdefault(ref, None)
    return list(seen)


def retrieve(idx: VectorIndex, p: EmbeddingProvider, tok: TokenizerSpec, q: str, k: int) -> RetrievalResult:
    if not q or not q.strip():
        raise ValueError("query must be non-empty")
    scored = query_index(idx, q, p, k)
    tokens = sum(count_tokens(tok, sc.chunk.content) for sc in scored)
    return RetrievalResult(q, scored, dedup_endpoints(scored), tokens)
