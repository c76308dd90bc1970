"""Retrieval-augmented endpoint discovery over OpenAPI specifications."""

__version__ = "0.1.0"

from .agent import AgentConfig, AgentTrace, parse_final_endpoints, run_agent
from .chunking import Chunk, ChunkingStrategy, all_strategies, build_summary_chunks, chunk_spec
from .evaluation import (
    BenchmarkQuery,
    RunReport,
    compute_metrics,
    emit_report,
    evaluate_agent,
    evaluate_retrieval,
    load_benchmark,
)
from .index import VectorIndex, build_index, load_index, query_index, save_index
from .openapi_model import (
    Endpoint,
    EndpointId,
    SpecDocument,
    get_endpoint,
    list_endpoints,
    load_spec,
    parse_spec,
    serialize_endpoint,
)
from .providers import LocalHashEmbedder, ScriptedLlm, TokenUsage
from .retrieval import RetrievalResult, retrieve
from .tokenizer import REFERENCE, TokenizerSpec, count_tokens, split_by_tokens
