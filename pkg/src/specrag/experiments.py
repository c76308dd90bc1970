"""Experiment wiring for RestBench runs: data discovery, the strategy grid, agent comparisons.

Used by the scripts in ``scripts/`` and by the credential-gated acceptance tests.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path

from .agent import AgentConfig
from .chunking import ChunkingStrategy, all_strategies, build_summary_chunks, chunk_spec
from .evaluation import RunReport, evaluate_agent, evaluate_retrieval, load_benchmark
from .index import build_index
from .openapi_model import SpecDocument, load_spec
from .providers import EmbeddingProvider, LlmProvider, api_key_for, make_embedder, make_llm
from .tokenizer import TokenizerSpec, get_tokenizer

# The reference setup: one proprietary embedding model and one chat model.
OPENAI_EMBEDDING = {"provider": "openai", "model": "text-embedding-3-large", "dimension": 3072}
OPENAI_CHAT = {"provider": "openai", "model": "gpt-4o-2024-05-13"}

_SPEC_FILES = {"spotify": ("spotify_oas.json", "spotify_oas.yaml"), "tmdb": ("tmdb_oas.json", "tmdb_oas.yaml")}
_BENCH_FILES = {"spotify": ("spotify.json",), "tmdb": ("tmdb.json",)}


def _find(root: Path, names) -> Path | None:
    for name in names:
        for sub in ("", "specs", "datasets"):
            p = root / sub / name
            if p.is_file():
                return p
    return None


@dataclass
class RestBenchApi:
    name: str
    spec_path: Path
    bench_path: Path

    def load(self):
        doc = load_spec(self.spec_path)
        return doc, load_benchmark(self.bench_path, doc)


def restbench_api(name: str, root=None) -> RestBenchApi | None:
    """Locate one API of a RestBench checkout (``$SPECRAG_RESTBENCH_DIR`` by default)."""
    root = root or os.environ.get("SPECRAG_RESTBENCH_DIR")
    if not root:
        return None
    spec = _find(Path(root), _SPEC_FILES[name])
    bench = _find(Path(root), _BENCH_FILES[name])
    if spec is None or bench is None:
        return None
    return RestBenchApi(name, spec, bench)


def have_credentials(provider: str = "openai") -> bool:
    return bool(api_key_for(provider))


def default_cache_dir() -> str:
    return os.environ.get("SPECRAG_CACHE_DIR", ".specrag-cache")


def default_tokenizer() -> TokenizerSpec:
    return get_tokenizer(os.environ.get("SPECRAG_TOKENIZER", "reference"))


def strategy_report(doc: SpecDocument, bench, strategy: ChunkingStrategy, emb: EmbeddingProvider,
                    tok: TokenizerSpec, k: int = 10, llm: LlmProvider | None = None, cache_dir=None,
                    parallelism: int = 4) -> RunReport:
    if strategy.category == "token_based":
        llm = None
    chunks = chunk_spec(doc, strategy, tok, llm, cache_dir, parallelism)
    idx = build_index(chunks, emb, strategy.fingerprint)
    return evaluate_retrieval(idx, emb, tok, bench, k, {"api": doc.source_name, "tokenizer": tok.name},
                              parallelism)


def strategy_grid(doc, bench, embedders: dict, tok, llm=None, k: int = 10, cache_dir=None,
                  parallelism: int = 4, strategies=None) -> dict:
    """``{(strategy, model label): RunReport}`` over the full grid; LLM rows need ``llm``."""
    results = {}
    for label, emb in embedders.items():
        for st in strategies or all_strategies(model=emb.name):
            st = ChunkingStrategy(st.splitting, st.refinement, st.s, st.l, emb.name)
            if st.category == "llm_based" and llm is None:
                continue
            results[(_unlabelled(st), label)] = strategy_report(doc, bench, st, emb, tok, k, llm, cache_dir,
                                                                 parallelism)
    return results


def _unlabelled(st: ChunkingStrategy) -> ChunkingStrategy:
    # grid rows are keyed independently of the embedding model column
    return ChunkingStrategy(st.splitting, st.refinement, st.s, st.l)


def agent_comparison(doc, bench, emb, llm, tok, k: int = 10, max_steps: int = 10, cache_dir=None,
                     parallelism: int = 4) -> dict:
    """RAG (summary chunking), Query-tool agent and Summary-tool agent reports for one API."""
    summary = ChunkingStrategy("endpoint_split", "llm_summary", embedding_model_name=emb.name)
    rag_chunks = chunk_spec(doc, summary, tok, llm, cache_dir, parallelism)
    rag_idx = build_index(rag_chunks, emb, summary.fingerprint)
    out = {"rag": evaluate_retrieval(rag_idx, emb, tok, bench, k, {"api": doc.source_name}, parallelism)}
    tool_idx = build_index(build_summary_chunks(doc, llm, emb.name, cache_dir, parallelism), emb)
    for mode, idx in (("query_tool", rag_idx), ("summary_tool", tool_idx)):
        cfg = AgentConfig(mode, k=k, max_steps=max_steps, llm_name=llm.name)
        out[mode] = evaluate_agent(cfg, idx, doc, emb, llm, tok, bench, {"api": doc.source_name}, parallelism)
    return out


def openai_providers(cache_dir=None):
    cache_dir = cache_dir or default_cache_dir()
    return make_embedder(OPENAI_EMBEDDING, cache_dir), make_llm(OPENAI_CHAT, cache_dir)
