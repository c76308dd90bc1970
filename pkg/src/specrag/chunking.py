"""Chunking strategies: a splitting method followed by a refinement step.

Valid combinations::

    token-based  no_split        token_chunking      (s, l)
                 endpoint_split  token_chunking      (s, l)
                 endpoint_split  remove_examples
                 endpoint_split  relevant_fields
                 json_split      token_chunking      (s, l)
    llm-based    endpoint_split  llm_query
                 endpoint_split  llm_summary
"""

from __future__ import annotations

import json
import os
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, replace
from pathlib import Path

from .errors import ConfigError, InvalidChunkParams, StrategyCombinationInvalid
from .openapi_model import (
    EndpointId,
    SpecDocument,
    dumps_compact,
    get_endpoint,
    list_endpoints,
    serialize_endpoint,
)
from .providers import LlmProvider, sha256_hex
from .tokenizer import TokenizerSpec, split_by_tokens

SPLITTINGS = ("no_split", "endpoint_split", "json_split")
REFINEMENTS = ("token_chunking", "remove_examples", "relevant_fields", "llm_summary", "llm_query")
LLM_REFINEMENTS = ("llm_summary", "llm_query")

VALID_COMBINATIONS = frozenset({
    ("no_split", "token_chunking"),
    ("endpoint_split", "token_chunking"),
    ("endpoint_split", "remove_examples"),
    ("endpoint_split", "relevant_fields"),
    ("json_split", "token_chunking"),
    ("endpoint_split", "llm_query"),
    ("endpoint_split", "llm_summary"),
})

# Prompt templates are versioned; the version is part of the LLM cache key.
PROMPT_TEMPLATES = {
    "llm_summary": ("summary-v1", (
        "You are given one endpoint of an OpenAPI specification as JSON.\n"
        "Write a concise summary (at most three sentences) of what the endpoint does, "
        "which resource it operates on, and what it returns. Answer with the summary only.\n\n"
        "{endpoint}"
    )),
    "llm_query": ("query-v1", (
        "You are given one endpoint of an OpenAPI specification as JSON.\n"
        "Write one natural-language question or request a user might ask that this endpoint "
        "helps to answer. Answer with the question only.\n\n"
        "{endpoint}"
    )),
}


@dataclass(frozen=True)
class ChunkingStrategy:
    splitting: str
    refinement: str
    s: int | None = None
    l: int | None = None
    embedding_model_name: str = ""
    category: str | None = None

    def __post_init__(self):
        if self.splitting not in SPLITTINGS:
            raise StrategyCombinationInvalid(f"unknown splitting {self.splitting!r}")
        if self.refinement not in REFINEMENTS:
            raise StrategyCombinationInvalid(f"unknown refinement {self.refinement!r}")
        if (self.splitting, self.refinement) not in VALID_COMBINATIONS:
            raise StrategyCombinationInvalid(
                f"{self.splitting} cannot be combined with {self.refinement}; "
                "no_split and json_split only support token_chunking")
        category = "llm_based" if self.refinement in LLM_REFINEMENTS else "token_based"
        if self.category not in (None, category):
            raise StrategyCombinationInvalid(f"{self.refinement} is {category}, not {self.category}")
        object.__setattr__(self, "category", category)
        if self.refinement == "token_chunking":
            if self.s is None or self.l is None:
                raise InvalidChunkParams("token_chunking needs s and l")
            if self.s <= 0 or self.l < 0 or self.l >= self.s:
                raise InvalidChunkParams(f"need 0 <= l < s, got s={self.s}, l={self.l}")
        elif self.s is not None or self.l is not None:
            raise InvalidChunkParams(f"s and l only apply to token_chunking, not {self.refinement}")

    @property
    def fingerprint(self) -> str:
        parts = [self.splitting, self.refinement]
        if self.refinement == "token_chunking":
            parts += [f"s{self.s}", f"l{self.l}"]
        if self.refinement in LLM_REFINEMENTS:
            parts.append(PROMPT_TEMPLATES[self.refinement][0])
        if self.embedding_model_name:
            parts.append(f"m={self.embedding_model_name}")
        return "+".join(parts)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**{k: d.get(k) for k in ("splitting", "refinement", "s", "l", "category")},
                   embedding_model_name=d.get("embedding_model_name") or "")


def all_strategies(s_values=(1024, 8191), l_values=(0, 50), model: str = "") -> list[ChunkingStrategy]:
    """The full experiment grid: token-chunking rows for every (s, l), plus the fixed rows."""
    out = []
    for splitting in ("no_split", "endpoint_split", "json_split"):
        for s in s_values:
            for l in l_values:
                out.append(ChunkingStrategy(splitting, "token_chunking", s, l, model))
    for refinement in ("remove_examples", "relevant_fields", "llm_query", "llm_summary"):
        out.append(ChunkingStrategy("endpoint_split", refinement, embedding_model_name=model))
    return out


@dataclass(frozen=True)
class IntermediateChunk:
    text: str
    endpoint: EndpointId | None = None  # None means "every endpoint of the document"


@dataclass(frozen=True)
class Chunk:
    chunk_id: str
    content: str
    embedding_input: str
    endpoint_refs: tuple[EndpointId, ...]
    strategy: ChunkingStrategy

    def __post_init__(self):
        if not self.embedding_input:
            raise ValueError(f"{self.chunk_id}: empty embedding input")

    def to_dict(self):
        return {
            "chunk_id": self.chunk_id,
            "content": self.content,
            "embedding_input": self.embedding_input,
            "endpoint_refs": [str(r) for r in self.endpoint_refs],
            "strategy": self.strategy.to_dict(),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            chunk_id=d["chunk_id"],
            content=d["content"],
            embedding_input=d["embedding_input"],
            endpoint_refs=tuple(EndpointId.parse(r) for r in d["endpoint_refs"]),
            strategy=ChunkingStrategy.from_dict(d["strategy"]),
        )


# ---------------------------------------------------------------- splitting


def split_no_split(doc: SpecDocument) -> list[IntermediateChunk]:
    return [IntermediateChunk(dumps_compact(doc.root))]


def split_endpoints(doc: SpecDocument) -> list[IntermediateChunk]:
    return [IntermediateChunk(serialize_endpoint(ep), ep.id) for ep in list_endpoints(doc)]


def _leaf_text(value) -> str:
    if isinstance(value, str):
        return value
    return json.dumps(value)


def _one_line(text: str) -> str:
    return text.replace("\r", " ").replace("\n", " ")


def json_leaf_lines(node, prefix=()) -> list[str]:
    """Depth-first pre-order: one ``key path ... value`` line per primitive leaf."""
    lines = []
    stack = [(prefix, node)]
    while stack:
        keys, value = stack.pop()
        if isinstance(value, dict):
            stack.extend(reversed([(keys + (str(k),), v) for k, v in value.items()]))
        elif isinstance(value, list):
            stack.extend(reversed([(keys + (str(i),), v) for i, v in enumerate(value)]))
        else:
            lines.append(_one_line(" ".join(keys + (_leaf_text(value),))))
    return lines


def split_json(doc: SpecDocument) -> list[IntermediateChunk]:
    return [IntermediateChunk("\n".join(json_leaf_lines(doc.root)))]


SPLITTERS = {"no_split": split_no_split, "endpoint_split": split_endpoints, "json_split": split_json}


# ---------------------------------------------------------------- refinement


def endpoint_refs_for(content: str, doc: SpecDocument) -> tuple[EndpointId, ...]:
    """Every endpoint whose path string occurs in ``content`` (all verbs of a matched path)."""
    return tuple(ep.id for ep in list_endpoints(doc) if ep.id.path in content)


def attach_endpoint_metadata(chunk: Chunk, doc: SpecDocument) -> Chunk:
    return replace(chunk, endpoint_refs=endpoint_refs_for(chunk.content, doc))


def _refs(ic: IntermediateChunk, content: str, doc: SpecDocument):
    if ic.endpoint is not None:
        return (ic.endpoint,)
    return endpoint_refs_for(content, doc)


def refine_token_chunking(ic: IntermediateChunk, tok: TokenizerSpec, s: int, l: int,
                          doc: SpecDocument) -> list[tuple[str, str, tuple]]:
    """Returns ``(content, embedding_input, refs)`` triples; ids are assigned by ``chunk_spec``."""
    return [(piece, piece, _refs(ic, piece, doc)) for piece in split_by_tokens(tok, ic.text, s, l)]


def strip_examples(node):
    if isinstance(node, dict):
        return {k: strip_examples(v) for k, v in node.items() if k not in ("examples", "example")}
    if isinstance(node, list):
        return [strip_examples(v) for v in node]
    return node


def remove_examples_text(endpoint_text: str) -> str:
    data = json.loads(endpoint_text)
    op = {k: v for k, v in data["operation"].items() if k != "requestBody"}
    data["operation"] = strip_examples(op)
    return dumps_compact(data)


def refine_remove_examples(ic: IntermediateChunk) -> str:
    if ic.endpoint is None:
        raise StrategyCombinationInvalid("remove_examples needs an endpoint-split chunk")
    return remove_examples_text(ic.text)


def _field(value) -> str:
    return " ".join(str(value).split()) if value else ""


def relevant_fields_text(doc: SpecDocument, ep) -> str:
    return "\n".join([
        f"service title: {_field(doc.title)}",
        f"service description: {_field(doc.description)}",
        f"verb: {ep.id.verb}",
        f"path: {ep.id.path}",
        f"endpoint description: {_field(ep.description or ep.summary)}",
    ])


def refine_relevant_fields(ic: IntermediateChunk, doc: SpecDocument) -> str:
    if ic.endpoint is None:
        raise StrategyCombinationInvalid("relevant_fields needs an endpoint-split chunk")
    return relevant_fields_text(doc, get_endpoint(doc, ic.endpoint))


class RefinementCache:
    """LLM outputs per (model, template version), one JSONL file of ``{key, text}`` records.

    Later lines win, so concurrent appenders writing the same key are harmless.
    """

    def __init__(self, cache_dir, model: str, template_version: str):
        self.path = None
        self._mem: dict[str, str] = {}
        self._lock = threading.Lock()
        if cache_dir is not None:
            safe = "".join(c if c.isalnum() or c in "-_." else "_" for c in model)
            self.path = Path(cache_dir) / "refinements" / f"{safe}__{template_version}.jsonl"
            if self.path.exists():
                for line in self.path.read_text(encoding="utf-8").splitlines():
                    if line.strip():
                        try:
                            rec = json.loads(line)
                        except json.JSONDecodeError:
                            continue  # torn trailing write
                        self._mem[rec["key"]] = rec["text"]

    def get(self, key):
        return self._mem.get(key)

    def put(self, key, text):
        with self._lock:
            self._mem[key] = text
            if self.path is not None:
                self.path.parent.mkdir(parents=True, exist_ok=True)
                line = json.dumps({"key": key, "text": text}, ensure_ascii=False) + "\n"
                fd = os.open(self.path, os.O_WRONLY | os.O_APPEND | os.O_CREAT, 0o644)
                try:
                    os.write(fd, line.encode("utf-8"))
                finally:
                    os.close(fd)


def llm_cache_key(model: str, template_version: str, endpoint_text: str) -> str:
    return sha256_hex(f"{model}\0{template_version}\0{endpoint_text}")


_caches: dict[tuple, RefinementCache] = {}
_caches_lock = threading.Lock()


def refinement_cache(cache_dir, model, template_version) -> RefinementCache:
    key = (str(cache_dir) if cache_dir is not None else None, model, template_version)
    with _caches_lock:
        if key not in _caches or cache_dir is None:
            _caches[key] = RefinementCache(cache_dir, model, template_version)
        return _caches[key]


def llm_refine(ic: IntermediateChunk, llm: LlmProvider, refinement: str, cache: RefinementCache) -> str:
    """LLM output for one endpoint chunk, served from ``cache`` when present."""
    if ic.endpoint is None:
        raise StrategyCombinationInvalid(f"{refinement} needs an endpoint-split chunk")
    version, template = PROMPT_TEMPLATES[refinement]
    key = llm_cache_key(llm.name, version, ic.text)
    text = cache.get(key)
    if text is None:
        text, _ = llm.complete(template.format(endpoint=ic.text))
        cache.put(key, text)
    return text


def refine_llm_summary(ic, llm, cache=None) -> str:
    return llm_refine(ic, llm, "llm_summary", cache or refinement_cache(None, llm.name, "summary-v1"))


def refine_llm_query(ic, llm, cache=None) -> str:
    return llm_refine(ic, llm, "llm_query", cache or refinement_cache(None, llm.name, "query-v1"))


# ---------------------------------------------------------------- composition


def chunk_id(source_name: str, fingerprint: str, ordinal: int) -> str:
    return f"{source_name}#{fingerprint}#{ordinal:06d}"


def _ordered_map(fn, items, parallelism):
    if parallelism <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=parallelism) as pool:
        return list(pool.map(fn, items))


def chunk_spec(doc: SpecDocument, strategy: ChunkingStrategy, tok: TokenizerSpec,
               llm: LlmProvider | None = None, cache_dir=None, parallelism: int = 1) -> list[Chunk]:
    if (strategy.category == "llm_based") != (llm is not None):
        raise ConfigError(f"{strategy.refinement} {'requires' if llm is None else 'does not take'} an LLM provider")
    intermediates = SPLITTERS[strategy.splitting](doc)
    triples: list[tuple[str, str, tuple]] = []
    if strategy.refinement == "token_chunking":
        for ic in intermediates:
            triples.extend(refine_token_chunking(ic, tok, strategy.s, strategy.l, doc))
    elif strategy.refinement == "remove_examples":
        for ic in intermediates:
            text = refine_remove_examples(ic)
            triples.append((text, text, (ic.endpoint,)))
    elif strategy.refinement == "relevant_fields":
        for ic in intermediates:
            text = refine_relevant_fields(ic, doc)
            triples.append((text, text, (ic.endpoint,)))
    else:
        version = PROMPT_TEMPLATES[strategy.refinement][0]
        cache = refinement_cache(cache_dir, llm.name, version)
        outputs = _ordered_map(lambda ic: llm_refine(ic, llm, strategy.refinement, cache),
                               intermediates, parallelism)
        for ic, out in zip(intermediates, outputs):
            triples.append((ic.text, out, (ic.endpoint,)))
    fp = strategy.fingerprint
    return [Chunk(chunk_id(doc.source_name, fp, i), content, emb, refs, strategy)
            for i, (content, emb, refs) in enumerate(triples)]


SUMMARY_SEPARATOR = " — "


def build_summary_chunks(doc: SpecDocument, llm: LlmProvider, embedding_model_name: str = "",
                         cache_dir=None, parallelism: int = 1) -> list[Chunk]:
    """Summary-mode chunks for the agent: content and embedding input are both
    ``VERB /path — summary``. Summaries share the llm_summary cache."""
    strategy = ChunkingStrategy("endpoint_split", "llm_summary", embedding_model_name=embedding_model_name)
    cache = refinement_cache(cache_dir, llm.name, PROMPT_TEMPLATES["llm_summary"][0])
    intermediates = split_endpoints(doc)
    summaries = _ordered_map(lambda ic: llm_refine(ic, llm, "llm_summary", cache), intermediates, parallelism)
    fp = "summary_tool+" + strategy.fingerprint
    out = []
    for i, (ic, summary) in enumerate(zip(intermediates, summaries)):
        line = f"{ic.endpoint}{SUMMARY_SEPARATOR}{' '.join(summary.split())}"
        out.append(Chunk(chunk_id(doc.source_name, fp, i), line, line, (ic.endpoint,), strategy))
    return out


def write_chunks(path, chunks: list[Chunk], strategy_fingerprint: str):
    data = {"format": "specrag-chunks/1", "fingerprint": strategy_fingerprint,
            "chunks": [c.to_dict() for c in chunks]}
    Path(path).write_text(json.dumps(data, ensure_ascii=False, indent=1) + "\n", encoding="utf-8")


def read_chunks(path) -> tuple[str, list[Chunk]]:
    data = json.loads(Path(path).read_text(encoding="utf-8"))
    if data.get("format") != "specrag-chunks/1":
        raise ConfigError(f"{path}: not a chunk file")
    return data["fingerprint"], [Chunk.from_dict(d) for d in data["chunks"]]
