"""Endpoint discovery agent: an LLM tool-calling loop over the retrieval tools.

Two tool setups exist. ``query_tool`` exposes one tool that returns the full
content of retrieved chunks. ``summary_tool`` exposes a search over
``VERB /path — summary`` chunks plus a details-on-demand tool, so complete
endpoint objects only enter the conversation when the model asks for them.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field

from .errors import EndpointNotFound, SpecRagError
from .index import VectorIndex
from .openapi_model import HTTP_VERBS, EndpointId, SpecDocument, get_endpoint, serialize_endpoint
from .providers import (
    EmbeddingProvider,
    LlmProvider,
    TokenUsage,
    ToolParam,
    ToolSchema,
    request_digest,
    sha256_hex,
)
from .retrieval import retrieve
from .tokenizer import TokenizerSpec

PROMPT_VERSION = "discovery-agent-v1"

SYSTEM_PROMPT = """You are an endpoint discovery agent for REST APIs described by OpenAPI specifications.
Given a user request, find the API endpoints that must be called to fulfil it. You do not call the endpoints.

Work as follows:
1. Decompose the request into small, concrete subtasks (for example: find the item, then fetch its details).
2. For each subtask, use the search tool to retrieve candidate endpoints.{details_hint}
3. Collect the candidates of all subtasks and keep only the endpoints that are actually needed.
   Search again if a subtask is still unresolved.
4. Finish with a final answer that lists every needed endpoint on its own line as `VERB /path`,
   using the path template exactly as it appears in the specification, for example:
GET /movie/top_rated
GET /movie/{{movie_id}}/credits"""

DETAILS_HINT = ("\n   Search results only contain summaries. Call get_endpoint_details with a verb and path "
                "when you need the full endpoint description to decide.")

NO_RESULTS = "NO_RESULTS: the search returned no endpoints."
RESULT_DELIMITER = "\n\n"

SEARCH_FULL = ToolSchema(
    "search_endpoints",
    "Semantic search over the API documentation. Returns the full OpenAPI description of the endpoints "
    "most relevant to the given task.",
    (ToolParam("task", "A short description of one subtask, e.g. 'get the credits of a movie'."),),
)
SEARCH_SUMMARIES = ToolSchema(
    "search_endpoint_summaries",
    "Semantic search over the API documentation. Returns one line per relevant endpoint: verb, path, "
    "and a short summary.",
    (ToolParam("task", "A short description of one subtask, e.g. 'get the credits of a movie'."),),
)
GET_DETAILS = ToolSchema(
    "get_endpoint_details",
    "Returns the complete OpenAPI description of one endpoint.",
    (ToolParam("verb", "HTTP verb, e.g. GET."), ToolParam("path", "Path template, e.g. /movie/{movie_id}.")),
)

_ENDPOINT_RE = re.compile(r"\b(" + "|".join(HTTP_VERBS) + r")\s+(/[^\s,;()\"'`<>\[\]]*)", re.I)
_SERIALIZED_RE = re.compile(r'\{"verb":"([A-Za-z]+)","path":"(/[^"]*)"')


@dataclass(frozen=True)
class AgentConfig:
    strategy: str = "summary_tool"  # or "query_tool"
    k: int = 10
    max_steps: int = 10
    llm_name: str = ""

    def __post_init__(self):
        if self.strategy not in ("query_tool", "summary_tool"):
            raise ValueError(f"unknown agent strategy {self.strategy!r}")
        if self.k < 1 or self.max_steps < 1:
            raise ValueError("k and max_steps must be >= 1")


@dataclass
class AgentStep:
    llm_request_digest: str
    response_kind: str
    usage: TokenUsage
    tool_name: str | None = None
    tool_arguments: dict | None = None
    tool_result_digest: str | None = None
    final_text: str | None = None

    def to_dict(self):
        return {
            "llm_request_digest": self.llm_request_digest,
            "response_kind": self.response_kind,
            "tool_name": self.tool_name,
            "tool_arguments": self.tool_arguments,
            "tool_result_digest": self.tool_result_digest,
            "final_text": self.final_text,
            "usage": self.usage.to_dict(),
        }


@dataclass
class AgentTrace:
    query: str
    strategy: str
    tools: list[str]
    steps: list[AgentStep] = field(default_factory=list)
    final_endpoints: list[EndpointId] = field(default_factory=list)
    hallucinated_endpoints: list[EndpointId] = field(default_factory=list)
    truncated: bool = False
    malformed_final: bool = False
    prompt_version: str = PROMPT_VERSION
    llm: str = ""

    @property
    def total_usage(self) -> TokenUsage:
        total = TokenUsage()
        for step in self.steps:
            total = total + step.usage
        return total

    def to_dict(self):
        return {
            "prompt_version": self.prompt_version,
            "llm": self.llm,
            "strategy": self.strategy,
            "query": self.query,
            "tools": self.tools,
            "steps": [s.to_dict() for s in self.steps],
            "final_endpoints": [str(e) for e in self.final_endpoints],
            "hallucinated_endpoints": [str(e) for e in self.hallucinated_endpoints],
            "truncated": self.truncated,
            "malformed_final": self.malformed_final,
            "total_usage": self.total_usage.to_dict(),
        }

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), ensure_ascii=False, indent=1) + "\n"


def parse_final_endpoints(text: str) -> list[EndpointId]:
    seen = {}
    for verb, path in _ENDPOINT_RE.findall(text or ""):
        path = path.rstrip(".:!?")
        if path:
            seen.setdefault(EndpointId(verb, path), None)
    return list(seen)


def _best_effort_endpoints(text: str) -> list[EndpointId]:
    """Truncated runs end on a tool result, which may be a details JSON rather than answer lines."""
    found = dict.fromkeys(parse_final_endpoints(text))
    for verb, path in _SERIALIZED_RE.findall(text or ""):
        found.setdefault(EndpointId(verb, path), None)
    return list(found)


class DiscoveryTools:
    """Tool implementations bound to one index/document; errors come back as text."""

    def __init__(self, cfg: AgentConfig, idx: VectorIndex, doc: SpecDocument, emb: EmbeddingProvider,
                 tok: TokenizerSpec):
        self.cfg, self.idx, self.doc, self.emb, self.tok = cfg, idx, doc, emb, tok

    @property
    def schemas(self) -> list[ToolSchema]:
        if self.cfg.strategy == "query_tool":
            return [SEARCH_FULL]
        return [SEARCH_SUMMARIES, GET_DETAILS]

    def _retrieve(self, task):
        if self.idx is None or len(self.idx) == 0:
            return None
        return retrieve(self.idx, self.emb, self.tok, task, self.cfg.k)

    def search_full(self, task: str) -> str:
        res = self._retrieve(task)
        if res is None or not res.scored_chunks:
            return NO_RESULTS
        return RESULT_DELIMITER.join(sc.chunk.content for sc in res.scored_chunks)

    def search_summaries(self, task: str) -> str:
        res = self._retrieve(task)
        if res is None or not res.scored_chunks:
            return NO_RESULTS
        return "\n".join(" ".join(sc.chunk.content.split()) for sc in res.scored_chunks)

    def get_details(self, verb: str, path: str) -> str:
        try:
            return serialize_endpoint(get_endpoint(self.doc, (verb, path)))
        except EndpointNotFound as exc:
            hint = f" The closest existing path is {exc.nearest}." if exc.nearest else ""
            return f"ERROR: endpoint {verb.upper()} {path} does not exist.{hint}"

    def call(self, name: str, args: dict) -> str:
        try:
            if name == "search_endpoints":
                return self.search_full(str(args.get("task", "")))
            if name == "search_endpoint_summaries":
                return self.search_summaries(str(args.get("task", "")))
            if name == "get_endpoint_details":
                return self.get_details(str(args.get("verb", "")), str(args.get("path", "")))
        except (SpecRagError, ValueError) as exc:
            return f"ERROR: {exc}"
        return f"ERROR: unknown tool {name!r}"


def run_agent(q: str, cfg: AgentConfig, idx: VectorIndex, doc: SpecDocument, emb: EmbeddingProvider,
              llm: LlmProvider, tok: TokenizerSpec) -> tuple[list[EndpointId], AgentTrace]:
    if not q or not q.strip():
        raise ValueError("query must be non-empty")
    tools = DiscoveryTools(cfg, idx, doc, emb, tok)
    schemas = tools.schemas
    system = SYSTEM_PROMPT.format(details_hint=DETAILS_HINT if cfg.strategy == "summary_tool" else "")
    messages = [{"role": "system", "text": system}, {"role": "user", "text": q}]
    trace = AgentTrace(query=q, strategy=cfg.strategy, tools=[s.name for s in schemas], llm=llm.name)

    final_text = None
    for step_no in range(cfg.max_steps):
        digest = request_digest(messages, schemas)
        resp = llm.chat(messages, schemas)
        if resp.kind == "final":
            trace.steps.append(AgentStep(digest, "final", resp.usage, final_text=resp.text))
            messages.append({"role": "assistant", "text": resp.text})
            final_text = resp.text
            break
        result = tools.call(resp.name, resp.arguments)
        trace.steps.append(AgentStep(digest, "tool_call", resp.usage, tool_name=resp.name,
                                     tool_arguments=resp.arguments, tool_result_digest=sha256_hex(result)))
        call_id = f"call_{step_no}"
        messages.append({"role": "assistant", "text": "",
                         "tool_call": {"id": call_id, "name": resp.name, "arguments": resp.arguments}})
        messages.append({"role": "tool", "tool_call_id": call_id, "text": result})

    if final_text is None:
        trace.truncated = True
        endpoints = _best_effort_endpoints(messages[-1]["text"])
    else:
        endpoints = parse_final_endpoints(final_text)
    trace.malformed_final = not endpoints
    trace.final_endpoints = endpoints
    known = set(ep.id for ep in doc.endpoints)
    trace.hallucinated_endpoints = [e for e in endpoints if e not in known]
    return endpoints, trace
