"""Embedding and chat-LLM providers.

Remote providers speak the OpenAI-compatible HTTP API and route every request
through an on-disk cache, so reruns cost nothing and return identical bytes.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import re
import threading
import time
from concurrent.futures import Future
from dataclasses import dataclass, field
from pathlib import Path

import httpx
import numpy as np

from .errors import (
    ConfigError,
    EmptyCompletion,
    InputTooLong,
    ProtocolError,
    ProviderUnavailable,
    ScriptDivergence,
)

log = logging.getLogger(__name__)

API_KEY_ENV = "SPECRAG_API_KEY_{}"

FNV64_OFFSET = 0xCBF29CE484222325
FNV64_PRIME = 0x100000001B3
_MASK64 = 0xFFFFFFFFFFFFFFFF
_RUN = re.compile(r"[^\W_]+")


def fnv1a_64(data: bytes) -> int:
    h = FNV64_OFFSET
    for b in data:
        h = ((h ^ b) * FNV64_PRIME) & _MASK64
    return h


def sha256_hex(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def api_key_for(provider: str) -> str | None:
    return os.environ.get(API_KEY_ENV.format(re.sub(r"\W", "_", provider).upper()))


@dataclass(frozen=True)
class TokenUsage:
    prompt: int = 0
    completion: int = 0
    total: int | None = None

    def __post_init__(self):
        if self.prompt < 0 or self.completion < 0:
            raise ValueError("token counts must be non-negative")
        expected = self.prompt + self.completion
        if self.total is None:
            object.__setattr__(self, "total", expected)
        elif self.total != expected:
            raise ValueError(f"total {self.total} != prompt + completion {expected}")

    def __add__(self, other: "TokenUsage") -> "TokenUsage":
        return TokenUsage(self.prompt + other.prompt, self.completion + other.completion)

    def to_dict(self):
        return {"prompt": self.prompt, "completion": self.completion, "total": self.total}


# ---------------------------------------------------------------- plumbing


class DiskCache:
    """``<root>/<namespace>/<first 2 hex>/<hash>`` files holding raw payloads."""

    def __init__(self, root, namespace: str):
        self.dir = Path(root) / re.sub(r"[^\w.-]", "_", namespace)

    def _path(self, key: str) -> Path:
        return self.dir / key[:2] / key

    def get(self, key: str) -> bytes | None:
        try:
            return self._path(key).read_bytes()
        except FileNotFoundError:
            return None

    def put(self, key: str, payload: bytes) -> None:
        path = self._path(key)
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_name(f"{key}.{os.getpid()}.{threading.get_ident()}.tmp")
        tmp.write_bytes(payload)
        os.replace(tmp, path)


class InFlight:
    """Deduplicate concurrent fetches of the same key: one fetch, many waiters."""

    def __init__(self):
        self._lock = threading.Lock()
        self._pending: dict[str, Future] = {}

    def claim(self, key) -> tuple[bool, Future]:
        """Return ``(True, future)`` to the single owner who must call ``resolve``."""
        with self._lock:
            fut = self._pending.get(key)
            if fut is not None:
                return False, fut
            fut = self._pending[key] = Future()
            return True, fut

    def resolve(self, key, result=None, exc=None):
        with self._lock:
            fut = self._pending.pop(key)
        if exc is not None:
            fut.set_exception(exc)
        else:
            fut.set_result(result)

    def run(self, key, fn):
        owner, fut = self.claim(key)
        if not owner:
            return fut.result()
        try:
            result = fn()
        except BaseException as exc:
            self.resolve(key, exc=exc)
            raise
        self.resolve(key, result)
        return result


class TokenBucket:
    def __init__(self, per_minute: float, burst: int | None = None, clock=time.monotonic, sleep=time.sleep):
        self.rate = per_minute / 60.0
        self.capacity = float(burst if burst is not None else max(1, int(per_minute // 60) or 1))
        self.tokens = self.capacity
        self.clock = clock
        self.sleep = sleep
        self.updated = clock()
        self._lock = threading.Lock()

    def acquire(self):
        with self._lock:
            while True:
                now = self.clock()
                self.tokens = min(self.capacity, self.tokens + (now - self.updated) * self.rate)
                self.updated = now
                if self.tokens >= 1:
                    self.tokens -= 1
                    return
                self.sleep((1 - self.tokens) / self.rate)


_TRANSIENT_STATUS = {408, 409, 425, 429, 500, 502, 503, 504}
_TOO_LONG = re.compile(r"maximum context length|too many tokens|too long|max(imum)? input", re.I)


@dataclass
class HttpSettings:
    base_url: str = "https://api.openai.com/v1"
    api_key: str | None = None
    timeout: float = 60.0
    max_retries: int = 5
    backoff: float = 1.0
    requests_per_minute: float = 300.0


class _HttpBase:
    def __init__(self, name: str, settings: HttpSettings, cache_dir, client: httpx.Client | None = None,
                 sleep=time.sleep):
        self.name = name
        self.settings = settings
        self.cache = DiskCache(cache_dir, name)
        self.client = client or httpx.Client(timeout=settings.timeout)
        self.sleep = sleep
        self.bucket = TokenBucket(settings.requests_per_minute, sleep=sleep)
        self.inflight = InFlight()
        self.remote_calls = 0
        self.cache_hits = 0
        self._stats_lock = threading.Lock()

    def _post(self, route: str, body: dict) -> dict:
        url = self.settings.base_url.rstrip("/") + route
        headers = {}
        if self.settings.api_key:
            headers["Authorization"] = f"Bearer {self.settings.api_key}"
        last = None
        for attempt in range(self.settings.max_retries + 1):
            if attempt:
                self.sleep(self.settings.backoff * 2 ** (attempt - 1))
            self.bucket.acquire()
            with self._stats_lock:
                self.remote_calls += 1
            try:
                resp = self.client.post(url, json=body, headers=headers)
            except httpx.TransportError as exc:
                last = f"{type(exc).__name__}: {exc}"
                continue
            if resp.status_code in _TRANSIENT_STATUS:
                last = f"HTTP {resp.status_code}"
                continue
            if resp.status_code == 400 and _TOO_LONG.search(resp.text):
                raise InputTooLong(f"{self.name}: {resp.text[:200]}")
            if resp.status_code >= 400:
                raise ProviderUnavailable(f"{self.name}: HTTP {resp.status_code}: {resp.text[:200]}")
            try:
                return resp.json()
            except ValueError as exc:
                raise ProtocolError(f"{self.name}: non-JSON response") from exc
        raise ProviderUnavailable(f"{self.name}: giving up after {self.settings.max_retries + 1} attempts ({last})")


# ---------------------------------------------------------------- embeddings


def _unit(vec: np.ndarray) -> np.ndarray:
    norm = float(np.linalg.norm(vec))
    if norm == 0.0:
        raise ValueError("cannot normalize a zero vector")
    return vec / norm


class EmbeddingProvider:
    name: str
    dimension: int
    kind: str

    def embed_batch(self, texts: list[str]) -> list[np.ndarray]:
        raise NotImplementedError


def local_hash_features(text: str) -> list[str]:
    runs = _RUN.findall(text.lower())
    # punctuation-only text (e.g. a token window of closing braces) falls back to its characters
    return runs or [c for c in text if not c.isspace()]


class LocalHashEmbedder(EmbeddingProvider):
    """Hashed bag of lowercase alphanumeric runs, FNV-1a 64 into ``dimension`` buckets."""

    kind = "local_hash"

    def __init__(self, dimension: int = 256):
        if dimension <= 0:
            raise ConfigError("dimension must be positive")
        self.dimension = dimension
        self.name = f"local-hash-{dimension}"
        self.remote_calls = 0
        self.cache_hits = 0

    def embed_one(self, text: str) -> np.ndarray:
        vec = np.zeros(self.dimension, dtype=np.float64)
        for feat in local_hash_features(text):
            vec[fnv1a_64(feat.encode("utf-8")) % self.dimension] += 1.0
        return _unit(vec)

    def embed_batch(self, texts: list[str]) -> list[np.ndarray]:
        if not texts or any(not t for t in texts):
            raise ValueError("embed_batch needs non-empty texts")
        return [self.embed_one(t) for t in texts]


class RemoteEmbedder(EmbeddingProvider, _HttpBase):
    """OpenAI-compatible ``/embeddings`` client."""

    kind = "remote_http"

    def __init__(self, model: str, dimension: int, settings: HttpSettings, cache_dir,
                 name: str | None = None, batch_size: int = 64, client=None, sleep=time.sleep):
        _HttpBase.__init__(self, name or f"remote-{model}", settings, cache_dir, client=client, sleep=sleep)
        self.model = model
        self.dimension = dimension
        self.batch_size = batch_size

    def _key(self, text):
        return sha256_hex(f"{self.model}\0{text}")

    def _fetch(self, texts: list[str]) -> list[np.ndarray]:
        payload = self._post("/embeddings", {"model": self.model, "input": texts})
        try:
            data = sorted(payload["data"], key=lambda d: d["index"])
            vecs = [np.asarray(d["embedding"], dtype=np.float64) for d in data]
        except (KeyError, TypeError) as exc:
            raise ProtocolError(f"{self.name}: unexpected embeddings payload") from exc
        if len(vecs) != len(texts) or any(v.shape != (self.dimension,) for v in vecs):
            raise ProtocolError(f"{self.name}: expected {len(texts)} vectors of dim {self.dimension}")
        return [_unit(v) for v in vecs]

    def embed_batch(self, texts: list[str]) -> list[np.ndarray]:
        if not texts or any(not t for t in texts):
            raise ValueError("embed_batch needs non-empty texts")
        out: dict[str, np.ndarray] = {}
        missing = []
        for t in texts:
            key = self._key(t)
            if key in out or key in missing:
                continue
            blob = self.cache.get(key)
            if blob is not None:
                with self._stats_lock:
                    self.cache_hits += 1
                out[key] = np.frombuffer(blob, dtype="<f8").copy()
            else:
                missing.append(key)
        by_key = {self._key(t): t for t in texts}
        owned, waiting = [], {}
        for key in missing:
            is_owner, fut = self.inflight.claim(key)
            if is_owner:
                owned.append(key)
            else:
                waiting[key] = fut
        for i in range(0, len(owned), self.batch_size):
            keys = owned[i:i + self.batch_size]
            try:
                vecs = self._fetch([by_key[k] for k in keys])
            except BaseException as exc:
                for k in owned[i:]:
                    self.inflight.resolve(k, exc=exc)
                raise
            for k, v in zip(keys, vecs):
                self.cache.put(k, v.astype("<f8").tobytes())
                self.inflight.resolve(k, v)
                out[k] = v
        for k, fut in waiting.items():
            out[k] = fut.result()
        return [out[self._key(t)] for t in texts]


# ---------------------------------------------------------------- chat


@dataclass(frozen=True)
class ToolParam:
    name: str
    description: str
    type: str = "string"


@dataclass(frozen=True)
class ToolSchema:
    name: str
    description: str
    parameters: tuple[ToolParam, ...] = ()

    def to_dict(self):
        return {
            "name": self.name,
            "description": self.description,
            "parameters": [{"name": p.name, "type": p.type, "description": p.description} for p in self.parameters],
        }


@dataclass(frozen=True)
class ChatResponse:
    kind: str  # "tool_call" | "final"
    usage: TokenUsage
    text: str = ""
    name: str | None = None
    arguments: dict = field(default_factory=dict)

    @classmethod
    def final(cls, text, usage=TokenUsage()):
        return cls("final", usage, text=text)

    @classmethod
    def tool_call(cls, name, arguments, usage=TokenUsage()):
        return cls("tool_call", usage, name=name, arguments=dict(arguments))

    def to_dict(self):
        d = {"kind": self.kind}
        if self.kind == "final":
            d["text"] = self.text
        else:
            d["name"] = self.name
            d["arguments"] = self.arguments
        d["usage"] = self.usage.to_dict()
        return d

    @classmethod
    def from_dict(cls, d):
        usage = TokenUsage(**{k: d.get("usage", {}).get(k, 0) for k in ("prompt", "completion")})
        if d["kind"] == "final":
            return cls.final(d.get("text", ""), usage)
        if d["kind"] == "tool_call":
            return cls.tool_call(d["name"], d.get("arguments", {}), usage)
        raise ValueError(f"unknown response kind {d['kind']!r}")


def request_digest(messages: list[dict], tools: list[ToolSchema]) -> str:
    blob = json.dumps({"messages": messages, "tools": [t.to_dict() for t in tools]},
                      separators=(",", ":"), ensure_ascii=False, sort_keys=True)
    return sha256_hex(blob)


def _validate_chat_args(messages, tools):
    if not messages:
        raise ValueError("messages must be non-empty")
    names = [t.name for t in tools]
    if len(set(names)) != len(names):
        raise ValueError(f"duplicate tool names: {names}")


class LlmProvider:
    name: str
    kind: str

    def chat(self, messages: list[dict], tools: list[ToolSchema] = ()) -> ChatResponse:
        raise NotImplementedError

    def complete(self, prompt: str) -> tuple[str, TokenUsage]:
        """Single-turn completion without tools; blank output is an error."""
        resp = self.chat([{"role": "user", "text": prompt}], [])
        if resp.kind != "final":
            raise ProtocolError(f"{self.name}: tool call in a tool-less completion")
        if not resp.text.strip():
            raise EmptyCompletion(f"{self.name}: blank completion")
        return resp.text.strip(), resp.usage


class ScriptedLlm(LlmProvider):
    """Replays a recorded list of turns; any divergence raises ``ScriptDivergence``.

    A turn is a response dict (see ``ChatResponse.to_dict``), optionally with a
    ``request_digest`` that the incoming request must match.
    """

    kind = "scripted"

    def __init__(self, turns: list[dict], name: str = "scripted"):
        self.name = name
        self.turns = list(turns)
        self.position = 0
        self._lock = threading.Lock()

    @classmethod
    def constant(cls, text: str, times: int, name: str = "scripted"):
        return cls([{"kind": "final", "text": text}] * times, name=name)

    @classmethod
    def load(cls, path) -> "ScriptedLlm":
        """Load a turn list, a ``{"turns": [...]}`` object, or an agent trace file."""
        data = json.loads(Path(path).read_text(encoding="utf-8"))
        if isinstance(data, dict) and "steps" in data:
            return cls.from_trace(data, name=f"scripted:{Path(path).name}")
        if isinstance(data, dict):
            data = data["turns"]
        return cls(data, name=f"scripted:{Path(path).name}")

    @classmethod
    def from_trace(cls, trace: dict, name: str = "scripted") -> "ScriptedLlm":
        turns = []
        for step in trace["steps"]:
            turn = {"kind": step["response_kind"], "usage": step["usage"],
                    "request_digest": step["llm_request_digest"]}
            if step["response_kind"] == "final":
                turn["text"] = step.get("final_text", "")
            else:
                turn["name"] = step["tool_name"]
                turn["arguments"] = step["tool_arguments"]
            turns.append(turn)
        return cls(turns, name=name)

    @property
    def exhausted(self) -> bool:
        return self.position >= len(self.turns)

    def chat(self, messages, tools=()):
        _validate_chat_args(messages, tools)
        with self._lock:
            if self.position >= len(self.turns):
                raise ScriptDivergence(f"{self.name}: script exhausted after {len(self.turns)} turns")
            turn = self.turns[self.position]
            self.position += 1
        expected = turn.get("request_digest")
        if expected and expected != request_digest(messages, list(tools)):
            raise ScriptDivergence(f"{self.name}: turn {self.position} request digest mismatch")
        resp = ChatResponse.from_dict(turn)
        if resp.kind == "tool_call" and resp.name not in {t.name for t in tools}:
            raise ScriptDivergence(f"{self.name}: turn {self.position} calls unknown tool {resp.name!r}")
        return resp


def _to_openai_messages(messages):
    out = []
    for m in messages:
        if m["role"] == "assistant" and m.get("tool_call"):
            tc = m["tool_call"]
            out.append({"role": "assistant", "content": m.get("text") or None, "tool_calls": [{
                "id": tc["id"], "type": "function",
                "function": {"name": tc["name"], "arguments": json.dumps(tc["arguments"], ensure_ascii=False)},
            }]})
        elif m["role"] == "tool":
            out.append({"role": "tool", "tool_call_id": m["tool_call_id"], "content": m["text"]})
        else:
            out.append({"role": m["role"], "content": m["text"]})
    return out


def _to_openai_tools(tools):
    return [{
        "type": "function",
        "function": {
            "name": t.name,
            "description": t.description,
            "parameters": {
                "type": "object",
                "properties": {p.name: {"type": p.type, "description": p.description} for p in t.parameters},
                "required": [p.name for p in t.parameters],
            },
        },
    } for t in tools]


class RemoteChat(LlmProvider, _HttpBase):
    """OpenAI-compatible ``/chat/completions`` client with tool calling."""

    kind = "remote_http"

    def __init__(self, model: str, settings: HttpSettings, cache_dir, name: str | None = None,
                 temperature: float = 0.0, client=None, sleep=time.sleep):
        _HttpBase.__init__(self, name or f"chat-{model}", settings, cache_dir, client=client, sleep=sleep)
        self.model = model
        self.temperature = temperature

    def _parse(self, payload: dict, tools) -> ChatResponse:
        try:
            msg = payload["choices"][0]["message"]
            u = payload.get("usage") or {}
            usage = TokenUsage(int(u.get("prompt_tokens", 0)), int(u.get("completion_tokens", 0)))
        except (KeyError, IndexError, TypeError) as exc:
            raise ProtocolError(f"{self.name}: unexpected chat payload") from exc
        calls = msg.get("tool_calls") or []
        if calls:
            fn = calls[0]["function"]
            if fn["name"] not in {t.name for t in tools}:
                raise ProtocolError(f"{self.name}: model called unknown tool {fn['name']!r}")
            try:
                args = json.loads(fn.get("arguments") or "{}")
            except json.JSONDecodeError as exc:
                raise ProtocolError(f"{self.name}: tool arguments are not JSON") from exc
            return ChatResponse.tool_call(fn["name"], args, usage)
        return ChatResponse.final(msg.get("content") or "", usage)

    def chat(self, messages, tools=()):
        _validate_chat_args(messages, tools)
        tools = list(tools)
        body = {"model": self.model, "temperature": self.temperature,
                "messages": _to_openai_messages(messages)}
        if tools:
            body["tools"] = _to_openai_tools(tools)
            body["parallel_tool_calls"] = False
        key = sha256_hex(json.dumps(body, sort_keys=True, ensure_ascii=False))
        blob = self.cache.get(key)
        if blob is not None:
            with self._stats_lock:
                self.cache_hits += 1
            return self._parse(json.loads(blob), tools)

        def fetch():
            payload = self._post("/chat/completions", body)
            resp = self._parse(payload, tools)  # validate before caching
            self.cache.put(key, json.dumps(payload).encode("utf-8"))
            return resp

        return self.inflight.run(key, fetch)


# ---------------------------------------------------------------- factories


def make_embedder(cfg: dict, cache_dir) -> EmbeddingProvider:
    """Build from a config mapping, e.g. ``{"provider": "local", "dimension": 256}``
    or ``{"provider": "openai", "model": "text-embedding-3-large", "dimension": 3072}``."""
    cfg = dict(cfg or {})
    provider = cfg.pop("provider", "local")
    if provider == "local":
        return LocalHashEmbedder(int(cfg.get("dimension", 256)))
    if "model" not in cfg or "dimension" not in cfg:
        raise ConfigError("remote embedding provider needs 'model' and 'dimension'")
    settings = _settings(provider, cfg)
    return RemoteEmbedder(cfg["model"], int(cfg["dimension"]), settings, cache_dir,
                          name=f"{provider}/{cfg['model']}", batch_size=int(cfg.get("batch_size", 64)))


def make_llm(cfg: dict, cache_dir) -> LlmProvider:
    cfg = dict(cfg or {})
    provider = cfg.pop("provider", None)
    if not provider:
        raise ConfigError("no LLM provider configured")
    if provider == "scripted":
        return ScriptedLlm.load(cfg["script"])
    if "model" not in cfg:
        raise ConfigError("remote LLM provider needs 'model'")
    return RemoteChat(cfg["model"], _settings(provider, cfg), cache_dir, name=f"{provider}/{cfg['model']}",
                      temperature=float(cfg.get("temperature", 0.0)))


def _settings(provider: str, cfg: dict) -> HttpSettings:
    s = HttpSettings(api_key=api_key_for(provider))
    for key in ("base_url", "timeout", "max_retries", "backoff", "requests_per_minute"):
        if key in cfg:
            setattr(s, key, type(getattr(s, key))(cfg[key]))
    return s

