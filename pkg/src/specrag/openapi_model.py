"""OpenAPI 3.x documents as a navigable tree plus a canonical endpoint list."""

from __future__ import annotations

import copy
import datetime as _dt
import json
from dataclasses import dataclass, field
from typing import Any

import yaml

from .errors import EndpointNotFound, MalformedDocument, NotOpenApi

HTTP_VERBS = ("get", "put", "post", "delete", "options", "head", "patch", "trace")

JsonValue = Any


@dataclass(frozen=True, order=True)
class EndpointId:
    verb: str
    path: str

    def __post_init__(self):
        verb = self.verb.upper()
        if verb.lower() not in HTTP_VERBS:
            raise ValueError(f"unknown HTTP verb {self.verb!r}")
        object.__setattr__(self, "verb", verb)

    @classmethod
    def parse(cls, text: str) -> "EndpointId":
        """Parse ``"GET /a/{b}"``."""
        parts = text.strip().split(None, 1)
        if len(parts) != 2 or not parts[1].startswith("/"):
            raise ValueError(f"not an endpoint string: {text!r}")
        return cls(parts[0], parts[1].strip())

    def __str__(self):
        return f"{self.verb} {self.path}"


@dataclass(frozen=True)
class Endpoint:
    id: EndpointId
    raw: dict

    @property
    def summary(self) -> str | None:
        return self.raw.get("summary")

    @property
    def description(self) -> str | None:
        return self.raw.get("description")

    @property
    def parameters(self) -> list:
        return list(self.raw.get("parameters") or [])

    @property
    def request_body(self):
        return self.raw.get("requestBody")

    @property
    def responses(self):
        return self.raw.get("responses", {})


@dataclass(frozen=True)
class SpecDocument:
    source_name: str
    format: str
    root: dict
    title: str
    description: str | None = None
    _endpoints: tuple = field(default=(), repr=False, compare=False)
    _by_id: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def endpoints(self) -> list[Endpoint]:
        return list(self._endpoints)


def _normalize(node):
    # YAML yields int keys (response codes), dates, etc.; coerce to the JSON data model.
    if isinstance(node, dict):
        return {str(k) if not isinstance(k, bool) else str(k).lower(): _normalize(v) for k, v in node.items()}
    if isinstance(node, list):
        return [_normalize(v) for v in node]
    if isinstance(node, (_dt.date, _dt.datetime)):
        return node.isoformat()
    if isinstance(node, bytes):
        return node.decode("utf-8", "replace")
    return node


def _load_tree(data: bytes) -> tuple[str, Any]:
    try:
        text = data.decode("utf-8-sig")
    except UnicodeDecodeError as exc:
        raise MalformedDocument(f"document is not UTF-8: {exc}") from exc
    try:
        return "json", json.loads(text)
    except json.JSONDecodeError:
        pass
    try:
        return "yaml", _normalize(yaml.safe_load(text))
    except yaml.YAMLError as exc:
        raise MalformedDocument(f"neither JSON nor YAML: {exc}") from exc


def _fold_path_item(path_item: dict, operation: dict) -> dict:
    shared = {k: v for k, v in path_item.items() if k not in HTTP_VERBS}
    if not shared:
        return operation
    raw = dict(operation)
    for key, value in shared.items():
        if key == "parameters" and "parameters" in raw:
            own = {(p.get("name"), p.get("in")) for p in raw["parameters"] if isinstance(p, dict)}
            extra = [p for p in value if not (isinstance(p, dict) and (p.get("name"), p.get("in")) in own)]
            raw["parameters"] = list(raw["parameters"]) + extra
        elif key not in raw:
            raw[key] = value
    return raw


def _enumerate(root: dict) -> list[Endpoint]:
    out = []
    for path, item in root["paths"].items():
        if not isinstance(item, dict):
            continue
        for key, op in item.items():
            if key.lower() in HTTP_VERBS and isinstance(op, dict):
                out.append(Endpoint(EndpointId(key, path), _fold_path_item(item, op)))
    return out


def resolve_local_refs(root: dict) -> dict:
    """Return a copy of ``root`` with ``#/...`` references inlined; cycles stay as refs."""

    def lookup(ref):
        node = root
        for part in ref[2:].split("/"):
            part = part.replace("~1", "/").replace("~0", "~")
            node = node[int(part)] if isinstance(node, list) else node[part]
        return node

    def walk(node, active):
        if isinstance(node, dict):
            ref = node.get("$ref")
            if isinstance(ref, str) and ref.startswith("#/") and ref not in active:
                try:
                    target = lookup(ref)
                except (KeyError, IndexError, ValueError):
                    return copy.deepcopy(node)
                return walk(target, active | {ref})
            return {k: walk(v, active) for k, v in node.items()}
        if isinstance(node, list):
            return [walk(v, active) for v in node]
        return node

    return walk(root, frozenset())


def parse_spec(data: bytes | str, source_name: str, resolve_refs: bool = False) -> SpecDocument:
    if isinstance(data, str):
        data = data.encode("utf-8")
    fmt, root = _load_tree(data)
    if not isinstance(root, dict):
        raise NotOpenApi(f"{source_name}: top level is not an object")
    paths = root.get("paths")
    if not isinstance(paths, dict):
        raise NotOpenApi(f"{source_name}: missing 'paths' object")
    bad = [p for p in paths if not str(p).startswith("/")]
    if bad:
        raise NotOpenApi(f"{source_name}: path keys must start with '/': {bad[:3]}")
    info = root.get("info")
    if not isinstance(info, dict) or not isinstance(info.get("title"), str):
        raise NotOpenApi(f"{source_name}: missing info.title")
    if resolve_refs:
        root = resolve_local_refs(root)
    endpoints = _enumerate(root)
    return SpecDocument(
        source_name=source_name,
        format=fmt,
        root=root,
        title=info["title"],
        description=info.get("description"),
        _endpoints=tuple(endpoints),
        _by_id={ep.id: ep for ep in endpoints},
    )


def load_spec(path, resolve_refs: bool = False) -> SpecDocument:
    from pathlib import Path

    path = Path(path)
    return parse_spec(path.read_bytes(), path.stem, resolve_refs=resolve_refs)


def list_endpoints(doc: SpecDocument) -> list[Endpoint]:
    return doc.endpoints


def _common_prefix(a: str, b: str) -> int:
    n = 0
    for x, y in zip(a, b):
        if x != y:
            break
        n += 1
    return n


def nearest_path(doc: SpecDocument, path: str) -> str | None:
    best, best_len = None, -1
    for candidate in doc.root["paths"]:
        n = _common_prefix(candidate, path)
        if n > best_len:
            best, best_len = candidate, n
    return best


def get_endpoint(doc: SpecDocument, id: EndpointId | tuple) -> Endpoint:
    verb, path = (id.verb, id.path) if isinstance(id, EndpointId) else id
    try:
        key = EndpointId(verb, path)
    except ValueError:
        raise EndpointNotFound(verb, path, nearest_path(doc, path)) from None
    try:
        return doc._by_id[key]
    except KeyError:
        raise EndpointNotFound(key.verb, path, nearest_path(doc, path)) from None


def dumps_compact(value) -> str:
    return json.dumps(value, separators=(",", ":"), ensure_ascii=False)


def serialize_endpoint(ep: Endpoint) -> str:
    return dumps_compact({"verb": ep.id.verb, "path": ep.id.path, "operation": ep.raw})
