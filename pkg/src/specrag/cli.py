"""``specrag`` command line: chunk, index, query, agent, eval.

Exit codes (closed set)::

    0  success
    1  unexpected internal error
    2  configuration / usage error
    3  malformed or non-OpenAPI document, unknown endpoint
    4  invalid chunking strategy or chunk parameters
    5  provider unavailable / protocol error / script divergence
    6  index errors (empty corpus, duplicate ids, provider mismatch, corrupt or wrong version)
    7  malformed benchmark

Failures print exactly one final ``error: <CODE>: <message>`` line on stderr.
"""

from __future__ import annotations

import argparse
import datetime as _dt
import json
import re
import statistics
import sys
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from . import __version__
from .agent import AgentConfig, run_agent
from .chunking import ChunkingStrategy, build_summary_chunks, chunk_spec, read_chunks, write_chunks
from .errors import ConfigError, SpecRagError
from .evaluation import emit_report, evaluate_agent, evaluate_retrieval, load_benchmark
from .index import build_index, load_index, save_index
from .openapi_model import load_spec
from .providers import ScriptedLlm, make_embedder, make_llm
from .retrieval import retrieve
from .tokenizer import count_tokens, get_tokenizer

SPLITTING_ALIASES = {"no": "no_split", "none": "no_split", "endpoint": "endpoint_split", "json": "json_split"}
REFINEMENT_ALIASES = {"token-chunking": "token_chunking", "tc": "token_chunking",
                      "remove-examples": "remove_examples", "re": "remove_examples",
                      "relevant-fields": "relevant_fields", "rf": "relevant_fields",
                      "summary": "llm_summary", "llm-summary": "llm_summary",
                      "query": "llm_query", "llm-query": "llm_query"}
_SECRET_KEY = re.compile(r"api[_-]?key|secret|password", re.I)


@dataclass
class RunConfig:
    spec_paths: list = field(default_factory=list)
    strategy: dict = field(default_factory=lambda: {"splitting": "endpoint_split", "refinement": "relevant_fields"})
    k: int = 10
    tokenizer: str = "reference"
    embedding: dict = field(default_factory=lambda: {"provider": "local", "dimension": 256})
    llm: dict | None = None
    cache_dir: str = ".specrag-cache"
    parallelism: int = 1

    def validate(self):
        if self.k < 1:
            raise ConfigError("k must be >= 1")
        if self.parallelism < 1:
            raise ConfigError("parallelism must be >= 1")
        for p in self.spec_paths:
            if not Path(p).is_file():
                raise ConfigError(f"spec file not found: {p}")


def _reject_secrets(node, where="config"):
    if isinstance(node, dict):
        for k, v in node.items():
            if _SECRET_KEY.search(str(k)):
                raise ConfigError(f"{where}: '{k}' looks like a credential; API keys are read from "
                                  "SPECRAG_API_KEY_<PROVIDER> environment variables only")
            _reject_secrets(v, where)
    elif isinstance(node, list):
        for v in node:
            _reject_secrets(v, where)


def load_config(path) -> dict:
    if path is None:
        return {}
    try:
        data = yaml.safe_load(Path(path).read_text(encoding="utf-8")) or {}
    except (OSError, yaml.YAMLError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: config must be a mapping")
    _reject_secrets(data, str(path))
    if "specs" in data:
        data["spec_paths"] = data.pop("specs")
    return data


def _parse_embedding_flag(text: str) -> dict:
    # "local", "local:384", "<provider>:<model>:<dimension>"
    parts = text.split(":")
    if parts[0] == "local":
        return {"provider": "local", "dimension": int(parts[1]) if len(parts) > 1 else 256}
    if len(parts) != 3:
        raise ConfigError(f"--embedding expects local[:dim] or provider:model:dim, got {text!r}")
    return {"provider": parts[0], "model": parts[1], "dimension": int(parts[2])}


def _parse_llm_flag(text: str) -> dict:
    if text.startswith("scripted:"):
        return {"provider": "scripted", "script": text[len("scripted:"):]}
    provider, _, model = text.partition(":")
    if not model:
        raise ConfigError(f"--llm expects provider:model or scripted:<file>, got {text!r}")
    return {"provider": provider, "model": model}


def resolve_config(args) -> RunConfig:
    data = load_config(args.config)
    cfg = RunConfig()
    known = set(RunConfig.__dataclass_fields__)
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    for key, value in data.items():
        if isinstance(getattr(cfg, key), dict) and isinstance(value, dict):
            merged = dict(getattr(cfg, key)) if key != "strategy" else {}
            merged.update(value)
            value = merged
        setattr(cfg, key, value)
    # flags override the file
    if getattr(args, "spec", None):
        cfg.spec_paths = list(args.spec)
    if args.k is not None:
        cfg.k = args.k
    if args.tokenizer is not None:
        cfg.tokenizer = args.tokenizer
    if args.cache_dir is not None:
        cfg.cache_dir = args.cache_dir
    if getattr(args, "embedding", None):
        cfg.embedding = _parse_embedding_flag(args.embedding)
    if getattr(args, "llm", None):
        cfg.llm = _parse_llm_flag(args.llm)
    if getattr(args, "parallelism", None):
        cfg.parallelism = args.parallelism
    strat = dict(cfg.strategy)
    if getattr(args, "splitting", None):
        strat["splitting"] = args.splitting
    if getattr(args, "refinement", None):
        strat["refinement"] = args.refinement
    strat["splitting"] = SPLITTING_ALIASES.get(strat.get("splitting"), strat.get("splitting"))
    strat["refinement"] = REFINEMENT_ALIASES.get(strat.get("refinement"), strat.get("refinement"))
    if strat["refinement"] == "token_chunking":
        if getattr(args, "s", None) is not None:
            strat["s"] = args.s
        if getattr(args, "l", None) is not None:
            strat["l"] = args.l
        strat.setdefault("s", 1024)
        strat.setdefault("l", 0)
    else:
        strat.pop("s", None)
        strat.pop("l", None)
    cfg.strategy = strat
    cfg.validate()
    return cfg


def _strategy(cfg: RunConfig, embedder_name: str) -> ChunkingStrategy:
    d = dict(cfg.strategy)
    d.setdefault("embedding_model_name", embedder_name)
    return ChunkingStrategy.from_dict(d)


def _out(text: str):
    sys.stdout.write(text if text.endswith("\n") else text + "\n")


# ---------------------------------------------------------------- commands


def cmd_chunk(args, cfg: RunConfig) -> int:
    if not cfg.spec_paths:
        raise ConfigError("chunk needs at least one --spec")
    tok = get_tokenizer(cfg.tokenizer)
    emb_name = make_embedder(cfg.embedding, cfg.cache_dir).name
    llm = make_llm(cfg.llm, cfg.cache_dir) if cfg.llm else None
    chunks = []
    if args.summary_tool:
        if llm is None:
            raise ConfigError("--summary-tool needs an LLM provider (--llm or config 'llm')")
        for path in cfg.spec_paths:
            chunks += build_summary_chunks(load_spec(path), llm, emb_name, cfg.cache_dir, cfg.parallelism)
        fingerprint = chunks[0].chunk_id.split("#")[1] if chunks else "summary_tool"
    else:
        strategy = _strategy(cfg, emb_name)
        if strategy.category == "token_based":
            llm = None
        elif llm is None:
            raise ConfigError(f"{strategy.refinement} needs an LLM provider (--llm or config 'llm')")
        for path in cfg.spec_paths:
            chunks += chunk_spec(load_spec(path), strategy, tok, llm, cfg.cache_dir, cfg.parallelism)
        fingerprint = strategy.fingerprint
    write_chunks(args.out, chunks, fingerprint)
    counts = [count_tokens(tok, c.content) for c in chunks] or [0]
    if args.json:
        _out(json.dumps({"chunks": len(chunks), "fingerprint": fingerprint, "tokens_min": min(counts),
                         "tokens_mean": statistics.fmean(counts), "tokens_max": max(counts)}))
    else:
        _out(f"chunks: {len(chunks)}\nfingerprint: {fingerprint}\n"
             f"content tokens: min {min(counts)} mean {statistics.fmean(counts):.1f} max {max(counts)}")
    return 0


def cmd_index(args, cfg: RunConfig) -> int:
    fingerprint, chunks = read_chunks(args.chunks)
    emb = make_embedder(cfg.embedding, cfg.cache_dir)
    idx = build_index(chunks, emb, fingerprint)
    Path(args.out).write_bytes(save_index(idx))
    stats = {"entries": len(idx), "dimension": idx.dimension, "provider": emb.name,
             "remote_calls": emb.remote_calls, "cache_hits": emb.cache_hits}
    if args.json:
        _out(json.dumps(stats))
    else:
        _out("\n".join(f"{k}: {v}" for k, v in stats.items()))
    return 0


def _load_index(path):
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise ConfigError(f"cannot read index {path}: {exc}") from exc
    return load_index(data)


def cmd_query(args, cfg: RunConfig) -> int:
    idx = _load_index(args.index)
    emb = make_embedder(cfg.embedding, cfg.cache_dir)
    res = retrieve(idx, emb, get_tokenizer(cfg.tokenizer), args.query, cfg.k)
    if args.json:
        _out(json.dumps(res.to_dict(), ensure_ascii=False))
        return 0
    best = {}
    for sc in res.scored_chunks:
        for ref in sc.chunk.endpoint_refs:
            best.setdefault(ref, sc)
    for ep in res.endpoints:
        sc = best[ep]
        _out(f"{sc.rank:3d}  {sc.score:+.4f}  {ep}")
    _out(f"retrieved tokens: {res.retrieved_token_count}")
    return 0


def _scripted_llm_for(path):
    """A turn list / trace file, or a ``{query_id: turns}`` mapping, or a directory of ``<query_id>.json``."""
    path = Path(path)
    if path.is_dir():
        return lambda bq: ScriptedLlm.load(path / f"{bq.query_id}.json")
    data = json.loads(path.read_text(encoding="utf-8"))
    if isinstance(data, dict) and "steps" not in data and "turns" not in data:
        return lambda bq: ScriptedLlm(data[bq.query_id], name=f"scripted:{bq.query_id}")
    return lambda bq: ScriptedLlm.load(path)


def _agent_setup(args, cfg: RunConfig):
    if len(cfg.spec_paths) != 1:
        raise ConfigError("agent runs need exactly one --spec (for details on demand)")
    if not args.scripted and not cfg.llm:
        raise ConfigError("no LLM provider configured; pass --llm, set 'llm' in the config, or use --scripted")
    doc = load_spec(cfg.spec_paths[0])
    idx = _load_index(args.index)
    emb = make_embedder(cfg.embedding, cfg.cache_dir)
    strategy = {"query": "query_tool", "summary": "summary_tool"}.get(args.strategy, args.strategy)
    llm_name = f"scripted:{Path(args.scripted).name}" if args.scripted else cfg.llm.get("model", "")
    acfg = AgentConfig(strategy=strategy, k=cfg.k, max_steps=args.max_steps, llm_name=llm_name)
    return doc, idx, emb, acfg


def cmd_agent(args, cfg: RunConfig) -> int:
    doc, idx, emb, acfg = _agent_setup(args, cfg)
    llm = ScriptedLlm.load(args.scripted) if args.scripted else make_llm(cfg.llm, cfg.cache_dir)
    endpoints, trace = run_agent(args.query, acfg, idx, doc, emb, llm, get_tokenizer(cfg.tokenizer))
    if args.trace_out:
        Path(args.trace_out).write_text(trace.dumps(), encoding="utf-8")
    usage = trace.total_usage
    if args.json:
        _out(json.dumps({"endpoints": [str(e) for e in endpoints], "steps": len(trace.steps),
                         "tools": trace.tools, "truncated": trace.truncated, "usage": usage.to_dict()}))
    else:
        for e in endpoints:
            flag = "  (not in spec)" if e in trace.hallucinated_endpoints else ""
            _out(f"{e}{flag}")
        _out(f"steps: {len(trace.steps)}{' (truncated)' if trace.truncated else ''}")
        _out(f"tools: {', '.join(trace.tools)}")
        _out(f"tokens: prompt {usage.prompt} completion {usage.completion} total {usage.total}")
    return 0


def cmd_eval(args, cfg: RunConfig) -> int:
    started = _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")
    tok = get_tokenizer(cfg.tokenizer)
    meta = {"tokenizer": tok.name, "started_at": started}
    if args.agent:
        doc, idx, emb, acfg = _agent_setup(args, cfg)
        bench = load_benchmark(args.benchmark, doc)
        llm = _scripted_llm_for(args.scripted) if args.scripted else make_llm(cfg.llm, cfg.cache_dir)
        traces = {}
        report = evaluate_agent(acfg, idx, doc, emb, llm, tok, bench, meta, cfg.parallelism,
                                args.averaging, traces=traces)
        if args.trace_dir:
            Path(args.trace_dir).mkdir(parents=True, exist_ok=True)
            for qid, trace in traces.items():
                (Path(args.trace_dir) / f"{qid}.json").write_text(trace.dumps(), encoding="utf-8")
    else:
        doc = load_spec(cfg.spec_paths[0]) if len(cfg.spec_paths) == 1 else None
        bench = load_benchmark(args.benchmark, doc)
        idx = _load_index(args.index)
        emb = make_embedder(cfg.embedding, cfg.cache_dir)
        report = evaluate_retrieval(idx, emb, tok, bench, cfg.k, meta, cfg.parallelism, args.averaging)
    report.run_metadata["finished_at"] = _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")
    fmt = "json" if args.json else args.format
    data = emit_report(report, fmt)
    if args.out:
        Path(args.out).write_bytes(data)
        print(f"rows: {len(report.rows)}  recall {100 * report.mean_recall:.2f}  "
              f"precision {100 * report.mean_precision:.2f}  f1 {100 * report.mean_f1:.2f}", file=sys.stderr)
    else:
        sys.stdout.write(data.decode("utf-8"))
    return 0


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML run configuration")
    common.add_argument("--cache-dir")
    common.add_argument("--tokenizer", help="'reference' or 'bpe:<merges file>'")
    common.add_argument("--k", type=int)
    common.add_argument("--json", action="store_true", help="machine-readable output")
    common.add_argument("--embedding", help="local[:dim] or provider:model:dim")
    common.add_argument("--llm", help="provider:model or scripted:<file>")
    common.add_argument("--parallelism", type=int)

    parser = argparse.ArgumentParser(prog="specrag", description=__doc__.split("\n")[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("chunk", parents=[common], help="chunk OpenAPI specs")
    p.add_argument("--spec", action="append")
    p.add_argument("--splitting")
    p.add_argument("--refinement")
    p.add_argument("--s", type=int)
    p.add_argument("--l", type=int)
    p.add_argument("--summary-tool", action="store_true", help="build 'VERB /path — summary' chunks for the agent")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_chunk)

    p = sub.add_parser("index", parents=[common], help="embed chunks into an index file")
    p.add_argument("--chunks", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_index)

    p = sub.add_parser("query", parents=[common], help="top-k endpoint retrieval")
    p.add_argument("--index", required=True)
    p.add_argument("query")
    p.set_defaults(func=cmd_query)

    def agent_flags(p):
        p.add_argument("--index", required=True)
        p.add_argument("--spec", action="append")
        p.add_argument("--strategy", choices=["query", "summary", "query_tool", "summary_tool"], default="summary")
        p.add_argument("--scripted", help="replay a recorded script or trace instead of calling an LLM")
        p.add_argument("--max-steps", type=int, default=10)

    p = sub.add_parser("agent", parents=[common], help="run the discovery agent on one query")
    agent_flags(p)
    p.add_argument("--trace-out")
    p.add_argument("query")
    p.set_defaults(func=cmd_agent)

    p = sub.add_parser("eval", parents=[common], help="evaluate on a RestBench-format benchmark")
    agent_flags(p)
    p.add_argument("--benchmark", required=True)
    p.add_argument("--agent", action="store_true")
    p.add_argument("--format", choices=["csv", "json", "markdown"], default="markdown")
    p.add_argument("--averaging", choices=["macro", "micro"], default="macro")
    p.add_argument("--trace-dir")
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = resolve_config(args)
        return args.func(args, cfg)
    except SpecRagError as exc:
        print(f"error: {exc.code}: {exc}", file=sys.stderr)
        return exc.exit_code
    except (OSError, ValueError, KeyError) as exc:
        print(f"error: CONFIG: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - last line of defence, keep the one-line contract
        print(f"error: INTERNAL: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
