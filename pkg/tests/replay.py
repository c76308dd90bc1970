"""Scripted agent replay over the fixture in fixtures/agent_replay.

Run ``python3 tests/replay.py --write`` to refresh the golden files after an
intentional change to prompts, tool output or report layout.
"""

import json
import sys
from pathlib import Path

from specrag.agent import AgentConfig
from specrag.chunking import ChunkingStrategy, build_summary_chunks, chunk_spec
from specrag.evaluation import emit_report, evaluate_agent, evaluate_retrieval, load_benchmark
from specrag.index import build_index
from specrag.openapi_model import load_spec
from specrag.providers import LocalHashEmbedder, ScriptedLlm
from specrag.tokenizer import REFERENCE

HERE = Path(__file__).parent / "fixtures" / "agent_replay"
GOLDEN = HERE / "golden"
MAX_STEPS = 4
K = 3


def run_replay(script_for=None):
    """Return ``{relative file name: bytes}`` for every artefact of one replay run."""
    doc = load_spec(HERE / "spec.json")
    bench = load_benchmark(HERE / "bench.json", doc)
    emb = LocalHashEmbedder(256)
    summaries = ScriptedLlm.load(HERE / "summaries.json")
    idx = build_index(build_summary_chunks(doc, summaries, emb.name), emb)
    if script_for is None:
        scripts = json.loads((HERE / "scripts.json").read_text())
        script_for = lambda bq: ScriptedLlm(scripts[bq.query_id], name="scripted")
    cfg = AgentConfig("summary_tool", k=K, max_steps=MAX_STEPS, llm_name="scripted")
    traces = {}
    report = evaluate_agent(cfg, idx, doc, emb, script_for, REFERENCE, bench, traces=traces)

    rag_idx = build_index(chunk_spec(doc, ChunkingStrategy("endpoint_split", "token_chunking", 1024, 0), REFERENCE), emb)
    rag = evaluate_retrieval(rag_idx, emb, REFERENCE, bench, K)

    out = {f"{qid}.trace.json": t.dumps().encode() for qid, t in traces.items()}
    for fmt, ext in (("csv", "csv"), ("json", "json"), ("markdown", "md")):
        out[f"agent_report.{ext}"] = emit_report(report, fmt)
        out[f"rag_report.{ext}"] = emit_report(rag, fmt)
    return out, report, rag, traces


if __name__ == "__main__" and "--write" in sys.argv:
    files, *_ = run_replay()
    for name, data in files.items():
        (GOLDEN / name).write_bytes(data)
    print(f"wrote {len(files)} files to {GOLDEN}")
