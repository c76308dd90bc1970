import csv
import io
import json
import logging
import random

import pytest
from hypothesis import given, strategies as st

from specrag.agent import AgentConfig
from specrag.chunking import ChunkingStrategy, all_strategies, chunk_spec
from specrag.errors import EmptyGold, MalformedBenchmark
from specrag.evaluation import (
    BenchmarkQuery,
    MetricsRow,
    RunReport,
    compute_metrics,
    emit_report,
    evaluate_agent,
    evaluate_retrieval,
    format_grid,
    load_benchmark,
)
from specrag.index import build_index
from specrag.openapi_model import EndpointId, list_endpoints
from specrag.providers import LocalHashEmbedder, ScriptedLlm, TokenUsage
from specrag.tokenizer import REFERENCE

UNIVERSE = [f"{v} /e{i}" for i, v in enumerate(["GET", "POST", "PUT", "DELETE"] * 3)]


def brute_force(predicted, gold):
    tp = fp = fn = 0
    for e in UNIVERSE:
        if e in predicted and e in gold:
            tp += 1
        elif e in predicted:
            fp += 1
        elif e in gold:
            fn += 1
    r = tp / (tp + fn)
    p = tp / (tp + fp) if tp + fp else 0.0
    return r, p, (0.0 if r + p == 0 else 2 * r * p / (r + p))


def test_examples():
    m = compute_metrics({"GET /a", "GET /b"}, {"GET /a", "GET /c"})
    assert (m.recall, m.precision, m.f1) == (0.5, 0.5, 0.5)
    m = compute_metrics({"GET /a"}, {"GET /a"})
    assert (m.recall, m.precision, m.f1) == (1.0, 1.0, 1.0)
    m = compute_metrics(set(), {"GET /a"})
    assert (m.recall, m.precision, m.f1) == (0.0, 0.0, 0.0)
    assert compute_metrics({"get /a"}, {EndpointId("GET", "/a")}).recall == 1.0
    with pytest.raises(EmptyGold):
        compute_metrics({"GET /a"}, set())


def test_metrics_match_oracle_on_random_pairs():
    rng = random.Random(0)
    for _ in range(200):
        pred = set(rng.sample(UNIVERSE, rng.randint(0, 12)))
        gold = set(rng.sample(UNIVERSE, rng.randint(1, 12)))
        m = compute_metrics(pred, gold)
        assert (m.recall, m.precision, m.f1) == brute_force(pred, gold)


@given(st.sets(st.sampled_from(UNIVERSE)), st.sets(st.sampled_from(UNIVERSE), min_size=1), st.permutations(UNIVERSE))
def test_metric_invariants(pred, gold, perm):
    m = compute_metrics(pred, gold)
    assert 0 <= m.f1 <= 2 * min(m.recall, m.precision) + 1e-12
    if m.recall + m.precision:
        assert abs(m.f1 - 2 * m.recall * m.precision / (m.recall + m.precision)) < 1e-12
    relabel = dict(zip(UNIVERSE, perm))
    m2 = compute_metrics({relabel[e] for e in pred}, {relabel[e] for e in gold})
    assert (m.recall, m.precision, m.f1) == (m2.recall, m2.precision, m2.f1)


def test_macro_and_micro_means():
    rows = [MetricsRow("a", 1.0, 0.5, 2 / 3, TokenUsage(10, 0), tp=1, fp=1, fn=0),
            MetricsRow("b", 0.0, 0.0, 0.0, TokenUsage(20, 0), tp=0, fp=3, fn=2)]
    macro = RunReport({}, rows)
    assert macro.mean_recall == 0.5 and macro.mean_precision == 0.25
    assert macro.mean_tokens == {"prompt": 15.0, "completion": 0.0, "total": 15.0}
    micro = RunReport({}, rows, "micro")
    assert micro.mean_recall == 1 / 3 and micro.mean_precision == 0.2
    const = RunReport({}, [MetricsRow(str(i), 0.3, 0.3, 0.3, TokenUsage()) for i in range(7)])
    assert abs(const.mean_f1 - 0.3) < 1e-15


def test_load_benchmark(tmp_path, synth_doc, caplog):
    path = tmp_path / "b.json"
    path.write_text(json.dumps([
        {"query": "Who directed the top-1 rated movie?",
         "solution": ["GET /movie/top_rated", "GET /movie/{movie_id}/credits"]},
        {"query": "x", "solution": ["post /res0"]},
    ]))
    bench = load_benchmark(path)
    assert bench[0].query_id == "q000"
    assert bench[0].gold == {EndpointId("GET", "/movie/top_rated"), EndpointId("GET", "/movie/{movie_id}/credits")}
    with caplog.at_level(logging.WARNING):
        load_benchmark(path, synth_doc)
    assert "GET /movie/top_rated" in caplog.text and "/res0" not in caplog.text


@pytest.mark.parametrize("content", [
    "not json", '{"a": 1}', '[{"solution": ["GET /a"]}]', '[{"query": "q", "solution": []}]',
    '[{"query": "q", "solution": ["FETCH /a"]}]', '[{"query": "q", "solution": ["GET a"]}]',
])
def test_malformed_benchmarks(tmp_path, content):
    path = tmp_path / "b.json"
    path.write_text(content)
    with pytest.raises(MalformedBenchmark):
        load_benchmark(path)


def test_empty_gold_rejected():
    with pytest.raises(EmptyGold):
        BenchmarkQuery("q", "text", frozenset())


def verbatim_bench(doc):
    return [BenchmarkQuery(f"q{i}", ep.description, frozenset({ep.id})) for i, ep in enumerate(list_endpoints(doc))]


def test_retrieval_recall_and_k_monotonicity(synth_doc):
    emb = LocalHashEmbedder(256)
    idx = build_index(chunk_spec(synth_doc, ChunkingStrategy("endpoint_split", "token_chunking", 1024, 0),
                                 REFERENCE), emb)
    bench = verbatim_bench(synth_doc)
    reports = {k: evaluate_retrieval(idx, emb, REFERENCE, bench, k) for k in (1, 5, 10, 20)}
    assert reports[10].mean_recall == 1.0 and len(reports[10].rows) == 20
    for a, b in ((1, 5), (5, 10), (10, 20)):
        assert all(ra.recall <= rb.recall for ra, rb in zip(reports[a].rows, reports[b].rows))
    assert all(r.precision <= len(q.gold) / 10 for r, q in zip(reports[10].rows, bench))
    assert all(r.tokens.completion == 0 and r.tokens.prompt > 0 for r in reports[10].rows)
    par = evaluate_retrieval(idx, emb, REFERENCE, bench, 10, parallelism=4)
    assert emit_report(par, "csv") == emit_report(reports[10], "csv")


def test_agent_failures_become_error_rows(synth_doc):
    emb = LocalHashEmbedder(64)
    idx = build_index(chunk_spec(synth_doc, ChunkingStrategy("endpoint_split", "relevant_fields"), REFERENCE), emb)
    bench = verbatim_bench(synth_doc)[:2]
    scripts = {"q0": [{"kind": "final", "text": str(bench[0].gold and next(iter(bench[0].gold)))}], "q1": []}
    report = evaluate_agent(AgentConfig("query_tool"), idx, synth_doc, emb,
                            lambda bq: ScriptedLlm(scripts[bq.query_id]), REFERENCE, bench)
    assert report.rows[0].recall == 1.0 and report.rows[0].error is None
    assert report.rows[1].recall == 0.0 and report.rows[1].error.startswith("SCRIPT_DIVERGENCE")


def sample_report():
    rows = [MetricsRow("q1", 1.0, 0.5, 2 / 3, TokenUsage(100, 7), 1, 1, 0, ["GET /a", "GET /b"]),
            MetricsRow("q|2", 0.0, 0.0, 0.0, TokenUsage(), 0, 0, 1, [], "X: failed")]
    return RunReport({"k": 10, "started_at": "2024-01-01T00:00:00+00:00", "mode": "rag"}, rows)


def test_emit_csv_round_trips():
    data = emit_report(sample_report(), "csv")
    rows = list(csv.DictReader(io.StringIO(data.decode())))
    assert [r["query_id"] for r in rows] == ["q1", "q|2", "MEAN (macro)"]
    assert rows[0]["recall"] == "100.00" and rows[0]["f1"] == "66.67" and rows[0]["total_tokens"] == "107"
    assert rows[2]["precision"] == "25.00" and rows[0]["k"] == "10"
    assert "started_at" not in rows[0]
    assert "started_at" in emit_report(sample_report(), "csv", include_volatile=True).decode()


def test_emit_markdown_and_json():
    md = emit_report(sample_report(), "markdown").decode()
    assert "| Query | Recall | Precision | F1 |" in md and "q\\|2" in md
    data = json.loads(emit_report(sample_report(), "json"))
    assert data["mean"]["recall"] == 0.5 and data["rows"][1]["error"] == "X: failed"
    assert emit_report(sample_report(), "markdown") == emit_report(sample_report(), "markdown")
    with pytest.raises(ValueError):
        emit_report(sample_report(), "xml")


def test_format_grid():
    grid = all_strategies()
    rep = sample_report()
    text = format_grid({(grid[0], "m1"): rep, (grid[-1], "m1"): rep}, ["m1", "m2"])
    lines = text.strip().split("\n")
    assert lines[0].startswith("| Category | Splitting | Refinement | s | l | Recall m1 | Recall m2 |")
    assert lines[2] == "| Token | No | TC | 1024 | 0 | 50 |  | 25 |  | 33 |  |"
    assert lines[3].startswith("| LLM | Endpoint | Summary | N/A | N/A |")
