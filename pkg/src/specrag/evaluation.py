"""Benchmark evaluation: RestBench loading, recall/precision/F1, token accounting, reports."""

from __future__ import annotations

import csv
import io
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

from .agent import PROMPT_VERSION, AgentConfig, run_agent
from .errors import EmptyGold, MalformedBenchmark, SpecRagError
from .openapi_model import EndpointId, SpecDocument
from .providers import LlmProvider, TokenUsage
from .retrieval import retrieve

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class BenchmarkQuery:
    query_id: str
    text: str
    gold: frozenset

    def __post_init__(self):
        if not self.gold:
            raise EmptyGold(f"{self.query_id}: empty gold set")


@dataclass(frozen=True)
class Metrics:
    recall: float
    precision: float
    f1: float
    tp: int
    fp: int
    fn: int


def f1_score(recall: float, precision: float) -> float:
    if recall + precision == 0:
        return 0.0
    return 2 * recall * precision / (recall + precision)


def _norm(e) -> EndpointId:
    return e if isinstance(e, EndpointId) else EndpointId.parse(e)


def compute_metrics(predicted, gold) -> Metrics:
    gold = {_norm(e) for e in gold}
    if not gold:
        raise EmptyGold("gold set must be non-empty")
    predicted = {_norm(e) for e in predicted}
    tp = len(predicted & gold)
    fp = len(predicted - gold)
    fn = len(gold - predicted)
    recall = tp / (tp + fn)
    precision = tp / (tp + fp) if predicted else 0.0
    return Metrics(recall, precision, f1_score(recall, precision), tp, fp, fn)


@dataclass
class MetricsRow:
    query_id: str
    recall: float
    precision: float
    f1: float
    tokens: TokenUsage
    tp: int = 0
    fp: int = 0
    fn: int = 0
    predicted: list = field(default_factory=list)
    error: str | None = None

    @classmethod
    def from_metrics(cls, query_id, m: Metrics, tokens: TokenUsage, predicted=(), error=None):
        return cls(query_id, m.recall, m.precision, m.f1, tokens, m.tp, m.fp, m.fn,
                   [str(e) for e in predicted], error)


@dataclass
class RunReport:
    run_metadata: dict
    rows: list[MetricsRow]
    averaging: str = "macro"

    def _mean(self, attr):
        return sum(getattr(r, attr) for r in self.rows) / len(self.rows) if self.rows else 0.0

    def _micro(self):
        tp = sum(r.tp for r in self.rows)
        fp = sum(r.fp for r in self.rows)
        fn = sum(r.fn for r in self.rows)
        recall = tp / (tp + fn) if tp + fn else 0.0
        precision = tp / (tp + fp) if tp + fp else 0.0
        return recall, precision, f1_score(recall, precision)

    @property
    def mean_recall(self) -> float:
        return self._micro()[0] if self.averaging == "micro" else self._mean("recall")

    @property
    def mean_precision(self) -> float:
        return self._micro()[1] if self.averaging == "micro" else self._mean("precision")

    @property
    def mean_f1(self) -> float:
        return self._micro()[2] if self.averaging == "micro" else self._mean("f1")

    @property
    def mean_tokens(self) -> dict:
        n = len(self.rows) or 1
        return {k: sum(getattr(r.tokens, k) for r in self.rows) / n for k in ("prompt", "completion", "total")}


# ---------------------------------------------------------------- loading


def load_benchmark(path, doc: SpecDocument | None = None) -> list[BenchmarkQuery]:
    """RestBench layout: a JSON array of ``{"query": ..., "solution": ["VERB /path", ...]}``."""
    path = Path(path)
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, ValueError) as exc:
        raise MalformedBenchmark(f"{path}: {exc}") from exc
    if isinstance(data, dict):
        data = data.get("queries", data.get("data"))
    if not isinstance(data, list):
        raise MalformedBenchmark(f"{path}: expected an array of query records")
    known = {ep.id for ep in doc.endpoints} if doc is not None else None
    out = []
    for i, rec in enumerate(data):
        if not isinstance(rec, dict) or not isinstance(rec.get("query"), str):
            raise MalformedBenchmark(f"{path}: record {i} has no query text")
        solution = rec.get("solution")
        if not isinstance(solution, list) or not solution:
            raise MalformedBenchmark(f"{path}: record {i} has no solution endpoints")
        gold = []
        for s in solution:
            try:
                gold.append(EndpointId.parse(str(s)))
            except ValueError as exc:
                raise MalformedBenchmark(f"{path}: record {i}: {exc}") from exc
        qid = str(rec.get("id", rec.get("query_id", f"q{i:03d}")))
        if known is not None:
            for g in gold:
                if g not in known:
                    log.warning("%s %s: gold endpoint %s is not in %s", path.name, qid, g, doc.source_name)
        out.append(BenchmarkQuery(qid, rec["query"], frozenset(gold)))
    return out


# ---------------------------------------------------------------- running


def _ordered_map(fn, items, parallelism):
    if parallelism <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=parallelism) as pool:
        return list(pool.map(fn, items))


def evaluate_retrieval(idx, emb, tok, bench: list[BenchmarkQuery], k: int, metadata: dict | None = None,
                       parallelism: int = 1, averaging: str = "macro") -> RunReport:
    def one(bq):
        res = retrieve(idx, emb, tok, bq.text, k)
        m = compute_metrics(res.endpoints, bq.gold)
        # no LLM is involved: the retrieved chunks are the prompt, completion is zero
        return MetricsRow.from_metrics(bq.query_id, m, TokenUsage(res.retrieved_token_count, 0), res.endpoints)

    meta = {"mode": "rag", "k": k, "embedding_model": emb.name,
            "strategy": idx.strategy_fingerprint, **(metadata or {})}
    return RunReport(meta, _ordered_map(one, bench, parallelism), averaging)


def evaluate_agent(cfg: AgentConfig, idx, doc, emb, llm, tok, bench: list[BenchmarkQuery],
                   metadata: dict | None = None, parallelism: int = 1, averaging: str = "macro",
                   traces: dict | None = None) -> RunReport:
    """``llm`` is a provider or a callable ``BenchmarkQuery -> provider`` (per-query scripts).

    Per-query failures become zero-metric rows carrying the error text. Traces
    are stored into ``traces`` (query_id -> AgentTrace) when given.
    """
    provider_for: Callable = (lambda bq: llm) if isinstance(llm, LlmProvider) else llm

    def one(bq):
        try:
            endpoints, trace = run_agent(bq.text, cfg, idx, doc, emb, provider_for(bq), tok)
        except SpecRagError as exc:
            zero = Metrics(0.0, 0.0, 0.0, 0, 0, len(bq.gold))
            return MetricsRow.from_metrics(bq.query_id, zero, TokenUsage(), error=f"{exc.code}: {exc}")
        if traces is not None:
            traces[bq.query_id] = trace
        m = compute_metrics(endpoints, bq.gold)
        return MetricsRow.from_metrics(bq.query_id, m, trace.total_usage, endpoints)

    meta = {"mode": f"agent:{cfg.strategy}", "k": cfg.k, "max_steps": cfg.max_steps,
            "embedding_model": emb.name, "llm": cfg.llm_name, "strategy": idx.strategy_fingerprint,
            "prompt_version": PROMPT_VERSION,
            **(metadata or {})}
    return RunReport(meta, _ordered_map(one, bench, parallelism), averaging)


# ---------------------------------------------------------------- output

COLUMNS = ["query_id", "recall", "precision", "f1", "prompt_tokens", "completion_tokens", "total_tokens", "error"]
VOLATILE_METADATA = ("started_at", "finished_at")


def _pct(x: float) -> str:
    return f"{100 * x:.2f}"


def _tok(x: float) -> str:
    return f"{x:.2f}"


def _table(report: RunReport) -> list[list[str]]:
    rows = [[r.query_id, _pct(r.recall), _pct(r.precision), _pct(r.f1), str(r.tokens.prompt),
             str(r.tokens.completion), str(r.tokens.total), r.error or ""] for r in report.rows]
    t = report.mean_tokens
    rows.append([f"MEAN ({report.averaging})", _pct(report.mean_recall), _pct(report.mean_precision),
                 _pct(report.mean_f1), _tok(t["prompt"]), _tok(t["completion"]), _tok(t["total"]), ""])
    return rows


def _stable_meta(report: RunReport, include_volatile: bool) -> dict:
    meta = {k: v for k, v in report.run_metadata.items() if include_volatile or k not in VOLATILE_METADATA}
    return dict(sorted(meta.items()))


def emit_report(report: RunReport, fmt: str = "markdown", include_volatile: bool = False) -> bytes:
    """Render as ``csv``, ``json`` (structured text) or ``markdown``; byte-stable for equal reports.

    Wall-clock metadata is left out unless ``include_volatile`` is set.
    """
    meta = _stable_meta(report, include_volatile)
    if fmt == "json":
        t = report.mean_tokens
        data = {
            "metadata": meta,
            "averaging": report.averaging,
            "mean": {"recall": report.mean_recall, "precision": report.mean_precision, "f1": report.mean_f1,
                     "tokens": t},
            "rows": [{"query_id": r.query_id, "recall": r.recall, "precision": r.precision, "f1": r.f1,
                      "tokens": r.tokens.to_dict(), "tp": r.tp, "fp": r.fp, "fn": r.fn,
                      "predicted": r.predicted, "error": r.error} for r in report.rows],
        }
        return (json.dumps(data, ensure_ascii=False, indent=1) + "\n").encode("utf-8")
    if fmt == "csv":
        buf = io.StringIO()
        meta_cols = list(meta)
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(meta_cols + COLUMNS)
        for row in _table(report):
            w.writerow([meta[c] for c in meta_cols] + row)
        return buf.getvalue().encode("utf-8")
    if fmt == "markdown":
        lines = [f"- {k}: {v}" for k, v in meta.items()]
        lines.append("")
        header = ["Query", "Recall", "Precision", "F1", "Prompt", "Completion", "Total", "Error"]
        lines.append("| " + " | ".join(header) + " |")
        lines.append("|" + "|".join(["---"] + ["---:"] * 6 + ["---"]) + "|")
        for row in _table(report):
            lines.append("| " + " | ".join(c.replace("|", "\\|") for c in row) + " |")
        return ("\n".join(lines) + "\n").encode("utf-8")
    raise ValueError(f"unknown report format {fmt!r}")


_SPLIT_LABEL = {"no_split": "No", "endpoint_split": "Endpoint", "json_split": "JSON"}
_REFINE_LABEL = {"token_chunking": "TC", "remove_examples": "RE", "relevant_fields": "RF",
                 "llm_query": "Query", "llm_summary": "Summary"}


def format_grid(results: dict, models: list[str]) -> str:
    """Strategy-by-model grid: ``results[(strategy, model)] -> RunReport``.

    One row per strategy; Recall, Precision and F1 column groups with one
    column per model, in percent.
    """
    strategies = []
    for strategy, _ in results:
        if strategy not in strategies:
            strategies.append(strategy)
    head = ["Category", "Splitting", "Refinement", "s", "l"]
    for metric in ("Recall", "Precision", "F1"):
        head += [f"{metric} {m}" for m in models]
    lines = ["| " + " | ".join(head) + " |", "|" + "|".join(["---"] * 3 + ["---:"] * (len(head) - 3)) + "|"]
    for st in strategies:
        row = ["LLM" if st.category == "llm_based" else "Token", _SPLIT_LABEL[st.splitting],
               _REFINE_LABEL[st.refinement], str(st.s) if st.s is not None else "N/A",
               str(st.l) if st.l is not None else "N/A"]
        for attr in ("mean_recall", "mean_precision", "mean_f1"):
            for m in models:
                rep = results.get((st, m))
                row.append(f"{100 * getattr(rep, attr):.0f}" if rep else "")
        lines.append("| " + " | ".join(row) + " |")
    return "\n".join(lines) + "\n"
