"""RAG baseline vs. Query-tool agent vs. Summary-tool agent on RestBench (accuracy and tokens per query).

    SPECRAG_RESTBENCH_DIR=/path/to/RestGPT SPECRAG_API_KEY_OPENAI=... \
        python3 scripts/run_agent_eval.py --api spotify --api tmdb --trace-dir traces/
"""

import argparse
import logging
from pathlib import Path

from specrag.agent import AgentConfig
from specrag.evaluation import emit_report
from specrag.experiments import agent_comparison, default_cache_dir, default_tokenizer, openai_providers, restbench_api

ROWS = [("Recall", "mean_recall"), ("Precision", "mean_precision"), ("F1", "mean_f1")]
MODES = [("RAG", "rag"), ("Query", "query_tool"), ("Summary", "summary_tool")]


def table(results: dict) -> str:
    apis = list(results)
    head = ["", ""] + [f"{api} {label}" for api in apis for label, _ in MODES]
    lines = ["| " + " | ".join(head) + " |", "|" + "|".join(["---"] * 2 + ["---:"] * (len(head) - 2)) + "|"]
    for name, attr in ROWS:
        cells = [f"{100 * getattr(results[a][m], attr):.2f}" for a in apis for _, m in MODES]
        lines.append("| Accuracy | " + name + " | " + " | ".join(cells) + " |")
    for name in ("prompt", "completion", "total"):
        cells = [f"{results[a][m].mean_tokens[name]:.2f}" for a in apis for _, m in MODES]
        lines.append("| #Token | " + name.title() + " | " + " | ".join(cells) + " |")
    return "\n".join(lines) + "\n"


def main():
    ap = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    ap.add_argument("--api", action="append", choices=["spotify", "tmdb"])
    ap.add_argument("--k", type=int, default=10)
    ap.add_argument("--max-steps", type=int, default=AgentConfig.max_steps)
    ap.add_argument("--parallelism", type=int, default=4)
    ap.add_argument("--out", type=Path, help="directory for the per-mode JSON reports and table.md")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")

    emb, llm = openai_providers()
    results = {}
    for name in args.api or ["spotify", "tmdb"]:
        api = restbench_api(name)
        if api is None:
            raise SystemExit(f"RestBench files for {name} not found; set SPECRAG_RESTBENCH_DIR")
        doc, bench = api.load()
        results[name] = agent_comparison(doc, bench, emb, llm, default_tokenizer(), args.k, args.max_steps,
                                         default_cache_dir(), args.parallelism)
    text = table(results)
    print(text)
    if args.out:
        args.out.mkdir(parents=True, exist_ok=True)
        (args.out / "table.md").write_text(text)
        for api, reports in results.items():
            for mode, rep in reports.items():
                (args.out / f"{api}__{mode}.json").write_bytes(emit_report(rep, "json"))


if __name__ == "__main__":
    main()
