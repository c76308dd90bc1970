"""Chunking-strategy grid on RestBench: every strategy row x embedding model, recall/precision/F1 at top k.

    SPECRAG_RESTBENCH_DIR=/path/to/RestGPT SPECRAG_API_KEY_OPENAI=... \
        python3 scripts/run_grid.py --api spotify --out results/

Without credentials use ``--embedding local`` to run the token-based rows offline.
"""

import argparse
import logging
from pathlib import Path

from specrag.evaluation import emit_report, format_grid
from specrag.experiments import OPENAI_CHAT, OPENAI_EMBEDDING, default_cache_dir, default_tokenizer, restbench_api, strategy_grid
from specrag.providers import make_embedder, make_llm


def parse_embedding(spec):
    # "openai" (the reference model), "local[:dim]", or "provider:model:dim"
    if spec == "openai":
        return dict(OPENAI_EMBEDDING)
    parts = spec.split(":")
    if parts[0] == "local":
        return {"provider": "local", "dimension": int(parts[1]) if len(parts) > 1 else 256}
    return {"provider": parts[0], "model": parts[1], "dimension": int(parts[2])}


def main():
    ap = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    ap.add_argument("--api", choices=["spotify", "tmdb"], required=True)
    ap.add_argument("--embedding", action="append", help="repeatable; default: openai")
    ap.add_argument("--llm", help="provider:model for the LLM rows (default: the reference chat model, if keyed)")
    ap.add_argument("--no-llm", action="store_true", help="skip the LLM-based rows")
    ap.add_argument("--k", type=int, default=10)
    ap.add_argument("--parallelism", type=int, default=4)
    ap.add_argument("--out", type=Path, help="directory for per-row CSV reports and grid.md")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")

    api = restbench_api(args.api)
    if api is None:
        raise SystemExit("RestBench files not found; set SPECRAG_RESTBENCH_DIR")
    doc, bench = api.load()
    cache = default_cache_dir()
    embedders = {}
    for spec in args.embedding or ["openai"]:
        emb = make_embedder(parse_embedding(spec), cache)
        embedders[emb.name] = emb
    llm = None
    if not args.no_llm:
        cfg = dict(OPENAI_CHAT)
        if args.llm:
            provider, _, model = args.llm.partition(":")
            cfg = {"provider": provider, "model": model}
        llm = make_llm(cfg, cache)

    results = strategy_grid(doc, bench, embedders, default_tokenizer(), llm, args.k, cache, args.parallelism)
    grid = format_grid(results, list(embedders))
    print(grid)
    if args.out:
        args.out.mkdir(parents=True, exist_ok=True)
        (args.out / f"grid_{args.api}.md").write_text(grid)
        for (st, label), rep in results.items():
            name = f"{args.api}__{st.fingerprint}__{label}".replace("/", "_")
            (args.out / f"{name}.csv").write_bytes(emit_report(rep, "csv"))


if __name__ == "__main__":
    main()
