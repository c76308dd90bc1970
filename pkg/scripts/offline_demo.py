"""Offline walk-through on the bundled mini movie API: chunk, index, retrieve, and a scripted agent replay."""

import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "tests"))

from replay import run_replay  # noqa: E402

from specrag import REFERENCE, ChunkingStrategy, LocalHashEmbedder, build_index, chunk_spec, load_spec, retrieve  # noqa: E402

HERE = Path(__file__).resolve().parents[1] / "tests" / "fixtures" / "agent_replay"


def main():
    doc = load_spec(HERE / "spec.json")
    emb = LocalHashEmbedder(256)
    for st in (ChunkingStrategy("endpoint_split", "token_chunking", 1024, 0),
               ChunkingStrategy("endpoint_split", "relevant_fields"),
               ChunkingStrategy("json_split", "token_chunking", 64, 8)):
        idx = build_index(chunk_spec(doc, st, REFERENCE), emb)
        res = retrieve(idx, emb, REFERENCE, "Who is in the cast of the best rated movie?", 3)
        print(f"{st.fingerprint:45s} chunks={len(idx):3d} tokens={res.retrieved_token_count:5d} "
              f"-> {', '.join(map(str, res.endpoints))}")
    files, *_ = run_replay()
    print()
    print(files["agent_report.md"].decode())


if __name__ == "__main__":
    main()
