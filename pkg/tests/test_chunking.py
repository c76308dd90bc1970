import json
import threading

import pytest
from hypothesis import given, settings, strategies as st

from specrag.chunking import (
    REFINEMENTS,
    SPLITTINGS,
    VALID_COMBINATIONS,
    Chunk,
    ChunkingStrategy,
    IntermediateChunk,
    all_strategies,
    attach_endpoint_metadata,
    build_summary_chunks,
    chunk_spec,
    json_leaf_lines,
    read_chunks,
    refine_llm_query,
    refine_llm_summary,
    refine_relevant_fields,
    refine_remove_examples,
    refinement_cache,
    split_endpoints,
    split_json,
    split_no_split,
    write_chunks,
)
from specrag.errors import ConfigError, InvalidChunkParams, StrategyCombinationInvalid
from specrag.openapi_model import EndpointId, list_endpoints, parse_spec, serialize_endpoint
from specrag.providers import ScriptedLlm
from specrag.tokenizer import REFERENCE, count_tokens

EMPTY = parse_spec(b'{"info":{"title":"E"},"paths":{}}', "empty")


def leaf_count(node):
    if isinstance(node, dict):
        return sum(leaf_count(v) for v in node.values())
    if isinstance(node, list):
        return sum(leaf_count(v) for v in node)
    return 1


def has_key(node, names):
    if isinstance(node, dict):
        return any(k in names or has_key(v, names) for k, v in node.items())
    if isinstance(node, list):
        return any(has_key(v, names) for v in node)
    return False


def test_exactly_seven_combinations_are_constructible():
    built = set()
    for sp in SPLITTINGS:
        for rf in REFINEMENTS:
            kw = {"s": 1024, "l": 0} if rf == "token_chunking" else {}
            try:
                ChunkingStrategy(sp, rf, **kw)
            except StrategyCombinationInvalid:
                continue
            built.add((sp, rf))
    assert built == VALID_COMBINATIONS and len(built) == 7


@pytest.mark.parametrize("kw", [
    dict(splitting="endpoint_split", refinement="token_chunking"),
    dict(splitting="endpoint_split", refinement="token_chunking", s=10, l=10),
    dict(splitting="endpoint_split", refinement="token_chunking", s=0, l=0),
    dict(splitting="endpoint_split", refinement="relevant_fields", s=10, l=0),
])
def test_meta_parameter_validation(kw):
    with pytest.raises(InvalidChunkParams):
        ChunkingStrategy(**kw)


def test_category_is_derived_and_checked():
    assert ChunkingStrategy("endpoint_split", "llm_query").category == "llm_based"
    assert ChunkingStrategy("json_split", "token_chunking", 8, 0).category == "token_based"
    with pytest.raises(StrategyCombinationInvalid):
        ChunkingStrategy("endpoint_split", "llm_query", category="token_based")


def test_grid_has_sixteen_rows():
    grid = all_strategies(model="m")
    assert len(grid) == 16 and len({g.fingerprint for g in grid}) == 16


def test_strategy_round_trip():
    for st_ in all_strategies(model="m"):
        assert ChunkingStrategy.from_dict(json.loads(json.dumps(st_.to_dict()))) == st_


def test_splitters(synth_doc):
    (whole,) = split_no_split(synth_doc)
    assert json.loads(whole.text) == synth_doc.root and whole.endpoint is None
    assert len(split_no_split(EMPTY)) == 1
    eps = split_endpoints(synth_doc)
    assert [ic.endpoint for ic in eps] == [ep.id for ep in list_endpoints(synth_doc)]
    assert eps[0].text == serialize_endpoint(list_endpoints(synth_doc)[0])
    assert split_endpoints(EMPTY) == []


def test_json_leaf_lines_examples():
    assert json_leaf_lines({"a": {"b": 1, "c": "x"}}) == ["a b 1", "a c x"]
    assert json_leaf_lines({"a": [True, None]}) == ["a 0 true", "a 1 null"]
    assert json_leaf_lines({"a": "two\nlines"}) == ["a two lines"]
    assert json_leaf_lines({"e": {}, "f": []}) == []


def test_json_split_conserves_leaves(synth_doc):
    (ic,) = split_json(synth_doc)
    assert len(ic.text.split("\n")) == leaf_count(synth_doc.root)


json_trees = st.recursive(
    st.none() | st.booleans() | st.integers() | st.floats(allow_nan=False) | st.text(max_size=6),
    lambda c: st.lists(c, max_size=4) | st.dictionaries(st.text(max_size=4), c, max_size=4),
    max_leaves=30,
)


@settings(max_examples=100)
@given(json_trees)
def test_json_leaf_count_matches_recursive_oracle(tree):
    assert len(json_leaf_lines(tree)) == leaf_count(tree)


def test_remove_examples(synth_doc):
    for ic in split_endpoints(synth_doc):
        out = refine_remove_examples(ic)
        data = json.loads(out)
        assert not has_key(data, {"examples", "example"})
        assert "requestBody" not in data["operation"]
        assert refine_remove_examples(IntermediateChunk(out, ic.endpoint)) == out
    plain = parse_spec(b'{"info":{"title":"T"},"paths":{"/a":{"get":{"summary":"s"}}}}', "p")
    (ic,) = split_endpoints(plain)
    assert refine_remove_examples(ic) == ic.text
    with pytest.raises(StrategyCombinationInvalid):
        refine_remove_examples(split_no_split(plain)[0])


def test_relevant_fields():
    doc = parse_spec(json.dumps({"info": {"title": "Movies"}, "paths": {
        "/movie/top_rated": {"get": {"summary": "Top rated", "responses": {"200": {"description": "ok"}}}},
        "/bare": {"delete": {}}}}), "tmdb")
    top, bare = split_endpoints(doc)
    assert refine_relevant_fields(top, doc).split("\n") == [
        "service title: Movies", "service description: ", "verb: GET", "path: /movie/top_rated",
        "endpoint description: Top rated"]
    assert refine_relevant_fields(bare, doc).endswith("endpoint description: ")


def test_relevant_fields_are_shorter_than_full_endpoints(synth_doc):
    for ic in split_endpoints(synth_doc):
        assert count_tokens(REFERENCE, refine_relevant_fields(ic, synth_doc)) < count_tokens(REFERENCE, ic.text)


def test_llm_refinements_pass_through_and_cache(synth_doc, tmp_path):
    ic = split_endpoints(synth_doc)[0]
    llm = ScriptedLlm.constant("Lists top rated movies", 1)
    assert refine_llm_summary(ic, llm) == "Lists top rated movies"
    q = ScriptedLlm.constant("What are the highest rated films?", 1)
    assert refine_llm_query(ic, q) == "What are the highest rated films?"

    strategy = ChunkingStrategy("endpoint_split", "llm_summary")
    llm = ScriptedLlm.constant("summary", 20)
    chunks = chunk_spec(synth_doc, strategy, REFERENCE, llm, cache_dir=tmp_path)
    assert llm.position == 20
    assert all(c.embedding_input == "summary" for c in chunks)
    assert [c.content for c in chunks] == [ic.text for ic in split_endpoints(synth_doc)]
    # second run, fresh provider with an empty script: everything is cached
    again = chunk_spec(synth_doc, strategy, REFERENCE, ScriptedLlm([], name=llm.name), cache_dir=tmp_path)
    assert again == chunks
    # the on-disk file alone is enough (new process)
    from specrag import chunking
    chunking._caches.clear()
    again = chunk_spec(synth_doc, strategy, REFERENCE, ScriptedLlm([], name=llm.name), cache_dir=tmp_path)
    assert again == chunks


def test_llm_cache_key_is_content_sensitive(synth_doc):
    ic = split_endpoints(synth_doc)[0]
    cache = refinement_cache(None, "m", "summary-v1")
    llm = ScriptedLlm.constant("one", 1, name="m")
    refine_llm_summary(ic, llm, cache)
    changed = IntermediateChunk(ic.text[:-1] + " }", ic.endpoint)
    with pytest.raises(Exception):
        refine_llm_summary(changed, llm, cache)  # script exhausted: a new call was needed
    assert refine_llm_summary(ic, llm, cache) == "one"


def test_parallel_llm_refinement_keeps_document_order(synth_doc, tmp_path):
    lock = threading.Lock()
    seen = []

    class Echo(ScriptedLlm):
        def complete(self, prompt):
            from specrag.providers import TokenUsage
            with lock:
                seen.append(prompt)
            return prompt.rsplit("\n", 1)[-1][:40], TokenUsage(1, 1)

    llm = Echo([], name="echo")
    strategy = ChunkingStrategy("endpoint_split", "llm_query")
    par = chunk_spec(synth_doc, strategy, REFERENCE, llm, cache_dir=tmp_path / "a", parallelism=8)
    seq = chunk_spec(synth_doc, strategy, REFERENCE, llm, cache_dir=tmp_path / "b")
    assert par == seq
    assert [c.embedding_input for c in par] == [ic.text[:40] for ic in split_endpoints(synth_doc)]


def test_llm_presence_must_match_category(synth_doc):
    with pytest.raises(ConfigError):
        chunk_spec(synth_doc, ChunkingStrategy("endpoint_split", "llm_query"), REFERENCE)
    with pytest.raises(ConfigError):
        chunk_spec(synth_doc, ChunkingStrategy("endpoint_split", "remove_examples"), REFERENCE,
                   ScriptedLlm([]))


def substring_refs(content, doc):
    out = []
    for ep in list_endpoints(doc):
        p = ep.id.path
        if any(content[i:i + len(p)] == p for i in range(len(content) - len(p) + 1)):
            out.append(ep.id)
    return tuple(out)


@pytest.mark.parametrize("splitting, s, l", [("no_split", 200, 20), ("json_split", 64, 8), ("no_split", 8191, 0)])
def test_metadata_matches_substring_scan(synth_doc, splitting, s, l):
    chunks = chunk_spec(synth_doc, ChunkingStrategy(splitting, "token_chunking", s, l), REFERENCE)
    for c in chunks:
        assert c.endpoint_refs == substring_refs(c.content, synth_doc)


def test_metadata_substring_semantics():
    doc = parse_spec(b'{"info":{"title":"T"},"paths":{"/a":{"get":{},"put":{}},"/a/b":{"get":{}}}}', "n")
    c = Chunk("x", "see /a/b", "see /a/b", (), ChunkingStrategy("no_split", "token_chunking", 8, 0))
    assert [str(r) for r in attach_endpoint_metadata(c, doc).endpoint_refs] == ["GET /a", "PUT /a", "GET /a/b"]
    c = Chunk("x", "nothing", "nothing", (), c.strategy)
    assert attach_endpoint_metadata(c, doc).endpoint_refs == ()


def test_endpoint_split_conservation(synth_doc):
    ids = [ep.id for ep in list_endpoints(synth_doc)]
    for strategy in (ChunkingStrategy("endpoint_split", "remove_examples"),
                     ChunkingStrategy("endpoint_split", "relevant_fields"),
                     ChunkingStrategy("endpoint_split", "token_chunking", 1024, 0)):
        chunks = chunk_spec(synth_doc, strategy, REFERENCE)
        assert [c.endpoint_refs[0] for c in chunks] == ids
        assert all(len(c.endpoint_refs) == 1 for c in chunks)
    small = chunk_spec(synth_doc, ChunkingStrategy("endpoint_split", "token_chunking", 16, 4), REFERENCE)
    assert len(small) > len(ids)
    assert all(len(c.endpoint_refs) == 1 and c.endpoint_refs[0] in ids for c in small)
    assert {c.endpoint_refs[0] for c in small} == set(ids)


def test_chunk_ids_are_deterministic_and_ordered(synth_doc):
    strategy = ChunkingStrategy("json_split", "token_chunking", 50, 5)
    a = chunk_spec(synth_doc, strategy, REFERENCE)
    b = chunk_spec(synth_doc, strategy, REFERENCE)
    assert a == b
    ids = [c.chunk_id for c in a]
    assert ids == sorted(ids) and len(set(ids)) == len(ids)
    assert ids[0] == "synth#json_split+token_chunking+s50+l5#000000"


def test_whole_spec_token_partition(synth_doc):
    text = split_no_split(synth_doc)[0].text
    n = count_tokens(REFERENCE, text)
    chunks = chunk_spec(synth_doc, ChunkingStrategy("no_split", "token_chunking", 100, 0), REFERENCE)
    assert len(chunks) == -(-n // 100)
    assert "".join(c.content for c in chunks) == text


def test_summary_chunks(synth_doc):
    llm = ScriptedLlm.constant("Does  a\nthing", 20)
    chunks = build_summary_chunks(synth_doc, llm)
    assert chunks[0].content == f"{list_endpoints(synth_doc)[0].id} — Does a thing"
    assert chunks[0].content == chunks[0].embedding_input
    assert chunks[0].chunk_id.startswith("synth#summary_tool+")


def test_chunk_file_round_trip(synth_doc, tmp_path):
    strategy = ChunkingStrategy("endpoint_split", "token_chunking", 64, 8)
    chunks = chunk_spec(synth_doc, strategy, REFERENCE)
    write_chunks(tmp_path / "c.json", chunks, strategy.fingerprint)
    fp, back = read_chunks(tmp_path / "c.json")
    assert fp == strategy.fingerprint and back == chunks
    with pytest.raises(ValueError):
        Chunk("x", "c", "", (EndpointId("GET", "/a"),), strategy)
