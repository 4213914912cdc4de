import hashlib
import math

import numpy as np
import pytest

from eventmem.backends import StubEmbedder, StubGenerator
from eventmem.core import MemConfig, RetrievalConfig
from eventmem.memory import EventGraphStore, NodeKind
from eventmem.retrieval import (
    AnswerError,
    RetrievalContext,
    RetrievalError,
    anchor,
    answer_question,
    assemble_context,
    build_qa_prompt,
    dedup,
    flatten_chronological,
    parse_answer,
    retrieve,
)
from conftest import FIXTURES, build_store, load_script
from oracles import all_pairs, oracle_dedup, oracle_embed

GOLDEN = FIXTURES.parent / "golden"
E = StubEmbedder(256)

COOKING_Q = "How did the chef make custard sauce from eggs and cream?"
REDUNDANT_Q = load_script("redundancy")


def node_store(specs, dim=2):
    """specs: (kind, text, t_start, vector)"""
    s = EventGraphStore(MemConfig(embed_dim=dim))
    for kind, text, t, v in specs:
        s._add_node(kind, text, np.asarray(v, float) / np.linalg.norm(v), t, t, "c")
    return s


def test_anchor_basic_and_empty():
    with pytest.raises(RetrievalError) as e:
        anchor("q", E, EventGraphStore())
    assert e.value.kind == "EmptyStore"
    one = node_store([(NodeKind.STATE, "x", 0, [1, 0])])
    assert anchor("anything", lambda t: np.array([0.0, 1.0]), one) == [next(iter(one.nodes))]
    two = node_store([(NodeKind.STATE, "x", 0, [1, 0]), (NodeKind.EVENT, "y", 0, [0, 1])])
    assert len(anchor("q", lambda t: np.array([1.0, 1.0]), two, RetrievalConfig(top_k=3))) == 2


def test_anchor_prefers_events_on_ties():
    s = node_store([(NodeKind.STATE, "s", 0, [1, 0]), (NodeKind.ENTITY, "n", 0, [1, 0]), (NodeKind.EVENT, "e", 0, [1, 0])])
    got = anchor("q", lambda t: np.array([1.0, 0.0]), s, RetrievalConfig(top_k=2))
    assert [s.nodes[i].kind for i in got] == [NodeKind.EVENT, NodeKind.STATE]


def test_anchor_matches_full_scan_on_cooking(cooking):
    store, embed, _ = cooking
    q = oracle_embed(COOKING_Q)
    ranked = sorted(store.nodes.values(), key=lambda n: (-float(oracle_embed(n.text) @ q), n.counter))
    assert anchor(COOKING_Q, embed, store) == [n.id for n in ranked[:3]]


def test_flatten():
    s = node_store([(NodeKind.STATE, "five", 5, [1, 0]), (NodeKind.EVENT, "one", 1, [1, 0]),
                    (NodeKind.STATE, "three", 3, [1, 0]), (NodeKind.ENTITY, "ent", 0, [0, 1]),
                    (NodeKind.EVENT, "one again", 1, [0, 1])])
    assert [n.text for n in flatten_chronological(s.nodes, s)] == ["one", "one again", "three", "five"]
    assert flatten_chronological([], s) == []


def _lookup(table):
    return lambda text: np.asarray(table[text], float)


def test_dedup_examples():
    s = node_store([(NodeKind.EVENT, "a", 0, [1, 0]), (NodeKind.EVENT, "b", 1, [1, 0]), (NodeKind.EVENT, "c", 2, [0, 1])])
    ordered = flatten_chronological(s.nodes, s)
    ctx = dedup(ordered, _lookup({"a": [1, 0], "b": [1, 0], "c": [0, 1]}), 0.85)
    assert [e[3] for e in ctx.entries] == ["a", "c"]
    assert ctx.pruned == [(ordered[1].id, 1.0)]
    ctx = dedup(ordered, _lookup({"a": [1, 0], "b": [0, 1], "c": [-1, 0]}), 0.85)
    assert len(ctx.entries) == 3


def test_dedup_keeps_on_equality():
    s = node_store([(NodeKind.EVENT, "a", 0, [1, 0]), (NodeKind.EVENT, "b", 1, [1, 0])])
    ctx = dedup(flatten_chronological(s.nodes, s), _lookup({"a": [1, 0], "b": [1, 0]}), 1.0)
    assert len(ctx.entries) == 2


def test_dedup_random_against_quadratic_oracle():
    rng = np.random.default_rng(8)
    for _ in range(50):
        n = int(rng.integers(1, 40))
        base = rng.normal(size=(5, 6))
        vs = base[rng.integers(0, 5, n)] + 0.3 * rng.normal(size=(n, 6))
        vs /= np.linalg.norm(vs, axis=1, keepdims=True)
        s = node_store([(NodeKind.EVENT, f"t{i}", i, vs[i]) for i in range(n)], dim=6)
        table = {f"t{i}": vs[i] for i in range(n)}
        tau = float(rng.uniform(0.5, 0.99))
        ctx = dedup(flatten_chronological(s.nodes, s), _lookup(table), tau)
        assert [e[3] for e in ctx.entries] == [f"t{i}" for i in oracle_dedup(list(vs), tau)]
        kept = [table[e[3]] for e in ctx.entries]
        assert all(float(a @ b) <= tau for a, b in all_pairs(kept))


def test_assemble_context():
    assert assemble_context(RetrievalContext()) == ""
    ctx = RetrievalContext(entries=[("n1", 2, 5, "man opens door")])
    assert assemble_context(ctx) == "[2.0–5.0] man opens door"


def test_qa_prompt_golden():
    q = ("What does the man in red do after opening the door?\n"
         "0. sits down\n1. leaves the room\n2. closes the window\n3. picks up a phone\n4. waves")
    ctx = RetrievalContext(entries=[("a", 2, 5, "man in red opens door"), ("b", 5, 9, "man in red picks up a phone")])
    got = build_qa_prompt(q, assemble_context(ctx))
    want = (GOLDEN / "qa_prompt.txt").read_text(encoding="utf-8")
    assert got == want
    assert hashlib.sha256(got.encode()).hexdigest() == hashlib.sha256(want.encode()).hexdigest()


def test_qa_prompt_structure():
    p = build_qa_prompt("Q?", "")
    assert "### [Decision Rules]" in p and p.endswith("Output exactly one line and nothing else: [FINAL ANSWER: X]")
    assert "causal context.\n\n\nOutput" in p
    assert sum(p.count(f"\n{k}) ") for k in range(1, 6)) == 5
    assert build_qa_prompt("{ctx}", "{q}").count("{ctx}") == 1


@pytest.mark.parametrize("raw,want", [
    ("[FINAL ANSWER: 3]", 3),
    ("reasoning...\n[FINAL ANSWER: 0]", 0),
    ("[FINAL ANSWER: 1] no wait [FINAL ANSWER: 4]", 4),
    ("[FINAL ANSWER:2]", 2),
])
def test_parse_answer(raw, want):
    assert parse_answer(raw).option_index == want


@pytest.mark.parametrize("raw,kind", [
    ("[FINAL ANSWER: 7]", "OutOfRange"),
    ("[FINAL ANSWER: -1]", "OutOfRange"),
    ("the answer is 2", "Unparsable"),
    ("[FINAL ANSWER: B]", "Unparsable"),
    ("", "Unparsable"),
])
def test_parse_answer_errors(raw, kind):
    with pytest.raises(AnswerError) as e:
        parse_answer(raw)
    assert e.value.kind == kind


def test_parse_answer_open_mode():
    assert parse_answer("[FINAL ANSWER: he whisks it]", "open").text == "he whisks it"
    assert parse_answer("  free text  ", "open").text == "free text"


def test_walk_recovers_intermediate_steps(cooking):
    store, embed, _ = cooking
    _, trace = retrieve(COOKING_Q, store, embed)
    texts = {i: store.nodes[i].text for i in store.nodes}
    assert sorted(texts[a] for a in trace.anchors) == ["cream", "custard sauce", "eggs"]
    walked = {texts[i] for i in trace.walked}
    assert {"crack eggs into glass bowl", "whisk yolks with sugar", "stir hot cream into yolk mixture"} <= walked


def test_answer_passthrough_and_determinism(cooking):
    store, embed, _ = cooking
    gen = StubGenerator(load_script("cooking"))
    a1, t1 = answer_question(COOKING_Q, store, embed, gen)
    a2, t2 = answer_question(COOKING_Q, store, embed, gen)
    assert a1.option_index == 0 and a1 == a2
    assert t1.to_json() == t2.to_json()
    assert gen.calls[0][1] == t1.chunk_ids and t1.chunk_ids


def test_hops_zero_limits_to_anchors(cooking):
    store, embed, _ = cooking
    _, t = retrieve(COOKING_Q, store, embed, RetrievalConfig(max_hops=0))
    assert set(t.walked) == set(t.anchors)


def test_redundancy_dedup_on_off():
    store, embed, _ = build_store("redundancy")
    (q,) = REDUNDANT_Q
    on_ctx, on = retrieve(q, store, embed)
    off_ctx, off = retrieve(q, store, embed, RetrievalConfig(tau_dup=math.inf))
    assert on.walked == off.walked
    assert len(on.kept) < len(off.kept)
    ordered = flatten_chronological(on.walked, store)
    want = [ordered[i].id for i in oracle_dedup([oracle_embed(n.text) for n in ordered], 0.85)]
    assert on.kept == want
    assert {p for p, _ in on.pruned} == set(off.kept) - set(on.kept)
    # idempotence
    again = dedup([store.nodes[i] for i in on.kept], embed, 0.85)
    assert again.kept_ids == on.kept
    # chronology of assembled lines
    starts = [float(line[1:].split("–")[0]) for line in assemble_context(on_ctx).splitlines()]
    assert starts == sorted(starts)
