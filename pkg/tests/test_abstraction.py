import json

import pytest
from hypothesis import given, settings, strategies as st

from eventmem.abstraction import (
    EXTRACTION_SYSTEM_PROMPT,
    ExtractionError,
    build_extraction_prompt,
    extraction_messages,
    make_extraction_request,
    parse_extraction,
    triplet_timestamps,
)
from eventmem.core import ChunkKind, EventChunk, SpeechIsland

GOLDEN = __import__("pathlib").Path(__file__).parent / "golden"


def chunk(a=3.0, b=9.5, *texts, cid="c000001"):
    islands = tuple(SpeechIsland(a + 0.1 * k, a + 0.1 * k + 0.05, t) for k, t in enumerate(texts))
    return EventChunk(cid, ChunkKind.DYNAMIC, a, b, (), islands)


DOOR = ('{"scene_inventory":["man in red"],"events":[{"temporal_order":1,"pre_state":"door closed",'
        '"event":"man in red opens door","post_state":"door open","entities":["man in red"],"location":"hallway"}]}')


def test_prompt_golden():
    got = build_extraction_prompt(chunk(3.0, 9.5, "hello.", "Pass me the whisk."))
    assert got == (GOLDEN / "extraction_prompt.txt").read_text(encoding="utf-8")


def test_prompt_substitutions():
    p = build_extraction_prompt(chunk(3.0, 9.5, "hello."))
    assert "Target Timestamp: 3.0 - 9.5." in p and "\nhello.\n" in p
    empty = build_extraction_prompt(chunk(3.0, 9.5))
    assert "Target Timestamp: 3.0 - 9.5.\n\nTask:" in empty
    assert empty.count("\n") == p.count("\n")
    req = make_extraction_request(chunk(3.0, 9.5, "hello."))
    assert req.audio_context == "hello." and req.prompt == p
    msgs = extraction_messages(chunk())
    assert msgs[0] == {"role": "system", "content": EXTRACTION_SYSTEM_PROMPT}
    assert msgs[1]["content"].endswith("{scene_inventory: [...], events: [...]}")


def test_parse_schema_example():
    res = parse_extraction(DOOR, chunk())
    assert len(res.triplets) == 1 and res.scene_inventory == ("man in red",)
    t = res.triplets[0]
    assert (t.pre_state, t.event, t.post_state, t.location, t.chunk_id) == (
        "door closed", "man in red opens door", "door open", "hallway", "c000001")
    assert not res.warnings and not res.errors


def test_parse_errors():
    with pytest.raises(ExtractionError) as e:
        parse_extraction("not json", chunk())
    assert e.value.kind == "Unparsable"
    with pytest.raises(ExtractionError) as e:
        parse_extraction('{"scene_inventory": []}', chunk())
    assert e.value.kind == "SchemaViolation"
    with pytest.raises(ExtractionError) as e:
        parse_extraction('{"events": {}}', chunk())
    assert e.value.kind == "SchemaViolation"
    assert parse_extraction('{"events": []}', chunk()).triplets == ()


def test_parse_tolerates_wrappers_and_defaults():
    raw = "Sure! Here it is:\n```json\n" + DOOR.replace(',"location":"hallway"', "").replace(
        ',"entities":["man in red"]', "") + "\n```\nDone."
    t = parse_extraction(raw, chunk()).triplets[0]
    assert t.location == "" and t.entities == ()


def test_parse_rejects_empty_fields_keeps_rest():
    evs = [
        {"temporal_order": 2, "pre_state": "a", "event": "b", "post_state": "c"},
        {"temporal_order": 1, "pre_state": "", "event": "x", "post_state": "y"},
        {"temporal_order": 3, "pre_state": "d", "event": "e", "post_state": "f", "entities": ["ghost"]},
    ]
    res = parse_extraction(json.dumps({"scene_inventory": [], "events": evs}), chunk())
    assert [t.event for t in res.triplets] == ["b", "e"]
    assert [t.temporal_order for t in res.triplets] == [1, 2]
    assert len(res.errors) == 1 and any("ghost" in w for w in res.warnings)


def test_parse_clamps_times():
    ev = {"temporal_order": 1, "pre_state": "a", "event": "b", "post_state": "c", "t_start": -5, "t_end": 99}
    t = parse_extraction(json.dumps({"events": [ev]}), chunk(3.0, 9.5)).triplets[0]
    assert (t.t_start, t.t_end) == (3.0, 9.5)


def _untimed(n):
    evs = [{"temporal_order": k + 1, "pre_state": f"p{k}", "event": f"e{k}", "post_state": f"q{k}"} for k in range(n)]
    return json.dumps({"events": evs})


@pytest.mark.parametrize("n,a,b,want", [
    (2, 0.0, 10.0, [(0, 5), (5, 10)]),
    (1, 4.0, 8.0, [(4, 8)]),
    (3, 0.0, 12.0, [(0, 4), (4, 8), (8, 12)]),
])
def test_triplet_timestamps(n, a, b, want):
    c = chunk(a, b)
    res = triplet_timestamps(parse_extraction(_untimed(n), c), c)
    assert [(t.t_start, t.t_end) for t in res.triplets] == want


def test_roundtrip():
    c = chunk()
    res = triplet_timestamps(parse_extraction(DOOR, c), c)
    assert parse_extraction(res.to_json(), c) == res


@settings(max_examples=300)
@given(st.text())
def test_parse_is_total(raw):
    c = chunk()
    try:
        res = parse_extraction(raw, c)
    except ExtractionError:
        return
    orders = [t.temporal_order for t in res.triplets]
    assert orders == list(range(1, len(orders) + 1))


json_values = st.recursive(
    st.none() | st.booleans() | st.integers() | st.floats(allow_nan=False) | st.text(max_size=5),
    lambda kids: st.lists(kids, max_size=4) | st.dictionaries(st.text(max_size=10), kids, max_size=4),
    max_leaves=20,
)
event_like = st.fixed_dictionaries({}, optional={
    "temporal_order": json_values, "pre_state": st.text(max_size=6) | json_values,
    "event": st.text(max_size=6), "post_state": st.text(max_size=6), "entities": json_values,
    "location": json_values, "t_start": json_values, "t_end": json_values,
})


@settings(max_examples=300)
@given(st.lists(event_like | json_values, max_size=6), json_values)
def test_parse_structured_fuzz(events, inventory):
    c = chunk(1.0, 5.0)
    res = triplet_timestamps(parse_extraction(json.dumps({"scene_inventory": inventory, "events": events}), c), c)
    prev = c.start
    for k, t in enumerate(res.triplets, 1):
        assert t.temporal_order == k
        assert c.start <= t.t_start <= t.t_end <= c.end
        assert t.t_start >= prev
        prev = t.t_start
