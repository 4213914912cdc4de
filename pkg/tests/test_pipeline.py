import json

import pytest

from eventmem.abstraction import ExtractionError
from eventmem.backends import BackendError, StubEmbedder, StubExtractor
from eventmem.core import ChunkKind
from eventmem.memory import EventGraphStore, Rel
from eventmem.pipeline import ingest, ingest_chunks, iter_chunks
from eventmem.sentinel import read_frames
from conftest import FIXTURES, build_store

E = StubEmbedder(256)


def _replies(name="cooking"):
    return json.loads((FIXTURES / name / "replies.json").read_text())


def _frames(name="cooking"):
    return list(read_frames(FIXTURES / name / "frames.jsonl"))


def test_cooking_counts(cooking):
    store, _, report = cooking
    assert (report.chunks, report.dynamic, report.static) == (11, 5, 6)
    assert report.extracted == 5 and report.triplets == 5 and not report.failed_chunks
    st = store.stats()
    assert st["nodes"]["Event"] == 5
    assert st["edges"]["RESULTS_IN"] == 5 == st["edges"]["PRECONDITION_OF"]
    # the cream branch starts a second chain, so one link fewer than a single line
    assert st["edges"]["TEMPORAL_NEXT"] == 3
    assert len(store.chunks) == 11
    assert store.check_integrity() == []


def test_cooking_event_chain(cooking):
    store, _, _ = cooking
    text = lambda i: store.nodes[i].text
    links = {(text(e.src), text(e.dst)) for e in store.edges_by_rel(Rel.TEMPORAL_NEXT)}
    assert links == {
        ("crack eggs into glass bowl", "whisk yolks with sugar"),
        ("whisk yolks with sugar", "stir hot cream into yolk mixture"),
        ("stir hot cream into yolk mixture", "simmer base until thick"),
    }


def _snapshot(store, tmp_path, name):
    store.save(tmp_path / name)
    return {f: (tmp_path / name / f).read_bytes() for f in ("nodes.jsonl", "edges.jsonl", "vectors.jsonl", "meta.json")}


@pytest.mark.parametrize("workers", [2, 4])
def test_parallel_extraction_commits_identically(tmp_path, workers):
    s1 = EventGraphStore()
    ingest(_frames(), (), s1, StubExtractor(_replies()), E)
    s2 = EventGraphStore()
    ingest(_frames(), (), s2, StubExtractor(_replies()), E, workers=workers)
    assert _snapshot(s1, tmp_path, "a") == _snapshot(s2, tmp_path, f"b{workers}")


def test_unparsable_reply_is_skipped_or_strict():
    replies = _replies()
    bad = sorted(replies)[1]
    replies[bad] = "no json here"
    s = EventGraphStore()
    report = ingest(_frames(), (), s, StubExtractor(replies), E)
    assert [c for c, _ in report.failed_chunks] == [bad]
    assert report.extracted == 4 and bad in {c["id"] for c in s.chunks}
    with pytest.raises(ExtractionError):
        ingest(_frames(), (), EventGraphStore(), StubExtractor(replies), E, strict=True)


def test_missing_fixture_propagates():
    replies = _replies()
    del replies[sorted(replies)[2]]
    with pytest.raises(BackendError) as e:
        ingest(_frames(), (), EventGraphStore(), StubExtractor(replies), E, workers=3)
    assert e.value.kind == "NoFixture"


def test_static_chunks_registered_not_extracted():
    seen = []

    class Spy(StubExtractor):
        def extract_triplets(self, req):
            seen.append(req.chunk.id)
            return super().extract_triplets(req)

    s = EventGraphStore()
    ingest(_frames(), (), s, Spy(_replies()), E)
    dyn = [c.id for c in iter_chunks(_frames()) if c.kind is ChunkKind.DYNAMIC]
    assert seen == dyn
    assert all(c["kind"] == "StaticBackground" for c in s.chunks if c["id"] not in dyn)


def test_include_static_asks_for_every_chunk():
    chunks = list(iter_chunks(_frames()))
    replies = {c.id: '{"events": []}' for c in chunks}
    report = ingest_chunks(chunks, EventGraphStore(), StubExtractor(replies), E, include_static=True)
    assert report.extracted == len(chunks)


def test_fixed_chunk_baseline():
    store, _, report = build_store("redundancy", fixed_chunk=12.0)
    assert report.static == 0 and report.dynamic == report.chunks == 3
    assert [c["id"] for c in store.chunks] == ["fixed-000000", "fixed-000001", "fixed-000002"]
