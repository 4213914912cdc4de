"""Walk through the cooking fixture: segment, extract, link, then answer.

Run from the repository root:  python3 demos/custard_walkthrough.py
"""
import json
from pathlib import Path

from eventmem.backends import StubEmbedder, StubExtractor, StubGenerator
from eventmem.memory import EventGraphStore, Rel
from eventmem.pipeline import ingest
from eventmem.retrieval import answer_question, assemble_context, retrieve
from eventmem.sentinel import read_frames

FIX = Path(__file__).resolve().parent.parent / "tests" / "fixtures" / "cooking"
QUESTION = "How did the chef make custard sauce from eggs and cream?"


def main():
    store = EventGraphStore()
    embed = StubEmbedder(store.dim)
    report = ingest(read_frames(FIX / "frames.jsonl"), (), store, StubExtractor.from_file(FIX / "replies.json"), embed)
    print(f"{report.chunks} chunks, {report.dynamic} sent for extraction, {report.triplets} triplets")

    print("\ncausal links between events:")
    for e in store.edges_by_rel(Rel.TEMPORAL_NEXT):
        print(f"  {store.nodes[e.src].text:35s} -> {store.nodes[e.dst].text}  (sim {e.provenance['similarity']:.2f})")

    ctx, trace = retrieve(QUESTION, store, embed)
    print("\nanchors:", ", ".join(store.nodes[a].text for a in trace.anchors))
    print(f"walked {len(trace.walked)} nodes, kept {len(trace.kept)} after dedup\n")
    print(assemble_context(ctx))

    gen = StubGenerator(json.loads((FIX / "script.json").read_text()))
    answer, _ = answer_question(QUESTION, store, embed, gen)
    print("\nscripted answer option:", answer.option_index)


if __name__ == "__main__":
    main()
