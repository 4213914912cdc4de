"""Query-time pipeline: anchor, walk, flatten, deduplicate, prompt, parse."""
from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .core import RetrievalConfig, format_seconds, normalize
from .memory import EKGNode, EventGraphStore, NodeKind

__all__ = [
    "QA_TEMPLATE",
    "Answer",
    "AnswerError",
    "RetrievalContext",
    "RetrievalError",
    "RetrievalTrace",
    "anchor",
    "answer_question",
    "assemble_context",
    "build_qa_prompt",
    "dedup",
    "flatten_chronological",
    "parse_answer",
    "retrieve",
]

Embed = Callable[[str], np.ndarray]

QA_TEMPLATE = """\
You must answer a multiple-choice question about the attached original video.
Choose exactly one option index from 0 to 4.

### [Question & Choices]
{q}

### [Decision Rules]
1) Use the original video frames as the primary evidence.
2) Use the retrieved graph memory as complementary evidence from the same video.
3) Compare all five options against the visible action, object, person, and purpose.
4) If video evidence and graph memory disagree, prefer the directly visible video evidence.
5) If evidence is incomplete, make the best forced choice from the available options.

### [Retrieved RAG Memory]
The following graph memory was extracted from the same video and may help identify temporal actions, objects, participants, and causal context.
{ctx}

Output exactly one line and nothing else: [FINAL ANSWER: X]"""

_FINAL = re.compile(r"\[FINAL ANSWER:\s*([^\]\n]*?)\s*\]")

# lower rank wins when similarities tie exactly
_KIND_RANK = {NodeKind.EVENT: 0, NodeKind.STATE: 1, NodeKind.ENTITY: 2}


class RetrievalError(RuntimeError):
    def __init__(self, kind: str, message: str):
        super().__init__(f"{kind}: {message}")
        self.kind = kind


class AnswerError(ValueError):
    """``kind`` is ``Unparsable`` or ``OutOfRange``."""

    def __init__(self, kind: str, message: str):
        super().__init__(f"{kind}: {message}")
        self.kind = kind


@dataclass
class RetrievalContext:
    entries: list[tuple[str, float, float, str]] = field(default_factory=list)  # (id, t_start, t_end, text)
    kept_embeddings: list[np.ndarray] = field(default_factory=list)
    pruned: list[tuple[str, float]] = field(default_factory=list)

    @property
    def kept_ids(self) -> list[str]:
        return [e[0] for e in self.entries]


@dataclass(frozen=True)
class Answer:
    option_index: int | None
    text: str
    raw: str


@dataclass
class RetrievalTrace:
    question: str
    anchors: list[str]
    walked: list[str]
    kept: list[str]
    pruned: list[tuple[str, float]]
    prompt: str
    answer: str = ""
    chunk_ids: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "question": self.question,
            "anchors": list(self.anchors),
            "walked": list(self.walked),
            "kept": list(self.kept),
            "pruned": [{"id": i, "s_max": s} for i, s in self.pruned],
            "prompt": self.prompt,
            "answer": self.answer,
            "chunk_ids": list(self.chunk_ids),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), ensure_ascii=False, indent=1)


def anchor(question: str, embed: Embed, store: EventGraphStore, cfg: RetrievalConfig = RetrievalConfig()) -> list[str]:
    """Top-k nodes for the question; exact ties prefer Event, then State, then Entity."""
    if len(store) == 0:
        raise RetrievalError("EmptyStore", "the store has no nodes to anchor on")
    sims = store.similarities(embed(question))
    ranked = sorted(sims, key=lambda p: (-p[1], _KIND_RANK[store.nodes[p[0]].kind], store.nodes[p[0]].counter))
    return [node_id for node_id, _ in ranked[:cfg.top_k]]


def flatten_chronological(node_ids: Iterable[str], store: EventGraphStore) -> list[EKGNode]:
    nodes = [store.node(i) for i in node_ids]
    nodes = [n for n in nodes if n.kind is not NodeKind.ENTITY]
    return sorted(nodes, key=lambda n: (n.t_start, n.counter))


def dedup(ordered: Sequence[EKGNode], embed: Embed, tau_dup: float) -> RetrievalContext:
    """Greedy first-seen pruning: keep a node iff its max cosine to the kept set is <= ``tau_dup``."""
    ctx = RetrievalContext()
    seen = None
    for node in ordered:
        v = normalize(embed(node.text))
        if ctx.kept_embeddings:
            s_max = float((seen @ v).max())
            if s_max > tau_dup:
                ctx.pruned.append((node.id, s_max))
                continue
        ctx.entries.append((node.id, node.t_start, node.t_end, node.text))
        ctx.kept_embeddings.append(v)
        seen = np.vstack(ctx.kept_embeddings)
    return ctx


def assemble_context(ctx: RetrievalContext) -> str:
    return "\n".join(f"[{format_seconds(t0)}–{format_seconds(t1)}] {text}" for _, t0, t1, text in ctx.entries)


def build_qa_prompt(question_block: str, ctx_text: str) -> str:
    # one pass over the template, so braces inside q or ctx are never re-substituted
    head, rest = QA_TEMPLATE.split("{q}")
    mid, tail = rest.split("{ctx}")
    return head + question_block + mid + ctx_text + tail


def parse_answer(raw: str, mode: str = "mc") -> Answer:
    """Read the last ``[FINAL ANSWER: X]`` in ``raw``.

    In ``mc`` mode X must be an integer 0..4.  In ``open`` mode the bracket
    content is returned as text, or the whole stripped reply when there is
    no bracket.
    """
    hits = _FINAL.findall(raw or "")
    if mode == "open":
        text = hits[-1] if hits else (raw or "").strip()
        return Answer(None, text, raw)
    if mode != "mc":
        raise ValueError(f"unknown answer mode {mode!r}")
    if not hits:
        raise AnswerError("Unparsable", "no [FINAL ANSWER: X] in reply")
    x = hits[-1]
    if not re.fullmatch(r"[+-]?\d+", x):
        raise AnswerError("Unparsable", f"final answer {x!r} is not an integer")
    idx = int(x)
    if not 0 <= idx <= 4:
        raise AnswerError("OutOfRange", f"final answer {idx} outside 0..4")
    return Answer(idx, x, raw)


def retrieve(question: str, store: EventGraphStore, embed: Embed,
             cfg: RetrievalConfig = RetrievalConfig()) -> tuple[RetrievalContext, RetrievalTrace]:
    """Everything up to prompt construction; the trace carries the prompt."""
    with store._lock:
        anchors = anchor(question, embed, store, cfg)
        walked = store.neighbors_within(anchors, cfg.max_hops)
        ordered = flatten_chronological(walked, store)
        ctx = dedup(ordered, embed, cfg.tau_dup)
        chunk_ids = []
        for node_id in ctx.kept_ids:
            for c in store.nodes[node_id].source_chunks:
                if c not in chunk_ids:
                    chunk_ids.append(c)
        walked_sorted = sorted(walked, key=lambda i: store.nodes[i].counter)
    prompt = build_qa_prompt(question, assemble_context(ctx))
    trace = RetrievalTrace(question, anchors, walked_sorted, ctx.kept_ids, ctx.pruned, prompt, chunk_ids=chunk_ids)
    return ctx, trace


def answer_question(question: str, store: EventGraphStore, embed: Embed, generator,
                    cfg: RetrievalConfig = RetrievalConfig(), mode: str = "mc") -> tuple[Answer, RetrievalTrace]:
    _, trace = retrieve(question, store, embed, cfg)
    raw = generator.generate_answer(trace.prompt, trace.chunk_ids)
    trace.answer = raw
    return parse_answer(raw, mode), trace
