"""Chunk -> State-Event-State triplets: prompt construction and reply parsing."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace

from .core import EventChunk, SESTriplet, format_seconds

__all__ = [
    "EXTRACTION_SYSTEM_PROMPT",
    "EXTRACTION_USER_TEMPLATE",
    "ExtractionError",
    "ExtractionRequest",
    "ExtractionResult",
    "build_extraction_prompt",
    "extraction_messages",
    "make_extraction_request",
    "parse_extraction",
    "triplet_timestamps",
]

EXTRACTION_SYSTEM_PROMPT = """\
You are a state-of-the-art Video-to-Graph Parser designed for high-fidelity Event-Causal Reasoning.
[Strict Graph Construction Rules]:
1. Task-Level Physical Actions (The 'Goldilocks' Granularity): Describe specific, observable physical tasks and object interactions...
 - DO NOT use vague umbrella terms (e.g., 'performing').
 - DO NOT over-decompose into meaningless joint kinematics.
2. Visual Attribute Injection (CRITICAL): NEVER use generic IDs or pronouns. You MUST refer to entities by distinct visual attributes (e.g., write 'The man in the black t-shirt', NOT 'E1').
3. Micro-Detail Exhaustion: Capture secondary background events, holding props, and screen text.
4. Direct Visual Evidence (CRITICAL): Preserve only directly visible evidence. If text is blurry or uncertain, output an empty string.
5. Strict Causality: An 'Event' is a directed edge bridging a 'Pre-State' and 'Post-State'.
6. Output Format: Output ONLY pure JSON."""

EXTRACTION_USER_TEMPLATE = """\
Target Timestamp: {start_time} - {end_time}.
{audio_context}
Task: Deconstruct this clip into a chronological causal graph.
Step 1: Inventory ALL interacting entities, detailing visual attributes.
Step 2: Map the specific, task-level physical actions.
Step 3: Preserve direct visual evidence useful for downstream QA.
Step 4: If any text is unreadable, write an empty string.
[Mandatory JSON Schema]: {scene_inventory: [...], events: [...]}"""


class ExtractionError(ValueError):
    """Reply could not be used at all; ``kind`` is ``Unparsable`` or ``SchemaViolation``."""

    def __init__(self, kind: str, message: str):
        super().__init__(f"{kind}: {message}")
        self.kind = kind


@dataclass(frozen=True)
class ExtractionRequest:
    chunk: EventChunk
    audio_context: str
    prompt: str


@dataclass(frozen=True)
class ExtractionResult:
    scene_inventory: tuple[str, ...]
    triplets: tuple[SESTriplet, ...]
    warnings: tuple[str, ...] = field(default=(), compare=False)
    errors: tuple[str, ...] = field(default=(), compare=False)

    def to_json(self) -> str:
        events = []
        for t in self.triplets:
            events.append({
                "temporal_order": t.temporal_order,
                "pre_state": t.pre_state,
                "event": t.event,
                "post_state": t.post_state,
                "entities": list(t.entities),
                "location": t.location,
                "t_start": t.t_start,
                "t_end": t.t_end,
            })
        return json.dumps({"scene_inventory": list(self.scene_inventory), "events": events}, ensure_ascii=False)


def _render_user(chunk: EventChunk) -> str:
    # placeholders are substituted with replace(): the schema line holds literal braces
    return (
        EXTRACTION_USER_TEMPLATE
        .replace("{start_time}", format_seconds(chunk.start))
        .replace("{end_time}", format_seconds(chunk.end))
        .replace("{audio_context}", chunk.audio_context)
    )


def extraction_messages(chunk: EventChunk) -> list[dict]:
    """System/user message pair for chat-style backends."""
    return [
        {"role": "system", "content": EXTRACTION_SYSTEM_PROMPT},
        {"role": "user", "content": _render_user(chunk)},
    ]


def build_extraction_prompt(chunk: EventChunk) -> str:
    return (
        "[SYSTEM PROMPT]\n"
        + EXTRACTION_SYSTEM_PROMPT
        + "\n\n[USER PROMPT TEMPLATE]\n"
        + _render_user(chunk)
    )


def make_extraction_request(chunk: EventChunk) -> ExtractionRequest:
    return ExtractionRequest(chunk, chunk.audio_context, build_extraction_prompt(chunk))


def _as_order(value) -> int | None:
    if isinstance(value, bool):
        return None
    if isinstance(value, int):
        return value
    if isinstance(value, float) and math.isfinite(value) and value.is_integer():
        return int(value)
    if isinstance(value, str) and value.strip().isdigit():
        return int(value.strip())
    return None


def _as_time(value) -> float | None:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        return None
    value = float(value)
    return value if math.isfinite(value) else None


def _as_text(value) -> str:
    return value.strip() if isinstance(value, str) else ""


def parse_extraction(raw: str, chunk: EventChunk) -> ExtractionResult:
    """Parse a backend reply into triplets for ``chunk``.

    Prose and code fences around the JSON object are ignored.  Triplets with
    an empty pre-state, event or post-state are dropped and reported in
    ``errors``; entities missing from the scene inventory only produce a
    warning.  Surviving triplets are re-ranked 1..n by their stated
    ``temporal_order`` (reply order breaks ties) and explicit times are
    clamped into the chunk.
    """
    if not isinstance(raw, str):
        raise ExtractionError("Unparsable", "reply is not text")
    left, right = raw.find("{"), raw.rfind("}")
    if left < 0 or right < left:
        raise ExtractionError("Unparsable", "no JSON object in reply")
    try:
        data = json.loads(raw[left:right + 1])
    except (ValueError, RecursionError) as exc:
        raise ExtractionError("Unparsable", str(exc)[:200]) from None
    if not isinstance(data, dict):
        raise ExtractionError("SchemaViolation", "top level is not an object")
    if "events" not in data:
        raise ExtractionError("SchemaViolation", "missing 'events'")
    events = data["events"]
    if not isinstance(events, list):
        raise ExtractionError("SchemaViolation", "'events' is not a list")

    warnings: list[str] = []
    errors: list[str] = []
    raw_inventory = data.get("scene_inventory", [])
    if not isinstance(raw_inventory, list):
        warnings.append("scene_inventory is not a list; ignored")
        raw_inventory = []
    inventory = tuple(x.strip() for x in raw_inventory if isinstance(x, str) and x.strip())
    known = set(inventory)

    staged = []
    for pos, ev in enumerate(events):
        if not isinstance(ev, dict):
            errors.append(f"event {pos}: not an object")
            continue
        pre, act, post = _as_text(ev.get("pre_state")), _as_text(ev.get("event")), _as_text(ev.get("post_state"))
        missing = [name for name, v in (("pre_state", pre), ("event", act), ("post_state", post)) if not v]
        if missing:
            errors.append(f"event {pos}: empty {', '.join(missing)}")
            continue
        ents = ev.get("entities", [])
        if isinstance(ents, str):
            ents = [ents]
        if not isinstance(ents, list):
            warnings.append(f"event {pos}: entities is not a list; ignored")
            ents = []
        entities = []
        for e in ents:
            if isinstance(e, str) and e.strip():
                name = e.strip()
                if name not in entities:
                    entities.append(name)
                if name not in known:
                    warnings.append(f"event {pos}: entity {name!r} not in scene_inventory")
        order = _as_order(ev.get("temporal_order"))
        t0, t1 = _as_time(ev.get("t_start")), _as_time(ev.get("t_end"))
        if t0 is not None and t1 is not None:
            t0 = min(max(t0, chunk.start), chunk.end)
            t1 = min(max(t1, chunk.start), chunk.end)
            if t0 > t1:
                t0, t1 = t1, t0
        else:
            t0 = t1 = None
        staged.append((order if order is not None else math.inf, pos, pre, act, post,
                       tuple(entities), _as_text(ev.get("location")), t0, t1))

    seen_orders = [s[0] for s in staged if s[0] != math.inf]
    if len(seen_orders) != len(set(seen_orders)):
        warnings.append("duplicate temporal_order values; ranked by reply order")
    staged.sort(key=lambda s: (s[0], s[1]))
    triplets = tuple(
        SESTriplet(rank, pre, act, post, ents, loc, chunk.id, t0, t1)
        for rank, (_, _, pre, act, post, ents, loc, t0, t1) in enumerate(staged, 1)
    )
    return ExtractionResult(inventory, triplets, tuple(warnings), tuple(errors))


def triplet_timestamps(result: ExtractionResult, chunk: EventChunk) -> ExtractionResult:
    """Give untimed triplets even slices of the chunk, in temporal order.

    Triplet ``k`` of ``n`` owns slot ``k``; explicitly timed triplets keep
    their times.  Start times are then made non-decreasing.
    """
    n = len(result.triplets)
    if n == 0:
        return result
    width = (chunk.end - chunk.start) / n
    out = []
    floor = chunk.start
    for k, t in enumerate(result.triplets):
        if t.timed:
            t0, t1 = t.t_start, t.t_end
        else:
            t0 = chunk.start + k * width
            t1 = chunk.end if k == n - 1 else chunk.start + (k + 1) * width
        t0 = max(t0, floor)
        t1 = max(t1, t0)
        floor = t0
        out.append(replace(t, t_start=t0, t_end=t1))
    return replace(result, triplets=tuple(out))
