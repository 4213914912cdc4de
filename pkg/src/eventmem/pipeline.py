"""End-to-end ingest: segment a stream, extract triplets per chunk, commit in order."""
from __future__ import annotations

import logging
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Iterable

from .abstraction import ExtractionError, make_extraction_request, parse_extraction, triplet_timestamps
from .core import ChunkKind, EventChunk, FrameEmbedding, SegConfig, SpeechIsland
from .memory import EventGraphStore
from .sentinel import fixed_chunks, segment_stream

log = logging.getLogger(__name__)

__all__ = ["IngestReport", "ingest", "ingest_chunks", "iter_chunks"]


@dataclass
class IngestReport:
    chunks: int = 0
    dynamic: int = 0
    static: int = 0
    extracted: int = 0
    triplets: int = 0
    rejected_triplets: int = 0
    warnings: int = 0
    failed_chunks: list[tuple[str, str]] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "chunks": self.chunks,
            "dynamic": self.dynamic,
            "static": self.static,
            "extracted": self.extracted,
            "triplets": self.triplets,
            "rejected_triplets": self.rejected_triplets,
            "warnings": self.warnings,
            "failed_chunks": [{"chunk_id": c, "error": e} for c, e in self.failed_chunks],
        }


def iter_chunks(frames: Iterable[FrameEmbedding], islands: Iterable[SpeechIsland] = (),
                cfg: SegConfig = SegConfig(), fixed_chunk: float | None = None) -> Iterable[EventChunk]:
    """Sentinel segmentation, or fixed-length pieces when ``fixed_chunk`` is set."""
    if fixed_chunk is not None:
        return fixed_chunks(frames, islands, fixed_chunk, cfg)
    return segment_stream(frames, islands, cfg)


def _extract(extractor, chunk: EventChunk):
    raw = extractor.extract_triplets(make_extraction_request(chunk))
    return triplet_timestamps(parse_extraction(raw, chunk), chunk)


def ingest(
    frames: Iterable[FrameEmbedding],
    islands: Iterable[SpeechIsland],
    store: EventGraphStore,
    extractor,
    embed,
    seg_cfg: SegConfig = SegConfig(),
    fixed_chunk: float | None = None,
    include_static: bool = False,
    workers: int = 1,
    strict: bool = False,
) -> IngestReport:
    """Stream frames through segmentation, extraction and memory."""
    chunks = iter_chunks(frames, list(islands), seg_cfg, fixed_chunk)
    return ingest_chunks(chunks, store, extractor, embed, include_static, workers, strict)


def ingest_chunks(
    chunks: Iterable[EventChunk],
    store: EventGraphStore,
    extractor,
    embed,
    include_static: bool = False,
    workers: int = 1,
    strict: bool = False,
) -> IngestReport:
    """Extract and commit already-segmented chunks.

    Extraction may run on ``workers`` threads, but results are committed
    strictly in chunk order so the store is a pure function of the input.
    Only dynamic chunks are sent to the extractor unless ``include_static``.
    A reply that cannot be parsed is recorded in the report and skipped, or
    raised when ``strict``; backend errors always propagate.
    """
    report = IngestReport()

    def commit(chunk: EventChunk, result) -> None:
        if isinstance(result, ExtractionError):
            if strict:
                raise result
            log.warning("chunk %s: %s", chunk.id, result)
            report.failed_chunks.append((chunk.id, str(result)))
            store.register_chunk(chunk)
            return
        if result is None:
            store.register_chunk(chunk)
            return
        report.extracted += 1
        report.triplets += len(result.triplets)
        report.rejected_triplets += len(result.errors)
        report.warnings += len(result.warnings)
        store.commit_chunk(chunk, result.triplets, embed)

    def job(chunk: EventChunk):
        if chunk.kind is ChunkKind.STATIC and not include_static:
            return None
        try:
            return _extract(extractor, chunk)
        except ExtractionError as exc:
            return exc

    pool = ThreadPoolExecutor(max_workers=workers) if workers > 1 else None
    pending: deque = deque()
    try:
        for chunk in chunks:
            report.chunks += 1
            if chunk.kind is ChunkKind.STATIC:
                report.static += 1
            else:
                report.dynamic += 1
            if pool is None:
                commit(chunk, job(chunk))
                continue
            pending.append((chunk, pool.submit(job, chunk)))
            # bounded in-flight work keeps memory flat on long streams
            while len(pending) > 2 * workers:
                c, fut = pending.popleft()
                commit(c, fut.result())
        while pending:
            c, fut = pending.popleft()
            commit(c, fut.result())
    finally:
        if pool is not None:
            for _, fut in pending:
                fut.cancel()
            pool.shutdown(wait=True)
    return report
