"""Dual-sentinel event segmentation.

A stream of frame embeddings is turned into adjacent-frame distances
``D[i] = 1 - cos(v_i, v_{i+1})``, smoothed with a small Gaussian, and scanned
for anchors (strict local maxima above the event threshold).  Each anchor is
grown backward and then forward until a run of ``patience_m`` quiet values
(below the background threshold), the series boundary, or the ``p_u`` budget
stops it.  Windows are widened to swallow intersecting speech islands, merged
where they overlap, split into pieces of at most ``p_u`` seconds, and the gaps
between them become static background chunks.  The output is a seamless
partition of ``[t_first, t_last]``.

Transition index ``i`` spans frames ``i`` and ``i + 1``; a window covering
transitions ``lo..hi`` spans ``[t[lo], t[hi + 1]]``.
"""
from __future__ import annotations

import bisect
import json
import math
from collections import deque
from dataclasses import dataclass, replace
from typing import Iterable, Iterator, Sequence

import numpy as np

from .core import ChunkKind, EventChunk, FrameEmbedding, SegConfig, SpeechIsland

__all__ = [
    "Anchor",
    "DistanceSeries",
    "EventWindow",
    "SegmentationError",
    "StreamingSegmenter",
    "adjacent_distance",
    "detect_anchors",
    "expand_window",
    "fixed_chunks",
    "gaussian_kernel",
    "gaussian_smooth",
    "merge_speech",
    "read_frames",
    "read_islands",
    "sample_times",
    "segment_series",
    "segment_stream",
    "write_chunks",
]


class SegmentationError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class DistanceSeries:
    """Per-transition values plus the timestamps of the frames they connect.

    ``times`` has one more entry than ``values``.
    """

    values: np.ndarray
    times: np.ndarray

    def __len__(self) -> int:
        return int(self.values.shape[0])

    def t_of(self, i: int) -> float:
        return float(self.times[i])

    def end_of(self, i: int) -> float:
        return float(self.times[i + 1])


@dataclass(frozen=True)
class Anchor:
    idx: int
    d: float


@dataclass(frozen=True)
class EventWindow:
    anchor_idx: int
    a: int  # transitions behind the anchor
    b: int  # transitions from the anchor forward, anchor included
    start: float
    end: float

    @property
    def lo(self) -> int:
        return self.anchor_idx - self.a

    @property
    def hi(self) -> int:
        return self.anchor_idx + self.b - 1

    @property
    def extent(self) -> int:
        return self.a + self.b


# ---------------------------------------------------------------------------
# Batch operations
# ---------------------------------------------------------------------------


def adjacent_distance(frames: Sequence[FrameEmbedding]) -> DistanceSeries:
    if len(frames) < 2:
        raise SegmentationError("adjacent_distance needs at least two frames")
    times = np.array([f.t for f in frames], dtype=np.float64)
    if np.any(np.diff(times) <= 0):
        bad = int(np.argmax(np.diff(times) <= 0)) + 1
        raise SegmentationError(f"frame timestamps must be strictly increasing (frame {bad})")
    dim = frames[0].dim
    values = np.empty(len(frames) - 1, dtype=np.float64)
    for i in range(len(frames) - 1):
        if frames[i + 1].dim != dim:
            raise SegmentationError(f"frame {i + 1} has dimension {frames[i + 1].dim}, expected {dim}")
        values[i] = 1.0 - float(np.dot(frames[i].v, frames[i + 1].v))
    return DistanceSeries(values, times)


def gaussian_kernel(sigma: float) -> np.ndarray:
    """Unit-sum discrete Gaussian with radius ``ceil(3 * sigma)``."""
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    if sigma == 0:
        return np.ones(1)
    radius = int(math.ceil(3.0 * sigma))
    k = np.arange(-radius, radius + 1, dtype=np.float64)
    w = np.exp(-(k * k) / (2.0 * sigma * sigma))
    return w / w.sum()


def _reflect(i: int, n: int) -> int:
    # mirror about the end samples without repeating them (d c b | a b c d | c b a)
    if n == 1:
        return 0
    period = 2 * (n - 1)
    i %= period
    return i if i < n else period - i


def gaussian_smooth(series, sigma: float):
    """Direct convolution with the kernel from :func:`gaussian_kernel`, reflect-padded.

    Accepts a :class:`DistanceSeries` (returns one) or a plain sequence
    (returns an ndarray).  Terms are accumulated left to right so the
    streaming segmenter reproduces these values bit-for-bit.
    """
    values = series.values if isinstance(series, DistanceSeries) else np.asarray(series, dtype=np.float64)
    n = values.shape[0]
    if n == 0:
        raise ValueError("cannot smooth an empty series")
    weights = gaussian_kernel(sigma)
    r = (weights.shape[0] - 1) // 2
    idx = np.arange(-r, n + r)
    padded = values[[_reflect(int(j), n) for j in idx]]
    acc = np.zeros(n, dtype=np.float64)
    for k in range(2 * r + 1):
        acc = acc + weights[k] * padded[k:k + n]
    if isinstance(series, DistanceSeries):
        return DistanceSeries(acc, series.times)
    return acc


def _values(smoothed) -> np.ndarray:
    return smoothed.values if isinstance(smoothed, DistanceSeries) else np.asarray(smoothed, dtype=np.float64)


def detect_anchors(smoothed, cfg: SegConfig) -> list[Anchor]:
    s = _values(smoothed)
    thr = cfg.evt_distance
    out = []
    for i in range(1, s.shape[0] - 1):
        if s[i] > thr and s[i] > s[i - 1] and s[i] > s[i + 1]:
            out.append(Anchor(i, float(s[i])))
    return out


def expand_window(anchor: Anchor, smoothed: DistanceSeries, cfg: SegConfig) -> EventWindow | None:
    """Grow ``anchor`` into an event window, or return None when it is too short.

    The backward walk runs first and may use the whole ``p_u`` budget; the
    forward walk gets what remains.  Quiet values at either end of the walk
    are trimmed, so the window always starts and ends on loud transitions.
    """
    s = _values(smoothed)
    n = s.shape[0]
    a = anchor.idx
    if not 0 <= a < n:
        raise IndexError(f"anchor {a} outside series of length {n}")
    thr = cfg.bg_distance
    m = cfg.patience_m
    cap = cfg.cap_frames

    lo, run = a, 0
    for j in range(a - 1, max(-1, a - cap), -1):
        if s[j] < thr:
            run += 1
            if run >= m:
                break
        else:
            run = 0
            lo = j

    budget = cap - 1 - (a - lo)
    hi, run = a, 0
    for j in range(a + 1, min(n - 1, a + budget) + 1):
        if s[j] < thr:
            run += 1
            if run >= m:
                break
        else:
            run = 0
            hi = j

    extent = hi - lo + 1
    if extent / cfg.source_fps <= cfg.p_l:
        return None
    times = smoothed.times if isinstance(smoothed, DistanceSeries) else np.arange(n + 1) / cfg.source_fps
    return EventWindow(a, a - lo, hi - a + 1, float(times[lo]), float(times[hi + 1]))


def _extend_span(start: float, end: float, islands: Sequence[SpeechIsland]) -> tuple[float, float]:
    changed = True
    while changed:
        changed = False
        for island in islands:
            if island.start <= end and island.end >= start and (island.start < start or island.end > end):
                start = min(start, island.start)
                end = max(end, island.end)
                changed = True
    return start, end


def merge_speech(window: EventWindow, islands: Sequence[SpeechIsland]) -> EventWindow:
    """Widen ``window`` over every intersecting speech island, to a fixpoint."""
    start, end = _extend_span(window.start, window.end, islands)
    return replace(window, start=start, end=end)


def sample_times(start: float, end: float, fps: float) -> tuple[float, ...]:
    count = max(0, int(math.ceil((end - start) * fps - 1e-9)))
    return tuple(t for t in (start + k / fps for k in range(count)) if t < end)


# ---------------------------------------------------------------------------
# Window assembly (shared by batch and streaming paths)
# ---------------------------------------------------------------------------


def _island_clusters(islands: Sequence[SpeechIsland]) -> list[tuple[float, float]]:
    clusters: list[list[float]] = []
    for island in sorted(islands, key=lambda x: (x.start, x.end)):
        if clusters and island.start <= clusters[-1][1]:
            clusters[-1][1] = max(clusters[-1][1], island.end)
        else:
            clusters.append([island.start, island.end])
    return [(a, b) for a, b in clusters]


class _ChunkAssembler:
    """Turns raw windows (arriving in start order) into partition chunks.

    Holds at most one pending merged window; everything else is emitted.
    """

    def __init__(self, cfg: SegConfig, islands: Sequence[SpeechIsland], t_first: float, id_prefix: str):
        self.cfg = cfg
        self.islands = sorted(islands, key=lambda x: (x.start, x.end))
        self._starts = [x.start for x in self.islands]
        clusters = _island_clusters(self.islands)
        self._cluster_starts = [c[0] for c in clusters]
        self._cluster_ends = [c[1] for c in clusters]
        self.t_first = t_first
        self.cursor = t_first
        self.pending: list[float] | None = None
        self.prefix = id_prefix
        self.count = 0

    def add(self, start: float, end: float) -> list[EventChunk]:
        start, end = _extend_span(start, end, self.islands)
        start = max(start, self.t_first)
        out = []
        if self.pending is not None and start < self.pending[1]:
            self.pending[0] = min(self.pending[0], start)
            self.pending[1] = max(self.pending[1], end)
        else:
            if self.pending is not None:
                out.extend(self._emit(*self.pending))
            self.pending = [start, end]
        return out

    def release(self, horizon: float) -> list[EventChunk]:
        """Emit the pending window if no window starting at or after ``horizon`` can reach it."""
        if self.pending is None:
            return []
        reach = horizon
        k = bisect.bisect_left(self._cluster_ends, horizon)
        if k < len(self._cluster_ends):
            reach = min(reach, self._cluster_starts[k])
        if reach >= self.pending[1]:
            out = self._emit(*self.pending)
            self.pending = None
            return out
        return []

    def close(self, t_last: float) -> list[EventChunk]:
        out = []
        if self.pending is not None:
            out.extend(self._emit(self.pending[0], min(self.pending[1], t_last)))
            self.pending = None
        if t_last > self.cursor:
            out.append(self._chunk(ChunkKind.STATIC, self.cursor, t_last, self._transcript(self.cursor, t_last)))
            self.cursor = t_last
        return out

    def _transcript(self, start: float, end: float) -> tuple[SpeechIsland, ...]:
        hi = bisect.bisect_left(self._starts, end)
        return tuple(x for x in self.islands[:hi] if x.end > start)

    def _chunk(self, kind: ChunkKind, start: float, end: float, transcript) -> EventChunk:
        fps = self.cfg.fps_dynamic if kind is ChunkKind.DYNAMIC else self.cfg.fps_static
        chunk = EventChunk(
            id=f"{self.prefix}{self.count:06d}",
            kind=kind,
            start=start,
            end=end,
            sampled_ts=sample_times(start, end, fps),
            transcript=transcript,
        )
        self.count += 1
        return chunk

    def _emit(self, start: float, end: float) -> list[EventChunk]:
        assert start >= self.cursor, "windows must arrive in order"
        out = []
        if start > self.cursor:
            out.append(self._chunk(ChunkKind.STATIC, self.cursor, start, self._transcript(self.cursor, start)))
        transcript = self._transcript(start, end)
        size = self.cfg.p_u
        pieces = max(1, int(math.ceil((end - start) / size - 1e-9)))
        for k in range(pieces):
            a = start + k * size
            b = end if k == pieces - 1 else start + (k + 1) * size
            out.append(self._chunk(ChunkKind.DYNAMIC, a, b, transcript))
        self.cursor = end
        return out


def segment_series(
    frames: Sequence[FrameEmbedding],
    islands: Sequence[SpeechIsland] = (),
    cfg: SegConfig = SegConfig(),
    id_prefix: str = "c",
) -> list[EventChunk]:
    """Segment an in-memory frame list by composing the batch operations."""
    frames = list(frames)
    if len(frames) < 2:
        return []
    dist = adjacent_distance(frames)
    smooth = gaussian_smooth(dist, cfg.sigma)
    asm = _ChunkAssembler(cfg, islands, frames[0].t, id_prefix)
    out: list[EventChunk] = []
    for anchor in detect_anchors(smooth, cfg):
        window = expand_window(anchor, smooth, cfg)
        if window is not None:
            out.extend(asm.add(window.start, window.end))
    out.extend(asm.close(frames[-1].t))
    return out


# ---------------------------------------------------------------------------
# Streaming
# ---------------------------------------------------------------------------


class _Probe:
    """Forward walk of one confirmed anchor, advanced as smoothed values arrive."""

    __slots__ = ("anchor", "lo", "limit", "j", "hi", "run", "done")

    def __init__(self, anchor: int, lo: int, limit: int):
        self.anchor = anchor
        self.lo = lo
        self.limit = limit
        self.j = anchor + 1
        self.hi = anchor
        self.run = 0
        self.done = False


# buffer record slots
_T0, _T1, _D, _S, _BACK = range(5)


class StreamingSegmenter:
    """Single-consumer stream transformer: push frames, receive finished chunks.

    Retained state is a sliding buffer of transition records (at most
    ``cfg.buffer_bound`` of them) plus O(1) scalars; chunks are returned as
    soon as no later frame can change them.  The emitted chunks are identical
    to :func:`segment_series` on the same input.
    """

    def __init__(self, cfg: SegConfig = SegConfig(), islands: Iterable[SpeechIsland] = (), id_prefix: str = "c"):
        self.cfg = cfg
        self._islands = sorted(islands, key=lambda x: (x.start, x.end))
        self._prefix = id_prefix
        self._w = [float(x) for x in gaussian_kernel(cfg.sigma)]
        self._r = (len(self._w) - 1) // 2
        self._cap = cfg.cap_frames
        self._thr_evt = cfg.evt_distance
        self._thr_bg = cfg.bg_distance
        self._m = cfg.patience_m

        self._buf: deque[list] = deque()
        self._base = 0          # transition index of _buf[0]
        self._n = 0             # transitions received
        self._n_smooth = 0      # smoothed values computed
        self._next_cand = 1     # next transition to test as an anchor
        self._run = 0           # current quiet run length
        self._run_end = -1      # last index closing a quiet run of length >= m
        self._probes: deque[_Probe] = deque()
        self._last: FrameEmbedding | None = None
        self._asm: _ChunkAssembler | None = None
        self._closed = False
        self.max_retained = 0
        self.chunks_emitted = 0

    @property
    def retained(self) -> int:
        return len(self._buf)

    def _rec(self, i: int) -> list:
        return self._buf[i - self._base]

    def push(self, frame: FrameEmbedding) -> list[EventChunk]:
        if self._closed:
            raise SegmentationError("segmenter already flushed")
        last = self._last
        if last is None:
            self._last = frame
            self._asm = _ChunkAssembler(self.cfg, self._islands, frame.t, self._prefix)
            return []
        if not frame.t > last.t:
            raise SegmentationError(f"timestamps must be strictly increasing: {frame.t} after {last.t}")
        if frame.dim != last.dim:
            raise SegmentationError(f"frame at t={frame.t} has dimension {frame.dim}, expected {last.dim}")
        self._buf.append([last.t, frame.t, 1.0 - float(np.dot(last.v, frame.v)), None, None])
        self._n += 1
        self._last = frame
        while self._n_smooth + self._r < self._n:
            self._smooth_next(final=False)
        out = self._advance(final=False)
        self._trim()
        return out

    def flush(self) -> list[EventChunk]:
        """Finish the stream: smooth the tail with reflection at the true end."""
        if self._closed:
            return []
        self._closed = True
        if self._asm is None:
            return []
        if self._n == 0:
            return []
        while self._n_smooth < self._n:
            self._smooth_next(final=True)
        out = self._advance(final=True)
        out.extend(self._asm.close(self._last.t))
        self.chunks_emitted += len(out)
        self._buf.clear()
        return out

    def _smooth_next(self, final: bool) -> None:
        i = self._n_smooth
        n = self._n
        r = self._r
        acc = 0.0
        for k in range(-r, r + 1):
            j = i + k
            if j < 0 or j >= n:
                j = _reflect(j, n)
            acc += self._w[k + r] * self._buf[j - self._base][_D]
        rec = self._buf[i - self._base]
        rec[_S] = acc
        rec[_BACK] = self._run_end + 1
        if acc < self._thr_bg:
            self._run += 1
            if self._run >= self._m:
                self._run_end = i
        else:
            self._run = 0
        self._n_smooth += 1

    def _advance(self, final: bool) -> list[EventChunk]:
        thr_bg = self._thr_bg
        while self._next_cand + 1 < self._n_smooth:
            i = self._next_cand
            s_prev = self._rec(i - 1)[_S]
            rec = self._rec(i)
            s_i = rec[_S]
            if s_i > self._thr_evt and s_i > s_prev and s_i > self._rec(i + 1)[_S]:
                lo = max(rec[_BACK], i - self._cap + 1, 0)
                while self._rec(lo)[_S] < thr_bg:
                    lo += 1
                self._probes.append(_Probe(i, lo, i + self._cap - 1 - (i - lo)))
            self._next_cand += 1

        for probe in self._probes:
            if probe.done:
                continue
            while probe.j <= probe.limit and probe.j < self._n_smooth:
                if self._rec(probe.j)[_S] < thr_bg:
                    probe.run += 1
                    if probe.run >= self._m:
                        probe.done = True
                        break
                else:
                    probe.run = 0
                    probe.hi = probe.j
                probe.j += 1
            if probe.j > probe.limit or (final and probe.j >= self._n):
                probe.done = True

        out: list[EventChunk] = []
        asm = self._asm
        while self._probes and self._probes[0].done:
            probe = self._probes.popleft()
            extent = probe.hi - probe.lo + 1
            if extent / self.cfg.source_fps <= self.cfg.p_l:
                continue
            out.extend(asm.add(self._rec(probe.lo)[_T0], self._rec(probe.hi)[_T1]))
        if not final:
            horizon = self._horizon()
            out.extend(asm.release(self._rec(horizon)[_T0]))
        self.chunks_emitted += len(out)
        return out

    def _horizon(self) -> int:
        # smallest transition index any future window could start at
        h = max(0, self._next_cand - self._cap + 1)
        if self._probes:
            h = min(h, self._probes[0].lo)
        return h

    def _trim(self) -> None:
        front = min(self._horizon(), self._next_cand - 1, self._n_smooth - self._r)
        while self._base < front:
            self._buf.popleft()
            self._base += 1
        if len(self._buf) > self.max_retained:
            self.max_retained = len(self._buf)


def segment_stream(
    frames: Iterable[FrameEmbedding],
    islands: Iterable[SpeechIsland] = (),
    cfg: SegConfig = SegConfig(),
    id_prefix: str = "c",
) -> Iterator[EventChunk]:
    seg = StreamingSegmenter(cfg, islands, id_prefix)
    for frame in frames:
        yield from seg.push(frame)
    yield from seg.flush()


def fixed_chunks(
    frames: Iterable[FrameEmbedding],
    islands: Iterable[SpeechIsland] = (),
    length: float = 12.0,
    cfg: SegConfig = SegConfig(),
    id_prefix: str = "fixed-",
) -> Iterator[EventChunk]:
    """Mechanical fixed-length chunking with no perception, for ablations."""
    if length <= 0:
        raise ValueError("chunk length must be positive")
    islands = sorted(islands, key=lambda x: (x.start, x.end))
    first = last = None
    for frame in frames:
        if last is not None and not frame.t > last:
            raise SegmentationError(f"timestamps must be strictly increasing: {frame.t} after {last}")
        if first is None:
            first = frame.t
        last = frame.t
    if first is None or last == first:
        return
    pieces = max(1, int(math.ceil((last - first) / length - 1e-9)))
    for k in range(pieces):
        a = first + k * length
        b = last if k == pieces - 1 else first + (k + 1) * length
        yield EventChunk(
            id=f"{id_prefix}{k:06d}",
            kind=ChunkKind.DYNAMIC,
            start=a,
            end=b,
            sampled_ts=sample_times(a, b, cfg.fps_dynamic),
            transcript=tuple(x for x in islands if x.start < b and x.end > a),
        )


# ---------------------------------------------------------------------------
# JSON-lines I/O
# ---------------------------------------------------------------------------


def read_frames(path) -> Iterator[FrameEmbedding]:
    """Yield frames from ``{"t": ..., "v": [...]}`` lines; errors name the line."""
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                yield FrameEmbedding(obj["t"], obj["v"])
            except (ValueError, KeyError, TypeError) as exc:
                raise SegmentationError(f"{path}:{lineno}: bad frame record ({exc})") from None


def read_islands(path) -> list[SpeechIsland]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                out.append(SpeechIsland.from_dict(json.loads(line)))
            except (ValueError, KeyError, TypeError) as exc:
                raise SegmentationError(f"{path}:{lineno}: bad speech record ({exc})") from None
    out.sort(key=lambda x: (x.start, x.end))
    return out


def write_chunks(chunks: Iterable[EventChunk], fh) -> int:
    count = 0
    for chunk in chunks:
        fh.write(json.dumps(chunk.to_dict(), ensure_ascii=False) + "\n")
        count += 1
    return count
