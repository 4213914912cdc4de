"""Dual-store Event Knowledge Graph.

A single :class:`EventGraphStore` keeps an exact cosine index over node
embeddings next to a typed property graph.  Triplets are committed one at a
time; entity names are merged online against canonical Entity nodes, and a
new pre-state that matches an earlier post-state is fused into it, which
links the two events with ``TEMPORAL_NEXT``.

On every fusion the earlier node survives with its id, text and embedding;
only time spans and source chunks are unioned.
"""
from __future__ import annotations

import json
import os
import threading
from collections import Counter, deque
from dataclasses import asdict, dataclass, field
from enum import Enum
from pathlib import Path
from typing import Callable, Iterable

import numpy as np

from .core import TIME_EPS, EventChunk, MemConfig, SESTriplet, normalize

__all__ = [
    "DimensionMismatch",
    "EKGEdge",
    "EKGNode",
    "EventGraphStore",
    "NodeKind",
    "ReadOnlyStoreError",
    "Rel",
    "StoreFormatError",
    "UnknownNodeError",
    "VectorIndex",
]

Embed = Callable[[str], np.ndarray]

FORMAT_VERSION = 1


class NodeKind(str, Enum):
    STATE = "State"
    EVENT = "Event"
    ENTITY = "Entity"


class Rel(str, Enum):
    PRECONDITION_OF = "PRECONDITION_OF"
    RESULTS_IN = "RESULTS_IN"
    TEMPORAL_NEXT = "TEMPORAL_NEXT"
    INVOLVES = "INVOLVES"


# (src kind, dst kind) each relation may connect
EDGE_SCHEMA = {
    Rel.PRECONDITION_OF: (NodeKind.STATE, NodeKind.EVENT),
    Rel.RESULTS_IN: (NodeKind.EVENT, NodeKind.STATE),
    Rel.TEMPORAL_NEXT: (NodeKind.EVENT, NodeKind.EVENT),
    Rel.INVOLVES: (NodeKind.EVENT, NodeKind.ENTITY),
}

_PREFIX = {NodeKind.STATE: "state", NodeKind.EVENT: "event", NodeKind.ENTITY: "entity"}


class DimensionMismatch(ValueError):
    pass


class ReadOnlyStoreError(RuntimeError):
    pass


class StoreFormatError(ValueError):
    pass


class UnknownNodeError(KeyError):
    pass


@dataclass(eq=False)
class EKGNode:
    id: str
    kind: NodeKind
    text: str
    embedding: np.ndarray
    t_start: float
    t_end: float
    source_chunks: list[str]
    counter: int
    attrs: dict = field(default_factory=dict)

    def to_record(self) -> dict:
        return {
            "id": self.id,
            "kind": self.kind.value,
            "text": self.text,
            "t_start": self.t_start,
            "t_end": self.t_end,
            "source_chunks": list(self.source_chunks),
            "counter": self.counter,
            "attrs": self.attrs,
        }

    def __eq__(self, other):
        if not isinstance(other, EKGNode):
            return NotImplemented
        return self.to_record() == other.to_record() and np.array_equal(self.embedding, other.embedding)


@dataclass
class EKGEdge:
    src: str
    dst: str
    rel: Rel
    provenance: dict = field(default_factory=dict)

    @property
    def key(self) -> tuple[str, str, Rel]:
        return (self.src, self.dst, self.rel)

    def to_record(self) -> dict:
        return {"src": self.src, "dst": self.dst, "rel": self.rel.value, "provenance": self.provenance}


class VectorIndex:
    """Exact cosine search by full scan over unit vectors."""

    def __init__(self, dim: int):
        self.dim = dim
        self._ids: list[str] = []
        self._rows: dict[str, int] = {}
        self._order: list[int] = []  # tie-break key per row
        self._mat = np.zeros((16, dim))

    def __len__(self) -> int:
        return len(self._ids)

    def __contains__(self, node_id: str) -> bool:
        return node_id in self._rows

    def add(self, node_id: str, vec: np.ndarray, order: int) -> None:
        if vec.shape != (self.dim,):
            raise DimensionMismatch(f"vector of shape {vec.shape} in a {self.dim}-d index")
        if node_id in self._rows:
            raise ValueError(f"duplicate id {node_id!r} in vector index")
        n = len(self._ids)
        if n == self._mat.shape[0]:
            grown = np.zeros((2 * n, self.dim))
            grown[:n] = self._mat
            self._mat = grown
        self._mat[n] = vec
        self._rows[node_id] = n
        self._ids.append(node_id)
        self._order.append(order)

    def remove(self, node_id: str) -> None:
        row = self._rows.pop(node_id)
        last = len(self._ids) - 1
        if row != last:
            moved = self._ids[last]
            self._mat[row] = self._mat[last]
            self._ids[row] = moved
            self._order[row] = self._order[last]
            self._rows[moved] = row
        self._ids.pop()
        self._order.pop()

    def similarities(self, query: np.ndarray) -> tuple[list[str], np.ndarray, list[int]]:
        n = len(self._ids)
        return self._ids, self._mat[:n] @ query, self._order

    def search(self, query: np.ndarray, k: int) -> list[tuple[str, float]]:
        """Top ``k`` by cosine, descending; equal scores go to the older entry."""
        if k < 1:
            raise ValueError("k must be >= 1")
        n = len(self._ids)
        if n == 0:
            return []
        sims = self._mat[:n] @ query
        order = np.lexsort((np.asarray(self._order), -sims))[:k]
        return [(self._ids[i], float(sims[i])) for i in order]


def _dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, ensure_ascii=False, separators=(",", ":"), allow_nan=False)


class EventGraphStore:
    """Vector index + typed graph with online merging.

    Single writer, many readers: every public method holds the store lock,
    so a reader never sees a half-committed triplet.
    """

    def __init__(self, cfg: MemConfig = MemConfig(), read_only: bool = False):
        self.cfg = cfg
        self.dim = cfg.embed_dim
        self.read_only = read_only
        self.nodes: dict[str, EKGNode] = {}
        self.edges: list[EKGEdge] = []
        self.chunks: list[dict] = []
        self.counter = 0
        self._edge_keys: set[tuple[str, str, Rel]] = set()
        self._adj: dict[str, set[str]] = {}
        self._index = VectorIndex(self.dim)
        self._entities = VectorIndex(self.dim)
        self._posts = VectorIndex(self.dim)     # State nodes produced by an event
        self._producer: dict[str, str] = {}     # post-state id -> event id
        self._lock = threading.RLock()

    # -- basic access --------------------------------------------------------

    def __len__(self) -> int:
        return len(self.nodes)

    def node(self, node_id: str) -> EKGNode:
        try:
            return self.nodes[node_id]
        except KeyError:
            raise UnknownNodeError(node_id) from None

    def edges_by_rel(self, rel: Rel) -> list[EKGEdge]:
        return [e for e in self.edges if e.rel is rel]

    def _check_writable(self) -> None:
        if self.read_only:
            raise ReadOnlyStoreError("store was opened read-only")

    def _vector(self, embed: Embed, text: str) -> np.ndarray:
        vec = np.asarray(embed(text), dtype=np.float64)
        if vec.shape != (self.dim,):
            raise DimensionMismatch(f"embedder returned shape {vec.shape}, store dimension is {self.dim}")
        return normalize(vec)

    def _add_node(self, kind: NodeKind, text: str, vec: np.ndarray, t0: float, t1: float,
                  chunk_id: str, attrs: dict | None = None) -> EKGNode:
        self.counter += 1
        node = EKGNode(f"{_PREFIX[kind]}-{self.counter:06d}", kind, text, vec, float(t0), float(t1),
                       [chunk_id] if chunk_id else [], self.counter, dict(attrs or {}))
        self.nodes[node.id] = node
        self._adj[node.id] = set()
        self._index.add(node.id, vec, node.counter)
        if kind is NodeKind.ENTITY:
            self._entities.add(node.id, vec, node.counter)
        return node

    def _add_edge(self, src: str, dst: str, rel: Rel, provenance: dict | None = None) -> EKGEdge | None:
        key = (src, dst, rel)
        if key in self._edge_keys:
            return None
        edge = EKGEdge(src, dst, rel, dict(provenance or {}))
        self.edges.append(edge)
        self._edge_keys.add(key)
        self._adj[src].add(dst)
        self._adj[dst].add(src)
        return edge

    @staticmethod
    def _absorb(survivor: EKGNode, other: EKGNode) -> None:
        survivor.t_start = min(survivor.t_start, other.t_start)
        survivor.t_end = max(survivor.t_end, other.t_end)
        for c in other.source_chunks:
            if c not in survivor.source_chunks:
                survivor.source_chunks.append(c)

    # -- writes --------------------------------------------------------------

    def register_chunk(self, chunk: EventChunk) -> None:
        with self._lock:
            self._check_writable()
            self.chunks.append({"id": chunk.id, "kind": chunk.kind.value, "start": chunk.start, "end": chunk.end})

    def register_entity(self, name: str, embed: Embed, t0: float = 0.0, t1: float = 0.0, chunk_id: str = "") -> str:
        """Return the canonical Entity node for ``name``, creating it if nothing is close enough."""
        if not name:
            raise ValueError("entity name must be non-empty")
        with self._lock:
            self._check_writable()
            return self._register_entity_vec(name, self._vector(embed, name), t0, t1, chunk_id)

    def _register_entity_vec(self, name: str, vec: np.ndarray, t0: float, t1: float, chunk_id: str) -> str:
        ids, sims, order = self._entities.similarities(vec)
        best = None
        if ids:
            top = float(sims.max())
            if top > self.cfg.gamma_ent:
                best = min((order[i], ids[i]) for i in np.flatnonzero(sims == top))[1]
            max_sim = top
        else:
            max_sim = None
        if best is not None:
            node = self.nodes[best]
            self._absorb(node, EKGNode("", NodeKind.ENTITY, name, vec, t0, t1,
                                       [chunk_id] if chunk_id else [], 0))
            aliases = node.attrs.setdefault("aliases", [])
            if name != node.text and name not in aliases:
                aliases.append(name)
            return best
        node = self._add_node(NodeKind.ENTITY, name, vec, t0, t1, chunk_id,
                              {"max_sim_at_creation": max_sim})
        return node.id

    def upsert_triplet(self, triplet: SESTriplet, embed: Embed) -> tuple[str, str, str]:
        """Commit one triplet; returns the (pre-state, event, post-state) ids after fusion."""
        if not triplet.timed:
            raise ValueError("triplet needs t_start/t_end before it can be committed")
        with self._lock:
            self._check_writable()
            # embed everything first so a failing embedder leaves the store untouched
            v_pre = self._vector(embed, triplet.pre_state)
            v_evt = self._vector(embed, triplet.event)
            v_post = self._vector(embed, triplet.post_state)
            ent_vecs = [self._vector(embed, e) for e in triplet.entities]

            t0, t1, cid = triplet.t_start, triplet.t_end, triplet.chunk_id
            pre = self._add_node(NodeKind.STATE, triplet.pre_state, v_pre, t0, t0, cid, {"role": "pre"})
            evt = self._add_node(NodeKind.EVENT, triplet.event, v_evt, t0, t1, cid, {
                "location": triplet.location,
                "entities": list(triplet.entities),
                "temporal_order": triplet.temporal_order,
            })
            post = self._add_node(NodeKind.STATE, triplet.post_state, v_post, t1, t1, cid, {"role": "post"})
            self._add_edge(pre.id, evt.id, Rel.PRECONDITION_OF)
            self._add_edge(evt.id, post.id, Rel.RESULTS_IN)
            for name, vec in zip(triplet.entities, ent_vecs):
                ent = self._register_entity_vec(name, vec, t0, t1, cid)
                self._add_edge(evt.id, ent, Rel.INVOLVES)

            pre_id = pre.id
            link = self.link_state_continuity(pre.id)
            if link is not None:
                pre_id = link.provenance["post_state"]
            self._posts.add(post.id, post.embedding, post.counter)
            self._producer[post.id] = evt.id
            return pre_id, evt.id, post.id

    def link_state_continuity(self, new_pre_id: str) -> EKGEdge | None:
        """Fuse a fresh pre-state into the nearest earlier matching post-state.

        Candidates are post-states with cosine above ``gamma_evt`` whose
        producing event ends no later than the new state's ``t_start``
        (within ``TIME_EPS``).  The latest-ending candidate wins, ties going to the
        most recent insertion.  Returns the new ``TEMPORAL_NEXT`` edge from
        the candidate's producing event to the event the pre-state precedes.
        """
        with self._lock:
            self._check_writable()
            pre = self.node(new_pre_id)
            if pre.kind is not NodeKind.STATE:
                raise ValueError(f"{new_pre_id} is not a State node")
            ids, sims, order = self._posts.similarities(pre.embedding)
            best = None
            for i in np.flatnonzero(sims > self.cfg.gamma_evt):
                cand = self.nodes[ids[i]]
                # a survivor's own span widens as it absorbs later states, so
                # recency is measured by when its producing event ended
                produced = self.nodes[self._producer[cand.id]].t_end
                if produced > pre.t_start + TIME_EPS:
                    continue
                key = (produced, cand.counter)
                if best is None or key > best[0]:
                    best = (key, cand, float(sims[i]))
            if best is None:
                return None
            _, survivor, sim = best

            followers = [e.dst for e in self.edges if e.src == pre.id and e.rel is Rel.PRECONDITION_OF]
            # move the fresh node's edges onto the survivor, then drop it
            kept = []
            for e in self.edges:
                if pre.id not in (e.src, e.dst):
                    kept.append(e)
                    continue
                self._edge_keys.discard(e.key)
                self._adj[e.src].discard(e.dst)
                self._adj[e.dst].discard(e.src)
                e.src = survivor.id if e.src == pre.id else e.src
                e.dst = survivor.id if e.dst == pre.id else e.dst
                if e.key in self._edge_keys:
                    continue
                self._edge_keys.add(e.key)
                self._adj[e.src].add(e.dst)
                self._adj[e.dst].add(e.src)
                kept.append(e)
            self.edges = kept
            self._absorb(survivor, pre)
            del self.nodes[pre.id]
            del self._adj[pre.id]
            self._index.remove(pre.id)

            link = None
            src_event = self._producer[survivor.id]
            for dst_event in followers:
                link = self._add_edge(src_event, dst_event, Rel.TEMPORAL_NEXT, {
                    "similarity": sim,
                    "gamma_evt": self.cfg.gamma_evt,
                    "post_state": survivor.id,
                    "pre_text": pre.text,
                }) or link
            return link

    def commit_chunk(self, chunk: EventChunk, triplets: Iterable[SESTriplet], embed: Embed) -> list[tuple[str, str, str]]:
        with self._lock:
            self.register_chunk(chunk)
            return [self.upsert_triplet(t, embed) for t in triplets]

    # -- reads ---------------------------------------------------------------

    def search(self, query_vec, k: int) -> list[tuple[str, float]]:
        with self._lock:
            q = normalize(query_vec)
            if q.shape != (self.dim,):
                raise DimensionMismatch(f"query has shape {q.shape}, store dimension is {self.dim}")
            return self._index.search(q, k)

    def similarities(self, query_vec) -> list[tuple[str, float]]:
        """Cosine of ``query_vec`` against every node, in no particular order."""
        with self._lock:
            q = normalize(query_vec)
            if q.shape != (self.dim,):
                raise DimensionMismatch(f"query has shape {q.shape}, store dimension is {self.dim}")
            ids, sims, _ = self._index.similarities(q)
            return [(ids[i], float(sims[i])) for i in range(len(ids))]

    def neighbors_within(self, anchor_ids: Iterable[str], n_hops: int) -> set[str]:
        """All nodes within ``n_hops`` undirected edges of any anchor, anchors included."""
        if n_hops < 0:
            raise ValueError("n_hops must be >= 0")
        with self._lock:
            seen = set()
            frontier = deque()
            for a in anchor_ids:
                if a not in self.nodes:
                    raise UnknownNodeError(a)
                if a not in seen:
                    seen.add(a)
                    frontier.append((a, 0))
            while frontier:
                node, depth = frontier.popleft()
                if depth == n_hops:
                    continue
                for nb in self._adj[node]:
                    if nb not in seen:
                        seen.add(nb)
                        frontier.append((nb, depth + 1))
            return seen

    def check_integrity(self) -> list[str]:
        """Return every violated structural invariant (empty when sound)."""
        problems = []
        keys = set()
        for e in self.edges:
            if e.src not in self.nodes or e.dst not in self.nodes:
                problems.append(f"dangling edge {e.key}")
                continue
            want = EDGE_SCHEMA[e.rel]
            got = (self.nodes[e.src].kind, self.nodes[e.dst].kind)
            if got != want:
                problems.append(f"edge {e.key} connects {got[0].value}->{got[1].value}")
            if e.key in keys:
                problems.append(f"duplicate edge {e.key}")
            keys.add(e.key)
            if e.rel is Rel.TEMPORAL_NEXT and self.nodes[e.src].t_end > self.nodes[e.dst].t_start + TIME_EPS:
                problems.append(f"TEMPORAL_NEXT {e.key} goes backward in time")
        if len(self._index) != len(self.nodes) or any(nid not in self._index for nid in self.nodes):
            problems.append("vector index out of sync with nodes")
        for node in self.nodes.values():
            if node.t_start > node.t_end:
                problems.append(f"{node.id} has t_start > t_end")
            if not node.text:
                problems.append(f"{node.id} has empty text")
        return problems

    def stats(self) -> dict:
        with self._lock:
            by_kind = Counter(n.kind.value for n in self.nodes.values())
            by_rel = Counter(e.rel.value for e in self.edges)
            return {
                "nodes": {k.value: by_kind.get(k.value, 0) for k in NodeKind},
                "edges": {r.value: by_rel.get(r.value, 0) for r in Rel},
                "node_total": len(self.nodes),
                "edge_total": len(self.edges),
                "chunks": len(self.chunks),
                "counter": self.counter,
            }

    # -- persistence ---------------------------------------------------------

    def _records(self) -> dict[str, list[str]]:
        ordered = sorted(self.nodes.values(), key=lambda n: n.counter)
        return {
            "nodes.jsonl": [_dumps(n.to_record()) for n in ordered],
            "edges.jsonl": [_dumps(e.to_record()) for e in self.edges],
            "vectors.jsonl": [_dumps({"id": n.id, "v": n.embedding.tolist()}) for n in ordered],
        }

    def save(self, path) -> None:
        """Write the store as a directory of JSON-lines files plus ``meta.json``."""
        with self._lock:
            root = Path(path)
            root.mkdir(parents=True, exist_ok=True)
            records = self._records()
            meta = {
                "format": FORMAT_VERSION,
                "dim": self.dim,
                "counter": self.counter,
                "config": asdict(self.cfg),
                "node_count": len(self.nodes),
                "edge_count": len(self.edges),
                "chunks": self.chunks,
            }
            for name, lines in records.items():
                _atomic_write(root / name, "".join(line + "\n" for line in lines))
            _atomic_write(root / "meta.json", json.dumps(meta, sort_keys=True, indent=1, ensure_ascii=False) + "\n")

    @classmethod
    def load(cls, path, read_only: bool = False) -> "EventGraphStore":
        root = Path(path)
        meta_path = root / "meta.json"
        try:
            meta = json.loads(meta_path.read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise StoreFormatError(f"{meta_path}: missing") from None
        except ValueError as exc:
            raise StoreFormatError(f"{meta_path}: {exc}") from None
        try:
            cfg = MemConfig(**meta["config"])
            if meta.get("format") != FORMAT_VERSION or meta["dim"] != cfg.embed_dim:
                raise ValueError("unsupported format or dimension")
            store = cls(cfg)
            store.counter = int(meta["counter"])
            store.chunks = list(meta["chunks"])
            want_nodes, want_edges = int(meta["node_count"]), int(meta["edge_count"])
        except (KeyError, TypeError, ValueError) as exc:
            raise StoreFormatError(f"{meta_path}: bad metadata ({exc})") from None

        def lines(name):
            p = root / name
            if not p.exists():
                raise StoreFormatError(f"{p}: missing")
            with open(p, encoding="utf-8") as fh:
                for lineno, line in enumerate(fh, 1):
                    if not line.endswith("\n"):
                        raise StoreFormatError(f"{p}:{lineno}: truncated record")
                    try:
                        yield lineno, json.loads(line)
                    except ValueError as exc:
                        raise StoreFormatError(f"{p}:{lineno}: {exc}") from None

        vectors = {}
        for lineno, rec in lines("vectors.jsonl"):
            try:
                v = np.asarray(rec["v"], dtype=np.float64)
                if v.shape != (store.dim,):
                    raise ValueError(f"dimension {v.shape}")
                vectors[rec["id"]] = v
            except (KeyError, TypeError, ValueError) as exc:
                raise StoreFormatError(f"{root / 'vectors.jsonl'}:{lineno}: bad vector ({exc})") from None

        for lineno, rec in lines("nodes.jsonl"):
            try:
                node = EKGNode(rec["id"], NodeKind(rec["kind"]), rec["text"], vectors.pop(rec["id"]),
                               float(rec["t_start"]), float(rec["t_end"]), list(rec["source_chunks"]),
                               int(rec["counter"]), dict(rec["attrs"]))
                if node.id in store.nodes or not node.text or node.t_start > node.t_end:
                    raise ValueError("duplicate id, empty text or inverted span")
            except (KeyError, TypeError, ValueError) as exc:
                raise StoreFormatError(f"{root / 'nodes.jsonl'}:{lineno}: bad node ({exc})") from None
            store.nodes[node.id] = node
            store._adj[node.id] = set()
            store._index.add(node.id, node.embedding, node.counter)
            if node.kind is NodeKind.ENTITY:
                store._entities.add(node.id, node.embedding, node.counter)
        if vectors:
            raise StoreFormatError(f"{root / 'vectors.jsonl'}: vector for unknown node {next(iter(vectors))!r}")

        for lineno, rec in lines("edges.jsonl"):
            try:
                src, dst, rel = rec["src"], rec["dst"], Rel(rec["rel"])
                if src not in store.nodes or dst not in store.nodes:
                    raise ValueError("endpoint does not exist")
                if (src, dst, rel) in store._edge_keys:
                    raise ValueError("duplicate edge")
                store._add_edge(src, dst, rel, dict(rec["provenance"]))
            except (KeyError, TypeError, ValueError) as exc:
                raise StoreFormatError(f"{root / 'edges.jsonl'}:{lineno}: bad edge ({exc})") from None
            if rel is Rel.RESULTS_IN:
                store._producer.setdefault(dst, src)

        if len(store.nodes) != want_nodes or len(store.edges) != want_edges:
            raise StoreFormatError(
                f"{root}: expected {want_nodes} nodes / {want_edges} edges, found "
                f"{len(store.nodes)} / {len(store.edges)} (truncated?)"
            )
        for sid in sorted(store._producer, key=lambda s: store.nodes[s].counter):
            node = store.nodes[sid]
            store._posts.add(sid, node.embedding, node.counter)
        store.read_only = read_only
        return store

    def file_sizes(self, path) -> dict[str, int]:
        root = Path(path)
        return {name: (root / name).stat().st_size if (root / name).exists() else 0
                for name in ("nodes.jsonl", "edges.jsonl", "vectors.jsonl", "meta.json")}


def _atomic_write(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)
    os.replace(tmp, path)
