"""``eventmem`` command line.

Exit codes: 0 success, 1 usage error, 2 data error, 3 backend error.
"""
from __future__ import annotations

import argparse
import contextlib
import dataclasses
import fcntl
import json
import math
import sys
from pathlib import Path

from .abstraction import ExtractionError
from .backends import BackendError, make_embedder, make_extractor, make_generator
from .core import ConfigError, EngineConfig, MemConfig, load_config
from .memory import DimensionMismatch, EventGraphStore, ReadOnlyStoreError, StoreFormatError, UnknownNodeError
from .pipeline import ingest, iter_chunks
from .retrieval import AnswerError, RetrievalError, answer_question, retrieve
from .sentinel import SegmentationError, read_frames, read_islands, write_chunks

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_BACKEND = 0, 1, 2, 3

DATA_ERRORS = (
    AnswerError, ConfigError, DimensionMismatch, ExtractionError, OSError, ReadOnlyStoreError,
    RetrievalError, SegmentationError, StoreFormatError, UnknownNodeError, ValueError,
)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _positive(kind):
    def parse(text):
        value = kind(text)
        if value <= 0:
            raise argparse.ArgumentTypeError(f"must be positive, got {text}")
        return value
    return parse


def _non_negative_int(text):
    value = int(text)
    if value < 0:
        raise argparse.ArgumentTypeError(f"must be >= 0, got {text}")
    return value


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="eventmem", description="Event memory for long video streams.")
    p.add_argument("--config", help="JSON config file (default: $EVENTMEM_CONFIG, then built-in defaults)")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    seg = sub.add_parser("segment", help="segment a frame stream into chunks")
    seg.add_argument("--frames", required=True, help="frame embeddings, JSON lines {t, v}")
    seg.add_argument("--speech", help="speech islands, JSON lines {start, end, text}")
    seg.add_argument("--out", required=True, help="chunk JSON lines output ('-' for stdout)")
    seg.add_argument("--fps", type=_positive(float), help="source frame rate (overrides config)")
    seg.add_argument("--fixed-chunk", type=_positive(float), metavar="SECONDS",
                     help="fixed-length chunks instead of the sentinel")

    ing = sub.add_parser("ingest", help="segment, extract and commit into a store")
    ing.add_argument("--frames", required=True)
    ing.add_argument("--speech")
    ing.add_argument("--store", required=True, help="store directory (created if missing)")
    ing.add_argument("--backend", choices=("stub", "http"), default="stub")
    ing.add_argument("--fixtures", help="stub extractor replies: JSON map chunk id -> reply")
    ing.add_argument("--fps", type=_positive(float))
    ing.add_argument("--fixed-chunk", type=_positive(float), metavar="SECONDS")
    ing.add_argument("--include-static", action="store_true", help="also extract static background chunks")
    ing.add_argument("--workers", type=_positive(int), default=1)
    ing.add_argument("--strict", action="store_true", help="fail on an unparsable extractor reply")

    q = sub.add_parser("query", help="answer a question from a store")
    q.add_argument("--store", required=True)
    q.add_argument("--question", required=True, help="question block (question plus options)")
    q.add_argument("--topk", type=_positive(int))
    q.add_argument("--hops", type=_non_negative_int)
    q.add_argument("--taudup", type=float)
    q.add_argument("--no-dedup", action="store_true", help="disable semantic deduplication")
    q.add_argument("--trace", help="write the retrieval trace JSON here")
    q.add_argument("--backend", choices=("stub", "http"), default="stub")
    q.add_argument("--script", help="stub generator script: JSON map question (or sha256) -> reply")
    mode = q.add_mutually_exclusive_group()
    mode.add_argument("--mc", dest="mode", action="store_const", const="mc", help="multiple choice (default)")
    mode.add_argument("--open", dest="mode", action="store_const", const="open", help="free-text answer")
    q.set_defaults(mode="mc")

    st = sub.add_parser("stats", help="print store statistics")
    st.add_argument("--store", required=True)

    ex = sub.add_parser("export", help="dump the graph")
    ex.add_argument("--store", required=True)
    ex.add_argument("--format", choices=("jsonl", "graphml"), default="jsonl")
    ex.add_argument("--out", required=True, help="output file ('-' for stdout, jsonl only)")
    return p


def _config(args) -> EngineConfig:
    cfg = load_config(args.config)
    seg = cfg.segmentation
    if getattr(args, "fps", None):
        seg = dataclasses.replace(seg, source_fps=args.fps)
    backends = dict(cfg.backends)
    kind = getattr(args, "backend", None)
    if kind is not None:
        backends = {role: dataclasses.replace(b, kind=kind) for role, b in backends.items()}
    if getattr(args, "fixtures", None):
        backends["extractor"] = dataclasses.replace(backends["extractor"], fixtures=args.fixtures)
    if getattr(args, "script", None):
        backends["generator"] = dataclasses.replace(backends["generator"], fixtures=args.script)
    return dataclasses.replace(cfg, segmentation=seg, backends=backends)


def _open_store(path: str, mem: MemConfig, read_only: bool) -> EventGraphStore:
    root = Path(path)
    if (root / "meta.json").exists():
        return EventGraphStore.load(root, read_only=read_only)
    if read_only:
        raise StoreFormatError(f"{root}: no store here (missing meta.json)")
    return EventGraphStore(mem)


@contextlib.contextmanager
def _ingest_lock(root: Path):
    root.mkdir(parents=True, exist_ok=True)
    with open(root / ".ingest.lock", "w") as fh:
        try:
            fcntl.flock(fh, fcntl.LOCK_EX | fcntl.LOCK_NB)
        except BlockingIOError:
            raise StoreFormatError(f"{root}: another ingest holds the store lock") from None
        try:
            yield
        finally:
            fcntl.flock(fh, fcntl.LOCK_UN)


def cmd_segment(args, out) -> int:
    cfg = _config(args)
    islands = read_islands(args.speech) if args.speech else []
    chunks = list(iter_chunks(read_frames(args.frames), islands, cfg.segmentation, args.fixed_chunk))
    if args.out == "-":
        write_chunks(chunks, out)
    else:
        with open(args.out, "w", encoding="utf-8") as fh:
            write_chunks(chunks, fh)
    dyn = sum(c.kind.value == "DynamicEvent" for c in chunks)
    print(f"chunks: {len(chunks)} (dynamic {dyn}, static {len(chunks) - dyn})", file=sys.stderr if args.out == "-" else out)
    return EXIT_OK


def cmd_ingest(args, out) -> int:
    cfg = _config(args)
    root = Path(args.store)
    with _ingest_lock(root):
        store = _open_store(args.store, cfg.memory, read_only=False)
        embed = make_embedder(cfg.backends["embedder"], store.dim)
        extractor = make_extractor(cfg.backends["extractor"])
        islands = read_islands(args.speech) if args.speech else []
        before = store.stats()
        report = ingest(read_frames(args.frames), islands, store, extractor, embed, cfg.segmentation,
                        fixed_chunk=args.fixed_chunk, include_static=args.include_static,
                        workers=args.workers, strict=args.strict)
        store.save(root)
    after = store.stats()
    print(f"chunks: {report.chunks} (dynamic {report.dynamic}, static {report.static}), "
          f"extracted {report.extracted}", file=out)
    print(f"triplets: {report.triplets} committed, {report.rejected_triplets} rejected, "
          f"{report.warnings} warnings", file=out)
    print(f"nodes: {after['node_total']} (+{after['node_total'] - before['node_total']}), "
          f"edges: {after['edge_total']} (+{after['edge_total'] - before['edge_total']})", file=out)
    for chunk_id, err in report.failed_chunks:
        print(f"warning: chunk {chunk_id} skipped: {err}", file=sys.stderr)
    return EXIT_OK


def cmd_query(args, out) -> int:
    cfg = _config(args)
    store = _open_store(args.store, cfg.memory, read_only=True)
    rcfg = cfg.retrieval
    changes = {}
    if args.topk is not None:
        changes["top_k"] = args.topk
    if args.hops is not None:
        changes["max_hops"] = args.hops
    if args.taudup is not None:
        changes["tau_dup"] = args.taudup
    if args.no_dedup:
        changes["tau_dup"] = math.inf
    rcfg = dataclasses.replace(rcfg, **changes)
    embed = make_embedder(cfg.backends["embedder"], store.dim)
    gen_cfg = cfg.backends["generator"]

    if gen_cfg.kind == "stub" and not gen_cfg.fixtures:
        # no generator configured: retrieval only
        _, trace = retrieve(args.question, store, embed, rcfg)
        answer_line = "answer: (no generator script; retrieval only)"
    else:
        generator = make_generator(gen_cfg)
        answer, trace = answer_question(args.question, store, embed, generator, rcfg, args.mode)
        answer_line = f"answer: {answer.option_index if args.mode == 'mc' else answer.text}"
    if args.trace:
        Path(args.trace).write_text(trace.to_json() + "\n", encoding="utf-8")
    print(f"anchors: {len(trace.anchors)}  walked: {len(trace.walked)}  kept: {len(trace.kept)}  "
          f"pruned: {len(trace.pruned)}", file=out)
    print(answer_line, file=out)
    return EXIT_OK


def cmd_stats(args, out) -> int:
    store = _open_store(args.store, MemConfig(), read_only=True) if (Path(args.store) / "meta.json").exists() \
        else EventGraphStore(MemConfig())
    stats = store.stats()
    stats["files"] = store.file_sizes(args.store)
    print(json.dumps(stats, indent=1, sort_keys=True), file=out)
    return EXIT_OK


def _graphml(store: EventGraphStore, path: str) -> None:
    import networkx as nx

    g = nx.MultiDiGraph()
    for node in sorted(store.nodes.values(), key=lambda n: n.counter):
        g.add_node(node.id, kind=node.kind.value, text=node.text, t_start=node.t_start, t_end=node.t_end,
                   source_chunks=",".join(node.source_chunks), counter=node.counter)
    for e in store.edges:
        g.add_edge(e.src, e.dst, key=e.rel.value, rel=e.rel.value,
                   provenance=json.dumps(e.provenance, sort_keys=True))
    nx.write_graphml(g, path)


def cmd_export(args, out) -> int:
    store = _open_store(args.store, MemConfig(), read_only=True)
    if args.format == "graphml":
        if args.out == "-":
            raise UsageError("eventmem export: graphml needs a file path for --out")
        _graphml(store, args.out)
    else:
        lines = [json.dumps({"record": "node", **n.to_record()}, sort_keys=True, ensure_ascii=False)
                 for n in sorted(store.nodes.values(), key=lambda n: n.counter)]
        lines += [json.dumps({"record": "edge", **e.to_record()}, sort_keys=True, ensure_ascii=False)
                  for e in store.edges]
        text = "".join(line + "\n" for line in lines)
        if args.out == "-":
            out.write(text)
        else:
            Path(args.out).write_text(text, encoding="utf-8")
    print(f"exported {len(store.nodes)} nodes, {len(store.edges)} edges", file=sys.stderr)
    return EXIT_OK


COMMANDS = {
    "segment": cmd_segment,
    "ingest": cmd_ingest,
    "query": cmd_query,
    "stats": cmd_stats,
    "export": cmd_export,
}


def main(argv=None, out=None) -> int:
    out = out or sys.stdout
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    if args.verbose:
        import logging
        logging.basicConfig(level=logging.DEBUG)
    try:
        return COMMANDS[args.command](args, out)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except BackendError as exc:
        print(f"eventmem: backend error: {exc}", file=sys.stderr)
        return EXIT_BACKEND
    except DATA_ERRORS as exc:
        print(f"eventmem: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
