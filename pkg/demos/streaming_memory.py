"""Feed a long synthetic stream through the online segmenter and watch its buffer.

Run from the repository root:  python3 demos/streaming_memory.py [n_frames]
"""
import sys

import numpy as np

from eventmem.core import FrameEmbedding, SegConfig
from eventmem.sentinel import StreamingSegmenter


def frames(n, dim=16, fps=8.0, seed=0):
    rng = np.random.default_rng(seed)
    v = rng.normal(size=dim)
    v /= np.linalg.norm(v)
    burst = 0
    for i in range(n):
        if burst == 0 and rng.random() < 0.01:
            burst = int(rng.integers(8, 120))
        if burst:
            w = rng.normal(size=dim)
            v = v + 0.3 * w / np.linalg.norm(w)
            v /= np.linalg.norm(v)
            burst -= 1
        yield FrameEmbedding(i / fps, v)


def main(n):
    cfg = SegConfig()
    seg = StreamingSegmenter(cfg)
    chunks = 0
    for i, f in enumerate(frames(n), 1):
        chunks += len(seg.push(f))
        if i % (n // 10) == 0:
            print(f"{i:9d} frames  {chunks:6d} chunks  buffer {seg.retained:4d}  peak {seg.max_retained:4d}")
    chunks += len(seg.flush())
    print(f"done: {chunks} chunks; peak buffer {seg.max_retained} (bound {cfg.buffer_bound})")


if __name__ == "__main__":
    main(int(sys.argv[1]) if len(sys.argv) > 1 else 200_000)
