"""Synthetic frame streams with planted bursts of visual change."""
from __future__ import annotations

import numpy as np

from eventmem.core import FrameEmbedding, SpeechIsland


def planted_stream(rng, n_frames, dim=12, fps=8.0, n_bursts=None, noise=0.0):
    """Unit vectors that sit still except inside randomly placed bursts.

    Inside a burst the vector rotates toward a fresh random direction with a
    bell-shaped step size, so the adjacent distance rises and falls.
    """
    if n_bursts is None:
        n_bursts = int(rng.integers(0, 6))
    v = rng.normal(size=dim)
    v /= np.linalg.norm(v)
    step = np.zeros(n_frames)
    for _ in range(n_bursts):
        length = int(rng.integers(3, 160))
        start = int(rng.integers(-length // 2, n_frames))
        peak = float(rng.uniform(0.05, 1.2))
        idx = np.arange(length)
        bell = peak * np.sin(np.pi * (idx + 1) / (length + 1))
        for k, b in zip(range(start, start + length), bell):
            if 0 <= k < n_frames:
                step[k] = max(step[k], b)
    frames = []
    for i in range(n_frames):
        if i and step[i] > 0:
            target = rng.normal(size=dim)
            target -= (target @ v) * v
            target /= np.linalg.norm(target)
            v = np.cos(step[i]) * v + np.sin(step[i]) * target
        w = v + noise * rng.normal(size=dim) if noise else v
        frames.append(FrameEmbedding(i / fps, w / np.linalg.norm(w)))
    return frames


def random_islands(rng, t_end, max_islands=4):
    out = []
    for k in range(int(rng.integers(0, max_islands + 1))):
        a = float(rng.uniform(0, t_end))
        b = a + float(rng.uniform(0.2, 6.0))
        out.append(SpeechIsland(a, b, f"line {k}."))
    return out
