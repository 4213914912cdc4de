"""Domain types, configuration and vector helpers shared by every module.

Embeddings are normalized once when they enter the engine, so every
similarity computed downstream is a plain dot product.
"""
from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, dataclass, field, fields
from enum import Enum
from typing import Any, Mapping

import numpy as np

# Vectors whose norm is this close to 1 are already unit length; leaving them
# untouched is what makes normalize() idempotent bit-for-bit.
_UNIT_TOL = 1e-12

# Temporal tolerance for boundary-equal timestamps (seconds).
TIME_EPS = 1e-6


class ConfigError(ValueError):
    """Raised for invalid or unknown configuration values."""


def normalize(v) -> np.ndarray:
    """Return ``v / |v|`` as a float64 array.

    Raises ValueError for zero, non-finite or non 1-D input.
    """
    arr = np.asarray(v, dtype=np.float64)
    if arr.ndim != 1 or arr.size == 0:
        raise ValueError(f"expected a non-empty 1-D vector, got shape {arr.shape}")
    norm = float(np.linalg.norm(arr))
    if not math.isfinite(norm):
        raise ValueError("vector contains non-finite values")
    if norm == 0.0:
        raise ValueError("cannot normalize a zero vector")
    if abs(norm - 1.0) <= _UNIT_TOL:
        return arr.copy()
    return arr / norm


def cosine(a, b) -> float:
    """Cosine similarity of two nonzero vectors of equal dimension."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError(f"dimension mismatch: {a.shape} vs {b.shape}")
    na = float(np.linalg.norm(a))
    nb = float(np.linalg.norm(b))
    if na == 0.0 or nb == 0.0:
        raise ValueError("cosine is undefined for a zero vector")
    value = float(np.dot(a, b)) / (na * nb)
    return min(1.0, max(-1.0, value))


def format_seconds(t: float) -> str:
    """Render a timestamp the way prompts and contexts show it (``3.0``, ``9.125``)."""
    return repr(round(float(t), 3))


# ---------------------------------------------------------------------------
# Domain types
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class FrameEmbedding:
    """Timestamped embedding of one video frame; ``v`` is stored unit-normalized."""

    t: float
    v: np.ndarray

    def __post_init__(self):
        t = float(self.t)
        if not math.isfinite(t) or t < 0:
            raise ValueError(f"frame timestamp must be a non-negative real, got {self.t!r}")
        v = normalize(self.v)
        v.flags.writeable = False
        object.__setattr__(self, "t", t)
        object.__setattr__(self, "v", v)

    @property
    def dim(self) -> int:
        return int(self.v.shape[0])


@dataclass(frozen=True)
class SpeechIsland:
    start: float
    end: float
    text: str

    def __post_init__(self):
        object.__setattr__(self, "start", float(self.start))
        object.__setattr__(self, "end", float(self.end))
        if not self.start < self.end:
            raise ValueError(f"speech island needs start < end, got [{self.start}, {self.end}]")
        if not isinstance(self.text, str) or not self.text:
            raise ValueError("speech island text must be a non-empty string")

    def to_dict(self) -> dict:
        return {"start": self.start, "end": self.end, "text": self.text}

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "SpeechIsland":
        return cls(d["start"], d["end"], d["text"])


class ChunkKind(str, Enum):
    DYNAMIC = "DynamicEvent"
    STATIC = "StaticBackground"


@dataclass(frozen=True)
class EventChunk:
    id: str
    kind: ChunkKind
    start: float
    end: float
    sampled_ts: tuple[float, ...] = ()
    transcript: tuple[SpeechIsland, ...] = ()

    @property
    def duration(self) -> float:
        return self.end - self.start

    @property
    def audio_context(self) -> str:
        return " ".join(island.text for island in self.transcript)

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "kind": self.kind.value,
            "start": self.start,
            "end": self.end,
            "sampled_ts": list(self.sampled_ts),
            "transcript": [island.to_dict() for island in self.transcript],
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "EventChunk":
        return cls(
            id=str(d["id"]),
            kind=ChunkKind(d["kind"]),
            start=float(d["start"]),
            end=float(d["end"]),
            sampled_ts=tuple(float(t) for t in d.get("sampled_ts", ())),
            transcript=tuple(SpeechIsland.from_dict(x) for x in d.get("transcript", ())),
        )


@dataclass(frozen=True)
class SESTriplet:
    """One pre-state -> event -> post-state record extracted from a chunk."""

    temporal_order: int
    pre_state: str
    event: str
    post_state: str
    entities: tuple[str, ...] = ()
    location: str = ""
    chunk_id: str = ""
    t_start: float | None = None
    t_end: float | None = None

    def __post_init__(self):
        for name in ("pre_state", "event", "post_state"):
            value = getattr(self, name)
            if not isinstance(value, str) or not value.strip():
                raise ValueError(f"{name} must be a non-empty string")
        if self.temporal_order < 1:
            raise ValueError("temporal_order must be a positive integer")
        object.__setattr__(self, "entities", tuple(self.entities))
        if self.t_start is not None and self.t_end is not None and self.t_start > self.t_end:
            raise ValueError("t_start must not exceed t_end")

    @property
    def timed(self) -> bool:
        return self.t_start is not None and self.t_end is not None

    def to_dict(self) -> dict:
        d = asdict(self)
        d["entities"] = list(self.entities)
        return d


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------


def _check_similarity(name: str, value: float) -> None:
    if not 0.0 < value < 1.0:
        raise ConfigError(f"{name} must lie in (0, 1), got {value}")


@dataclass(frozen=True)
class SegConfig:
    tau_evt: float = 0.97
    tau_bg: float = 0.99
    sigma: float = 1.0
    patience_m: int = 2
    p_l: float = 1.0
    p_u: float = 12.0
    fps_dynamic: float = 8.0
    fps_static: float = 2.0
    source_fps: float = 8.0

    def __post_init__(self):
        _check_similarity("tau_evt", self.tau_evt)
        _check_similarity("tau_bg", self.tau_bg)
        if not self.tau_evt < self.tau_bg:
            raise ConfigError("tau_evt must be smaller than tau_bg")
        if self.sigma < 0:
            raise ConfigError("sigma must be non-negative")
        if int(self.patience_m) != self.patience_m or self.patience_m < 1:
            raise ConfigError("patience_m must be an integer >= 1")
        if not 0 < self.p_l < self.p_u <= 12.0:
            raise ConfigError("need 0 < p_l < p_u <= 12.0")
        for name in ("fps_dynamic", "fps_static", "source_fps"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.cap_frames < 1:
            raise ConfigError("p_u * source_fps must cover at least one frame interval")

    # thresholds live in similarity space; the segmenter works on distances
    @property
    def evt_distance(self) -> float:
        return 1.0 - self.tau_evt

    @property
    def bg_distance(self) -> float:
        return 1.0 - self.tau_bg

    @property
    def radius(self) -> int:
        return int(math.ceil(3.0 * self.sigma))

    @property
    def cap_frames(self) -> int:
        """Maximum window extent in source frame intervals."""
        return int(math.floor(self.p_u * self.source_fps + 1e-9))

    @property
    def buffer_bound(self) -> int:
        """Upper bound on the streaming segmenter's retained entries."""
        return self.cap_frames + 2 * self.radius + self.patience_m


@dataclass(frozen=True)
class MemConfig:
    gamma_ent: float = 0.85
    gamma_evt: float = 0.85
    embed_dim: int = 256

    def __post_init__(self):
        _check_similarity("gamma_ent", self.gamma_ent)
        _check_similarity("gamma_evt", self.gamma_evt)
        if self.embed_dim < 1:
            raise ConfigError("embed_dim must be positive")


@dataclass(frozen=True)
class RetrievalConfig:
    top_k: int = 3
    max_hops: int = 2
    tau_dup: float = 0.85

    def __post_init__(self):
        if self.top_k < 1:
            raise ConfigError("top_k must be >= 1")
        if self.max_hops < 0:
            raise ConfigError("max_hops must be >= 0")
        if math.isnan(self.tau_dup):
            raise ConfigError("tau_dup must be a number")


@dataclass(frozen=True)
class BackendConfig:
    kind: str = "stub"
    endpoint: str | None = None
    model_name: str = ""
    timeout: float = 30.0
    max_retries: int = 2
    fixtures: str | None = None

    def __post_init__(self):
        if self.kind not in ("stub", "http"):
            raise ConfigError(f"backend kind must be 'stub' or 'http', got {self.kind!r}")
        if self.kind == "http" and not self.endpoint:
            raise ConfigError("http backends need an endpoint")
        if self.timeout <= 0 or self.max_retries < 0:
            raise ConfigError("timeout must be positive and max_retries non-negative")


BACKEND_ROLES = ("embedder", "extractor", "generator")


@dataclass(frozen=True)
class EngineConfig:
    segmentation: SegConfig = field(default_factory=SegConfig)
    memory: MemConfig = field(default_factory=MemConfig)
    retrieval: RetrievalConfig = field(default_factory=RetrievalConfig)
    backends: Mapping[str, BackendConfig] = field(
        default_factory=lambda: {role: BackendConfig() for role in BACKEND_ROLES}
    )

    def to_dict(self) -> dict:
        return {
            "segmentation": asdict(self.segmentation),
            "memory": asdict(self.memory),
            "retrieval": asdict(self.retrieval),
            "backends": {role: asdict(cfg) for role, cfg in self.backends.items()},
        }


def _build(cls, data: Mapping[str, Any] | None, section: str):
    data = dict(data or {})
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"unknown keys in [{section}]: {', '.join(unknown)}")
    try:
        return cls(**data)
    except TypeError as exc:
        raise ConfigError(f"[{section}]: {exc}") from None


def config_from_dict(data: Mapping[str, Any]) -> EngineConfig:
    allowed = {"segmentation", "memory", "retrieval", "backends"}
    unknown = sorted(set(data) - allowed)
    if unknown:
        raise ConfigError(f"unknown config sections: {', '.join(unknown)}")
    raw_backends = dict(data.get("backends") or {})
    bad_roles = sorted(set(raw_backends) - set(BACKEND_ROLES))
    if bad_roles:
        raise ConfigError(f"unknown backend roles: {', '.join(bad_roles)}")
    backends = {
        role: _build(BackendConfig, _env_overrides(role, raw_backends.get(role)), f"backends.{role}")
        for role in BACKEND_ROLES
    }
    return EngineConfig(
        segmentation=_build(SegConfig, data.get("segmentation"), "segmentation"),
        memory=_build(MemConfig, data.get("memory"), "memory"),
        retrieval=_build(RetrievalConfig, data.get("retrieval"), "retrieval"),
        backends=backends,
    )


def _env_overrides(role: str, section: Mapping[str, Any] | None) -> dict:
    # EVENTMEM_<ROLE>_ENDPOINT / EVENTMEM_<ROLE>_MODEL win over the file
    section = dict(section or {})
    prefix = f"EVENTMEM_{role.upper()}_"
    if os.environ.get(prefix + "ENDPOINT"):
        section["endpoint"] = os.environ[prefix + "ENDPOINT"]
    if os.environ.get(prefix + "MODEL"):
        section["model_name"] = os.environ[prefix + "MODEL"]
    return section


def load_config(path: str | os.PathLike | None = None) -> EngineConfig:
    """Load a JSON config file; every field is optional.

    With no path the ``EVENTMEM_CONFIG`` environment variable is consulted,
    and failing that the defaults are used.
    """
    if path is None:
        path = os.environ.get("EVENTMEM_CONFIG")
    if path is None:
        return config_from_dict({})
    try:
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a JSON object")
    return config_from_dict(data)

