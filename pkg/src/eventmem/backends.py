"""Model access: text embedder, triplet extractor and answer generator.

Each role has a deterministic offline stub and an HTTP client.  The wire
protocol is a small JSON exchange:

* embed:    POST ``{"model", "input": <text>}``              -> ``{"output": [floats]}``
* extract:  POST ``{"model", "messages", "attachments"}``    -> ``{"output": <text>}``
* generate: POST ``{"model", "messages", "attachments"}``    -> ``{"output": <text>}``

``attachments`` are opaque frame/clip references; pixels never pass through
this package.
"""
from __future__ import annotations

import hashlib
import json
import logging
import time
from typing import Mapping, Sequence

import httpx
import numpy as np

from .abstraction import ExtractionRequest, extraction_messages
from .core import BackendConfig, normalize

log = logging.getLogger(__name__)

__all__ = [
    "BackendError",
    "HttpEmbedder",
    "HttpExtractor",
    "HttpGenerator",
    "StubEmbedder",
    "StubExtractor",
    "StubGenerator",
    "make_embedder",
    "make_extractor",
    "make_generator",
    "question_block",
    "question_key",
    "tokenize",
]


class BackendError(RuntimeError):
    """``kind`` is one of ``Transport``, ``Dim``, ``NoFixture``, ``Protocol``."""

    def __init__(self, kind: str, message: str):
        super().__init__(f"{kind}: {message}")
        self.kind = kind


def tokenize(text: str) -> list[str]:
    """Lowercase, then split on every non-alphanumeric character."""
    tokens, cur = [], []
    for ch in text.lower():
        if ch.isalnum():
            cur.append(ch)
        elif cur:
            tokens.append("".join(cur))
            cur = []
    if cur:
        tokens.append("".join(cur))
    return tokens


def _bucket(token: str, dim: int) -> int:
    digest = hashlib.sha256(token.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big") % dim


class StubEmbedder:
    """Token-bag hashing embedder.

    Each token lands in bucket ``int(sha256(token)[:8], big-endian) % dim``;
    counts are accumulated and the vector normalized.  Text without tokens
    maps to the first basis vector.
    """

    def __init__(self, dim: int = 256):
        if dim < 1:
            raise ValueError("dim must be positive")
        self.dim = dim
        self._cache: dict[str, np.ndarray] = {}

    def __call__(self, text: str) -> np.ndarray:
        hit = self._cache.get(text)
        if hit is not None:
            return hit
        vec = np.zeros(self.dim)
        tokens = tokenize(text)
        if not tokens:
            vec[0] = 1.0
        for tok in tokens:
            vec[_bucket(tok, self.dim)] += 1.0
        vec = normalize(vec)
        vec.flags.writeable = False
        if len(self._cache) < 100_000:
            self._cache[text] = vec
        return vec

    embed_text = __call__


class StubExtractor:
    """Looks replies up by chunk id in a fixture map."""

    def __init__(self, fixtures: Mapping[str, str]):
        self.fixtures = dict(fixtures)

    @classmethod
    def from_file(cls, path) -> "StubExtractor":
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
        if not isinstance(data, dict) or not all(isinstance(v, str) for v in data.values()):
            raise ValueError(f"{path}: fixture file must map chunk ids to reply strings")
        return cls(data)

    def extract_triplets(self, request: ExtractionRequest) -> str:
        try:
            return self.fixtures[request.chunk.id]
        except KeyError:
            raise BackendError("NoFixture", f"no canned reply for chunk {request.chunk.id!r}") from None


_QUESTION_HEAD = "### [Question & Choices]\n"
_QUESTION_TAIL = "\n\n### [Decision Rules]"


def question_block(prompt: str) -> str:
    """The question-and-choices section of a QA prompt (the whole prompt if absent)."""
    start = prompt.find(_QUESTION_HEAD)
    if start < 0:
        return prompt
    start += len(_QUESTION_HEAD)
    end = prompt.find(_QUESTION_TAIL, start)
    return prompt[start:] if end < 0 else prompt[start:end]


def question_key(question: str) -> str:
    return hashlib.sha256(question.encode("utf-8")).hexdigest()


class StubGenerator:
    """Scripted replies keyed by the sha256 of the prompt's question block.

    Script keys may also be the raw question text; they are hashed on load.
    """

    def __init__(self, script: Mapping[str, str] | None = None, default: str | None = None):
        self.script = {}
        for key, reply in (script or {}).items():
            is_hash = len(key) == 64 and all(c in "0123456789abcdef" for c in key)
            self.script[key if is_hash else question_key(key)] = reply
        self.default = default
        self.calls: list[tuple[str, list]] = []

    @classmethod
    def from_file(cls, path, default: str | None = None) -> "StubGenerator":
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
        if not isinstance(data, dict):
            raise ValueError(f"{path}: answer script must be a JSON object")
        return cls(data, default)

    def generate_answer(self, prompt: str, chunk_ids: Sequence[str] = ()) -> str:
        self.calls.append((prompt, list(chunk_ids)))
        key = question_key(question_block(prompt))
        if key in self.script:
            return self.script[key]
        if self.default is not None:
            return self.default
        raise BackendError("NoFixture", f"no scripted answer for question block {key[:12]}")


class _HttpClient:
    def __init__(self, cfg: BackendConfig, transport: httpx.BaseTransport | None = None):
        if not cfg.endpoint:
            raise BackendError("Protocol", "http backend without endpoint")
        self.cfg = cfg
        self._client = httpx.Client(timeout=cfg.timeout, transport=transport)

    def post(self, payload: dict) -> dict:
        attempts = self.cfg.max_retries + 1
        last = None
        for attempt in range(1, attempts + 1):
            try:
                resp = self._client.post(self.cfg.endpoint, json=payload)
                if resp.status_code >= 500:
                    last = f"HTTP {resp.status_code}"
                else:
                    resp.raise_for_status()
                    return resp.json()
            except httpx.HTTPStatusError as exc:
                raise BackendError("Transport", f"HTTP {exc.response.status_code} from {self.cfg.endpoint}") from None
            except (httpx.TransportError, ValueError) as exc:
                last = f"{type(exc).__name__}: {exc}"
            log.debug("attempt %d/%d to %s failed: %s", attempt, attempts, self.cfg.endpoint, last)
            if attempt < attempts:
                time.sleep(min(0.05 * 2 ** (attempt - 1), 1.0))
        raise BackendError("Transport", f"{self.cfg.endpoint} failed after {attempts} attempts ({last})")

    def post_text(self, payload: dict) -> str:
        body = self.post(payload)
        out = body.get("output") if isinstance(body, dict) else None
        if not isinstance(out, str):
            raise BackendError("Protocol", "response lacks a string 'output'")
        return out

    def close(self) -> None:
        self._client.close()


class HttpEmbedder:
    def __init__(self, cfg: BackendConfig, dim: int, transport: httpx.BaseTransport | None = None):
        self.dim = dim
        self._http = _HttpClient(cfg, transport)
        self._model = cfg.model_name

    def __call__(self, text: str) -> np.ndarray:
        body = self._http.post({"model": self._model, "input": text})
        out = body.get("output") if isinstance(body, dict) else None
        if not isinstance(out, list):
            raise BackendError("Protocol", "embedding response lacks a list 'output'")
        if len(out) != self.dim:
            raise BackendError("Dim", f"embedding has dimension {len(out)}, store expects {self.dim}")
        try:
            return normalize(out)
        except ValueError as exc:
            raise BackendError("Protocol", str(exc)) from None

    embed_text = __call__


class HttpExtractor:
    def __init__(self, cfg: BackendConfig, transport: httpx.BaseTransport | None = None):
        self._http = _HttpClient(cfg, transport)
        self._model = cfg.model_name

    def extract_triplets(self, request: ExtractionRequest) -> str:
        chunk = request.chunk
        return self._http.post_text({
            "model": self._model,
            "messages": extraction_messages(chunk),
            "attachments": [{"chunk_id": chunk.id, "t": t} for t in chunk.sampled_ts],
        })


class HttpGenerator:
    def __init__(self, cfg: BackendConfig, transport: httpx.BaseTransport | None = None):
        self._http = _HttpClient(cfg, transport)
        self._model = cfg.model_name

    def generate_answer(self, prompt: str, chunk_ids: Sequence[str] = ()) -> str:
        return self._http.post_text({
            "model": self._model,
            "messages": [{"role": "user", "content": prompt}],
            "attachments": [{"chunk_id": c} for c in chunk_ids],
        })


def make_embedder(cfg: BackendConfig, dim: int):
    if cfg.kind == "http":
        return HttpEmbedder(cfg, dim)
    return StubEmbedder(dim)


def make_extractor(cfg: BackendConfig):
    if cfg.kind == "http":
        return HttpExtractor(cfg)
    if not cfg.fixtures:
        raise BackendError("NoFixture", "stub extractor needs a fixture file")
    return StubExtractor.from_file(cfg.fixtures)


def make_generator(cfg: BackendConfig, default: str | None = None):
    if cfg.kind == "http":
        return HttpGenerator(cfg)
    if cfg.fixtures:
        return StubGenerator.from_file(cfg.fixtures, default)
    return StubGenerator({}, default)
