"""BERTScore over pluggable token-embedding backends, plus external score ingestion."""

from __future__ import annotations

import json
import logging
import math
import threading
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Mapping, Optional, Sequence, Union

import httpx
import numpy as np

from ._io import atomic_write_text, iter_jsonl, sha256_text
from .rouge import tokenize

logger = logging.getLogger(__name__)

BACKEND_KINDS = ("mock_one_hot", "http_service")


class EmbeddingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TokenEmbeddings:
    tokens: tuple[str, ...]
    vectors: np.ndarray

    def __post_init__(self):
        vecs = np.asarray(self.vectors, dtype=np.float64)
        if vecs.ndim == 1 and len(self.tokens) == 0:
            vecs = vecs.reshape(0, 0)
        if vecs.ndim != 2 or vecs.shape[0] != len(self.tokens):
            raise EmbeddingError(
                f"{len(self.tokens)} tokens but vectors have shape {vecs.shape}"
            )
        object.__setattr__(self, "vectors", vecs)

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def __len__(self) -> int:
        return len(self.tokens)


@dataclass(frozen=True)
class EmbeddingBackendRef:
    kind: str = "mock_one_hot"
    model_id: str = "one-hot"
    endpoint: Optional[str] = None

    def __post_init__(self):
        if self.kind not in BACKEND_KINDS:
            raise ValueError(f"backend kind must be one of {BACKEND_KINDS}")
        if self.kind == "http_service" and not self.endpoint:
            raise ValueError("http_service backend needs an endpoint")


@dataclass(frozen=True)
class BertScoreResult:
    precision: float
    recall: float
    f1: float

    def to_json(self) -> dict:
        return {"p": self.precision, "r": self.recall, "f1": self.f1}


@dataclass(frozen=True)
class IdfTable:
    weights: Mapping[str, float]
    default_weight: float

    def __getitem__(self, token: str) -> float:
        return self.weights.get(token, self.default_weight)


class OneHotBackend:
    """Each distinct token type gets its own standard basis vector.

    Under this backend the greedy max cosine for a token is 1 when its type
    occurs on the other side and 0 otherwise.
    """

    ref = EmbeddingBackendRef("mock_one_hot", "one-hot")

    def embed(self, text: str, vocab: Optional[dict[str, int]] = None) -> TokenEmbeddings:
        tokens = tokenize(text)
        if vocab is None:
            vocab = {}
            for t in tokens:
                vocab.setdefault(t, len(vocab))
        vecs = np.zeros((len(tokens), len(vocab)))
        for row, t in enumerate(tokens):
            vecs[row, vocab[t]] = 1.0
        return TokenEmbeddings(tuple(tokens), vecs)

    def embed_pair(self, cand: str, ref: str) -> tuple[TokenEmbeddings, TokenEmbeddings]:
        vocab: dict[str, int] = {}
        for t in tokenize(cand) + tokenize(ref):
            vocab.setdefault(t, len(vocab))
        return self.embed(cand, vocab), self.embed(ref, vocab)


class HttpEmbeddingBackend:
    """Client for the token-embedding service.

    Requests go to ``POST {endpoint}/v1/token_embeddings``. Responses are cached
    in memory, and on disk when ``cache_dir`` is set, keyed by model and text hash.
    """

    def __init__(
        self,
        ref: EmbeddingBackendRef,
        *,
        timeout: float = 60.0,
        max_concurrency: int = 4,
        cache_dir: Optional[Union[str, Path]] = None,
        transport: Optional[httpx.BaseTransport] = None,
    ):
        if ref.kind != "http_service":
            raise ValueError("HttpEmbeddingBackend needs an http_service ref")
        self.ref = ref
        self._http = httpx.Client(timeout=timeout, transport=transport)
        self._slots = threading.BoundedSemaphore(max_concurrency)
        self._memo: dict[str, TokenEmbeddings] = {}
        self._lock = threading.Lock()
        self.cache_dir = Path(cache_dir) if cache_dir else None
        self.network_calls = 0

    def _key(self, text: str) -> str:
        return sha256_text(json.dumps([self.ref.model_id, sha256_text(text)]))

    def _disk_path(self, key: str) -> Optional[Path]:
        if self.cache_dir is None:
            return None
        return self.cache_dir / "embeddings" / key[:2] / f"{key}.json"

    @staticmethod
    def _decode(body: dict) -> TokenEmbeddings:
        try:
            tokens = body["tokens"]
            vectors = body["embeddings"]
        except (KeyError, TypeError):
            raise EmbeddingError("response lacks 'tokens'/'embeddings'") from None
        if len(tokens) != len(vectors):
            raise EmbeddingError("tokens and embeddings are not index-aligned")
        dims = {len(v) for v in vectors}
        if len(dims) > 1:
            raise EmbeddingError(f"dimension mismatch across tokens: {sorted(dims)}")
        if not tokens:
            return TokenEmbeddings((), np.zeros((0, 0)))
        return TokenEmbeddings(tuple(tokens), np.array(vectors, dtype=np.float64))

    def embed(self, text: str) -> TokenEmbeddings:
        key = self._key(text)
        with self._lock:
            hit = self._memo.get(key)
        if hit is not None:
            return hit
        path = self._disk_path(key)
        if path is not None and path.exists():
            emb = self._decode(json.loads(path.read_text(encoding="utf-8")))
        else:
            url = self.ref.endpoint.rstrip("/") + "/v1/token_embeddings"
            with self._slots:
                with self._lock:
                    self.network_calls += 1
                try:
                    resp = self._http.post(url, json={"model": self.ref.model_id, "text": text})
                    resp.raise_for_status()
                    body = resp.json()
                except (httpx.HTTPError, ValueError) as exc:
                    raise EmbeddingError(f"token embedding request failed: {exc}") from exc
            emb = self._decode(body)
            if path is not None and not path.exists():
                atomic_write_text(path, json.dumps(body))
        with self._lock:
            self._memo[key] = emb
        return emb

    def embed_pair(self, cand: str, ref: str) -> tuple[TokenEmbeddings, TokenEmbeddings]:
        return self.embed(cand), self.embed(ref)

    def close(self) -> None:
        self._http.close()


def make_backend(ref: EmbeddingBackendRef, **kwargs):
    if ref.kind == "mock_one_hot":
        return OneHotBackend()
    return HttpEmbeddingBackend(ref, **kwargs)


def embed(text: str, backend) -> TokenEmbeddings:
    if isinstance(backend, EmbeddingBackendRef):
        backend = make_backend(backend)
    return backend.embed(text)


def _unit_rows(m: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(m, axis=1, keepdims=True)
    # Zero vectors stay zero, so their cosine with anything is 0.
    return np.divide(m, norms, out=np.zeros_like(m), where=norms > 0)


def _weighted_mean(values: np.ndarray, weights: np.ndarray) -> float:
    total = float(weights.sum())
    if total <= 0:
        return 0.0
    return float(np.dot(weights, values) / total)


def greedy_match(
    cand: TokenEmbeddings, ref: TokenEmbeddings, idf: Optional[IdfTable] = None
) -> BertScoreResult:
    if len(cand) == 0 or len(ref) == 0:
        return BertScoreResult(0.0, 0.0, 0.0)
    if cand.dim != ref.dim:
        raise EmbeddingError(f"dimension mismatch: {cand.dim} vs {ref.dim}")
    sim = _unit_rows(cand.vectors) @ _unit_rows(ref.vectors).T
    if idf is None:
        w_c, w_r = np.ones(len(cand)), np.ones(len(ref))
    else:
        w_c = np.array([idf[t] for t in cand.tokens])
        w_r = np.array([idf[t] for t in ref.tokens])
    p = _weighted_mean(sim.max(axis=1), w_c)
    r = _weighted_mean(sim.max(axis=0), w_r)
    f1 = 2 * p * r / (p + r) if p > 0 and r > 0 else 0.0
    return BertScoreResult(p, r, f1)


def bertscore(candidate: str, reference: str, backend, idf: Optional[IdfTable] = None) -> BertScoreResult:
    c, r = backend.embed_pair(candidate, reference)
    return greedy_match(c, r, idf)


def build_idf(reference_corpus: Sequence[str], tokenizer: Callable[[str], list[str]] = tokenize) -> IdfTable:
    if not reference_corpus:
        raise ValueError("IDF corpus must be non-empty")
    n = len(reference_corpus)
    df: Counter = Counter()
    for doc in reference_corpus:
        df.update(set(tokenizer(doc)))
    weights = {t: math.log((n + 1) / (d + 1)) for t, d in df.items()}
    return IdfTable(weights, math.log(n + 1))


def ingest_external_scores(path: Union[str, Path], metric_name: str) -> dict[str, float]:
    """Read externally computed per-id scores (e.g. BLEURT) for one metric.

    Rows for other metrics are ignored. A duplicate id for the same metric is an
    error; ids absent from the file are simply absent from the map.
    """
    scores: dict[str, float] = {}
    lines: dict[str, int] = {}
    for lineno, obj in iter_jsonl(path):
        where = f"{path}:{lineno}"
        if not isinstance(obj, dict) or not {"id", "metric", "score"} <= obj.keys():
            raise ValueError(f"{where}: malformed line (need id, metric, score)")
        score = obj["score"]
        if isinstance(score, bool) or not isinstance(score, (int, float)) or not math.isfinite(score):
            raise ValueError(f"{where}: score must be a finite number")
        if obj["metric"] != metric_name:
            continue
        rid = str(obj["id"])
        if rid in scores:
            raise ValueError(f"{path}: duplicate id {rid!r} on lines {lines[rid]} and {lineno}")
        scores[rid] = float(score)
        lines[rid] = lineno
    if not scores:
        logger.warning("%s: no %s scores found", path, metric_name)
    return scores
