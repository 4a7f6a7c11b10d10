"""Caption-mediated text-to-audio retrieval.

Audio in a database is captioned once, the captions are embedded, and
text queries retrieve audio by cosine similarity between text embeddings
(text-to-text retrieval). The embedder is an adapter: a pretrained
sentence-embedding model when available, otherwise a deterministic
TF-IDF-free character-n-gram hashing embedding.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import normalize_caption
from .errors import EmptyIndex


class CharNgramEmbedder:
    """Deterministic fallback embedder: hashed character n-gram counts,
    L2-normalized. No model weights, stable across runs and machines."""

    name = "char-ngram-hash"

    def __init__(self, dim: int = 512, n_values: tuple[int, ...] = (2, 3, 4)):
        self.dim = dim
        self.n_values = n_values

    def embed(self, texts: list[str]) -> np.ndarray:
        out = np.zeros((len(texts), self.dim), dtype=np.float64)
        for row, text in enumerate(texts):
            padded = f" {normalize_caption(text)} "
            for n in self.n_values:
                for i in range(len(padded) - n + 1):
                    gram = padded[i:i + n].encode("utf-8")
                    h = int.from_bytes(hashlib.blake2b(gram, digest_size=8).digest(), "little")
                    out[row, h % self.dim] += 1.0
            norm = np.linalg.norm(out[row])
            if norm > 0:
                out[row] /= norm
        return out


class SentenceTransformerEmbedder:
    """Adapter over a pretrained sentence-embedding model (e.g. MPNet)."""

    def __init__(self, model_name: str = "all-mpnet-base-v2"):
        from sentence_transformers import SentenceTransformer
        self.name = model_name
        self._model = SentenceTransformer(model_name)

    def embed(self, texts: list[str]) -> np.ndarray:
        vecs = np.asarray(self._model.encode(texts, convert_to_numpy=True),
                          dtype=np.float64)
        norms = np.linalg.norm(vecs, axis=1, keepdims=True)
        return vecs / np.maximum(norms, 1e-12)


def make_embedder(name: str = "fallback"):
    if name in ("fallback", "char-ngram-hash"):
        return CharNgramEmbedder()
    return SentenceTransformerEmbedder(name)


@dataclass
class RetrievalIndex:
    audio_ids: list[str]
    captions: list[str]
    embeddings: np.ndarray  # (n, dim), rows L2-normalized
    embedder_name: str
    config_hash: str = ""
    extra: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.audio_ids)

    def save(self, path) -> None:
        path = Path(path)
        np.savez(path, embeddings=self.embeddings)
        meta = {"audio_ids": self.audio_ids, "captions": self.captions,
                "embedder": self.embedder_name, "config_hash": self.config_hash}
        path.with_suffix(".json").write_text(json.dumps(meta, indent=2))

    @classmethod
    def load(cls, path) -> "RetrievalIndex":
        path = Path(path)
        with np.load(path if path.suffix == ".npz" else path.with_suffix(".npz")) as npz:
            embeddings = npz["embeddings"]
        meta = json.loads(path.with_suffix(".json").read_text())
        return cls(audio_ids=meta["audio_ids"], captions=meta["captions"],
                   embeddings=embeddings, embedder_name=meta["embedder"],
                   config_hash=meta.get("config_hash", ""))


def build_index(captions_by_audio: dict[str, str], embedder,
                config_hash: str = "") -> RetrievalIndex:
    """Index one generated caption per audio."""
    audio_ids = list(captions_by_audio.keys())
    captions = [captions_by_audio[a] for a in audio_ids]
    embeddings = embedder.embed(captions)
    return RetrievalIndex(audio_ids=audio_ids, captions=captions,
                          embeddings=embeddings, embedder_name=embedder.name,
                          config_hash=config_hash)


def retrieve(query_text: str, index: RetrievalIndex, embedder,
             k: int | None = None) -> list[str]:
    """Ranked audio ids by cosine similarity; ties broken by audio_id."""
    if len(index) == 0:
        raise EmptyIndex("retrieval index is empty")
    q = embedder.embed([query_text])[0]
    # elementwise product + per-row sum rather than gemv: BLAS kernels can
    # round identical rows differently, which would break exact ties
    sims = (index.embeddings * q).sum(axis=1)
    order = sorted(range(len(index)),
                   key=lambda i: (-sims[i], index.audio_ids[i]))
    ranked = [index.audio_ids[i] for i in order]
    return ranked if k is None else ranked[:k]


def recall_at_k(queries: list[tuple[str, str]], index: RetrievalIndex,
                embedder, k: int) -> float:
    """Fraction of (query, gold_audio_id) pairs whose gold audio is in the
    top-k retrieved results."""
    if k < 1:
        raise ValueError("k must be >= 1")
    if not queries:
        raise EmptyIndex("no queries")
    hits = sum(1 for query, gold in queries
               if gold in retrieve(query, index, embedder, k=k))
    return hits / len(queries)


def load_gold_queries(path) -> list[tuple[str, str]]:
    pairs = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                obj = json.loads(line)
                pairs.append((obj["query"], obj["gold_audio_id"]))
    return pairs
