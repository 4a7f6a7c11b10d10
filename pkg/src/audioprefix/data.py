"""Caption manifests, vocabulary construction, tokenization and batching.

Manifests are JSON-lines with fields ``audio_id``, ``audio``, ``captions``
and ``split``. Captions are normalized (lowercase, terminal punctuation
stripped, whitespace collapsed) before tokenization unless disabled.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .audio import StftConfig, fix_duration, load_waveform, log_mel
from .errors import (
    AudioLoadError,
    DuplicateAudioId,
    EmptyCorpus,
    MalformedManifest,
)

SPLITS = ("train", "val", "test")

BOS, EOS, PAD, UNK = "<bos>", "<eos>", "<pad>", "<unk>"
SPECIAL_TOKENS = (BOS, EOS, PAD, UNK)

_TERMINAL_PUNCT = re.compile(r"[.!?,;:]+$")


def normalize_caption(text: str) -> str:
    text = text.strip().lower()
    text = _TERMINAL_PUNCT.sub("", text)
    return " ".join(text.split())


@dataclass(frozen=True)
class CaptionRecord:
    audio_id: str
    audio_path: Path
    captions: tuple[str, ...]
    split: str

    def __post_init__(self):
        if not self.captions:
            raise ValueError("captions must be non-empty")
        if any(not normalize_caption(c) for c in self.captions):
            raise ValueError("caption empty after normalization")
        if self.split not in SPLITS:
            raise ValueError(f"split must be one of {SPLITS}")


@dataclass(frozen=True)
class TokenSequence:
    tokens: tuple[int, ...]

    def __len__(self):
        return len(self.tokens)


class Vocabulary:
    """Immutable token <-> id mapping with BOS/EOS/PAD/UNK specials."""

    def __init__(self, tokens: list[str]):
        self._id_to_token = list(SPECIAL_TOKENS) + list(tokens)
        self._token_to_id = {t: i for i, t in enumerate(self._id_to_token)}
        if len(self._token_to_id) != len(self._id_to_token):
            raise ValueError("duplicate tokens in vocabulary")

    def __len__(self):
        return len(self._id_to_token)

    def __contains__(self, token: str):
        return token in self._token_to_id

    @property
    def bos_id(self) -> int:
        return 0

    @property
    def eos_id(self) -> int:
        return 1

    @property
    def pad_id(self) -> int:
        return 2

    @property
    def unk_id(self) -> int:
        return 3

    def token_to_id(self, token: str) -> int:
        return self._token_to_id.get(token, self.unk_id)

    def id_to_token(self, idx: int) -> str:
        return self._id_to_token[idx]

    def non_special_tokens(self) -> list[str]:
        return self._id_to_token[len(SPECIAL_TOKENS):]

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(",".join(SPECIAL_TOKENS) + "\n")
            for tok in self.non_special_tokens():
                fh.write(tok + "\n")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        with open(path, encoding="utf-8") as fh:
            header = fh.readline().rstrip("\n")
            if tuple(header.split(",")) != SPECIAL_TOKENS:
                raise ValueError(f"{path}: bad vocabulary header {header!r}")
            return cls([line.rstrip("\n") for line in fh if line.rstrip("\n")])


def load_manifest(path) -> list[CaptionRecord]:
    path = Path(path)
    if not path.exists():
        raise MalformedManifest(0, f"file not found: {path}")
    records: list[CaptionRecord] = []
    seen: dict[str, int] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise MalformedManifest(lineno, f"invalid JSON: {exc}") from exc
            for key in ("audio_id", "audio", "captions", "split"):
                if key not in obj:
                    raise MalformedManifest(lineno, f"missing field {key!r}")
            if not isinstance(obj["captions"], list) or not obj["captions"]:
                raise MalformedManifest(lineno, "captions must be a non-empty array")
            if any(not isinstance(c, str) or not normalize_caption(c) for c in obj["captions"]):
                raise MalformedManifest(lineno, "empty caption after normalization")
            if obj["split"] not in SPLITS:
                raise MalformedManifest(lineno, f"unknown split {obj['split']!r}")
            audio_id = obj["audio_id"]
            if audio_id in seen:
                raise DuplicateAudioId(audio_id, lineno)
            seen[audio_id] = lineno
            records.append(CaptionRecord(
                audio_id=audio_id,
                audio_path=Path(obj["audio"]),
                captions=tuple(obj["captions"]),
                split=obj["split"],
            ))
    return records


def write_manifest(records: list[CaptionRecord], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps({
                "audio_id": rec.audio_id,
                "audio": str(rec.audio_path),
                "captions": list(rec.captions),
                "split": rec.split,
            }) + "\n")


def filter_split(records: list[CaptionRecord], split: str) -> list[CaptionRecord]:
    return [r for r in records if r.split == split]


def expand_pairs(records: list[CaptionRecord]) -> list[tuple[CaptionRecord, str]]:
    """One (record, caption) pair per caption, in manifest order."""
    return [(rec, cap) for rec in records for cap in rec.captions]


def build_vocabulary(records: list[CaptionRecord], min_freq: int = 1,
                     normalize: bool = True) -> Vocabulary:
    if not records:
        raise EmptyCorpus("no records to build a vocabulary from")
    counts: dict[str, int] = {}
    for rec in records:
        for cap in rec.captions:
            text = normalize_caption(cap) if normalize else cap
            for tok in text.split():
                counts[tok] = counts.get(tok, 0) + 1
    kept = [t for t, c in counts.items() if c >= min_freq]
    kept.sort(key=lambda t: (-counts[t], t))
    return Vocabulary(kept)


def tokenize(text: str, vocab: Vocabulary, normalize: bool = True) -> TokenSequence:
    """Encode one caption as [BOS, word ids..., EOS]; OOV words become UNK."""
    if not text:
        raise ValueError("cannot tokenize empty text")
    if normalize:
        text = normalize_caption(text)
    ids = [vocab.bos_id] + [vocab.token_to_id(t) for t in text.split()] + [vocab.eos_id]
    return TokenSequence(tokens=tuple(ids))


def detokenize(seq: TokenSequence, vocab: Vocabulary) -> str:
    words = []
    for idx in seq.tokens:
        if idx in (vocab.bos_id, vocab.pad_id):
            continue
        if idx == vocab.eos_id:
            break
        words.append(vocab.id_to_token(idx))
    return " ".join(words)


@dataclass
class Batch:
    spectrograms: np.ndarray   # (B, T, n_mels) float32
    token_matrix: np.ndarray   # (B, L) int64, PAD-filled
    token_mask: np.ndarray     # (B, L) bool, True on non-pad positions
    record_ids: list[str] = field(default_factory=list)

    def __post_init__(self):
        if self.spectrograms.shape[0] != self.token_matrix.shape[0]:
            raise ValueError("spectrogram / token row count mismatch")


def collate(pairs: list[tuple[CaptionRecord, str]], vocab: Vocabulary,
            stft: StftConfig, audio_seconds: float, max_text_len: int,
            truncate: bool = True) -> Batch:
    """Load, pad and stack one training batch of (record, caption) pairs."""
    specs, rows, ids = [], [], []
    for rec, caption in pairs:
        try:
            wave = load_waveform(rec.audio_path, stft.sample_rate)
        except AudioLoadError as exc:
            raise AudioLoadError(rec.audio_path, str(exc), audio_id=rec.audio_id) from exc
        spec = log_mel(fix_duration(wave, audio_seconds), stft)
        specs.append(spec.values)
        seq = list(tokenize(caption, vocab).tokens)
        if len(seq) > max_text_len:
            if not truncate:
                raise ValueError(f"caption longer than max_text_len for {rec.audio_id}")
            seq = seq[:max_text_len - 1] + [vocab.eos_id]
        rows.append(seq)
        ids.append(rec.audio_id)

    token_matrix = np.full((len(rows), max_text_len), vocab.pad_id, dtype=np.int64)
    token_mask = np.zeros((len(rows), max_text_len), dtype=bool)
    for i, seq in enumerate(rows):
        token_matrix[i, :len(seq)] = seq
        token_mask[i, :len(seq)] = True
    return Batch(
        spectrograms=np.stack(specs).astype(np.float32),
        token_matrix=token_matrix,
        token_mask=token_mask,
        record_ids=ids,
    )
