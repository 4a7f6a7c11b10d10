"""Synthetic desk-scale fixtures: tone-based audio clips with paired
captions, and a small pretrained-then-frozen decoder that stands in for
a full pretrained language model."""

from __future__ import annotations

import math
from pathlib import Path

import numpy as np
import torch
from scipy.io import wavfile

from .audio import StftConfig
from .data import CaptionRecord, Vocabulary, build_vocabulary, tokenize, write_manifest
from .decoder import DecoderConfig, FrozenDecoder

TOY_STFT = StftConfig(sample_rate=16000, window_size=512, hop_size=320,
                      n_mels=64, fmin=50.0, fmax=7500.0)

SUBJECTS = ["a dog", "a cat", "a bird", "a man", "a woman", "rain",
            "thunder", "a car"]
VERBS = ["barks", "meows", "sings", "speaks", "laughs", "falls",
         "rumbles", "passes"]
TAILS = ["in the distance", "in the yard", "on the roof", "near the road",
         "outside", "loudly", "softly", "nearby"]


def toy_captions(n: int = 8) -> list[str]:
    return [f"{SUBJECTS[i % 8]} {VERBS[i % 8]} {TAILS[i % 8]}" for i in range(n)]


def grammar_sentences(rng: np.random.Generator, count: int) -> list[str]:
    """Random sentences from the toy grammar, for decoder pretraining."""
    out = []
    for _ in range(count):
        s = rng.integers(0, len(SUBJECTS))
        v = rng.integers(0, len(VERBS))
        t = rng.integers(0, len(TAILS))
        out.append(f"{SUBJECTS[s]} {VERBS[v]} {TAILS[t]}")
    return out


def grammar_vocabulary() -> Vocabulary:
    phony = [CaptionRecord(audio_id="g", audio_path=Path("g.wav"),
                           captions=tuple(f"{s} {v} {t}" for s, v, t
                                          in zip(SUBJECTS, VERBS, TAILS)),
                           split="train")]
    return build_vocabulary(phony, min_freq=1)


def write_tone_wav(path, freq_hz: float, seconds: float,
                   sample_rate: int = 16000, seed: int = 0) -> None:
    """A sine with two harmonics plus light noise, 16-bit PCM."""
    t = np.arange(round(seconds * sample_rate)) / sample_rate
    rng = np.random.default_rng(seed)
    sig = (0.5 * np.sin(2 * math.pi * freq_hz * t)
           + 0.2 * np.sin(2 * math.pi * 2 * freq_hz * t)
           + 0.1 * np.sin(2 * math.pi * 3 * freq_hz * t)
           + 0.02 * rng.standard_normal(len(t)))
    wavfile.write(str(path), sample_rate, (sig * 20000).astype(np.int16))


def make_toy_dataset(root, n_train: int = 8, n_val: int = 2, n_test: int = 2,
                     seconds: float = 2.0, seed: int = 0) -> Path:
    """Write tone WAVs plus a manifest; returns the manifest path."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    captions = toy_captions(n_train + n_val + n_test)
    records = []
    for i in range(n_train + n_val + n_test):
        split = ("train" if i < n_train
                 else "val" if i < n_train + n_val else "test")
        wav = root / f"tone_{i:03d}.wav"
        write_tone_wav(wav, freq_hz=220.0 * (1.22 ** i), seconds=seconds,
                       sample_rate=TOY_STFT.sample_rate, seed=seed + i)
        records.append(CaptionRecord(audio_id=f"tone_{i:03d}", audio_path=wav,
                                     captions=(captions[i],), split=split))
    manifest = root / "manifest.jsonl"
    write_manifest(records, manifest)
    return manifest


def build_fixture_decoder(vocab: Vocabulary, d_model: int = 64,
                          pretrain_steps: int = 300, batch_size: int = 16,
                          seed: int = 0,
                          sentences: list[str] | None = None) -> FrozenDecoder:
    """Pretrain a 2-layer LM on toy-grammar text, then freeze every group."""
    torch.manual_seed(seed)
    decoder = FrozenDecoder(DecoderConfig.toy(vocab_size=len(vocab),
                                              d_model=d_model))
    for group in decoder.group_frozen:
        decoder.set_frozen(group, False)

    rng = np.random.default_rng(seed)
    pool = sentences if sentences is not None else grammar_sentences(rng, 512)
    encoded = [list(tokenize(s, vocab).tokens) for s in pool]
    max_len = max(len(e) for e in encoded)
    mat = np.full((len(encoded), max_len), vocab.pad_id, dtype=np.int64)
    for i, e in enumerate(encoded):
        mat[i, :len(e)] = e

    optimizer = torch.optim.AdamW(decoder.parameters(), lr=1e-3)
    decoder.train()
    n_prefix = max_len  # content prefix: noisy embeddings of the sentence
    for _ in range(pretrain_steps):
        idx = rng.integers(0, len(encoded), size=batch_size)
        tokens = torch.from_numpy(mat[idx])
        # condition on the sentence's own (noisy) embeddings so the frozen
        # model learns to read continuous prefixes, like a prompt
        with torch.no_grad():
            prefix = decoder.wte(tokens).detach()
            prefix = prefix + 0.1 * torch.randn_like(prefix)
        logits = decoder(prefix, tokens)
        pred = logits[:, n_prefix:-1].reshape(-1, len(vocab))
        tgt = tokens[:, 1:].reshape(-1)
        loss = torch.nn.functional.cross_entropy(pred, tgt,
                                                 ignore_index=vocab.pad_id)
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()

    decoder.eval()
    for group in decoder.group_frozen:
        decoder.set_frozen(group, True)
    return decoder
