"""Frozen autoregressive decoder with prefix injection.

A GPT2-style pre-LN Transformer LM. Prefix vectors are prepended to the
token embeddings; the caption loss covers only token target positions.
Parameters fall into three groups (embedding, transformer, header); by
default every group is frozen and only header tuning may mark the header
trainable.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from importlib import resources

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .checkpoint import load_module, load_tensors, module_tensors, save_tensors
from .data import TokenSequence, Vocabulary, detokenize
from .errors import (
    DimensionMismatch,
    FrozenViolation,
    LengthMismatch,
    VocabTooSmall,
)

PARAM_GROUPS = ("embedding", "transformer", "header")


@dataclass(frozen=True)
class DecoderConfig:
    vocab_size: int
    d_model: int = 768
    n_layers: int = 12
    n_heads: int = 12
    max_positions: int = 1024

    @classmethod
    def toy(cls, vocab_size: int, d_model: int = 64) -> "DecoderConfig":
        return cls(vocab_size=vocab_size, d_model=d_model, n_layers=2,
                   n_heads=4, max_positions=256)


class CausalSelfAttention(nn.Module):
    def __init__(self, d_model: int, n_heads: int):
        super().__init__()
        self.n_heads = n_heads
        self.c_attn = nn.Linear(d_model, 3 * d_model)
        self.c_proj = nn.Linear(d_model, d_model)

    def forward(self, x):
        b, t, d = x.shape
        q, k, v = self.c_attn(x).split(d, dim=2)
        shape = (b, t, self.n_heads, d // self.n_heads)
        q = q.view(shape).transpose(1, 2)
        k = k.view(shape).transpose(1, 2)
        v = v.view(shape).transpose(1, 2)
        att = (q @ k.transpose(-2, -1)) / math.sqrt(d // self.n_heads)
        mask = torch.triu(torch.ones(t, t, dtype=torch.bool, device=x.device), 1)
        att = att.masked_fill(mask, float("-inf"))
        out = F.softmax(att, dim=-1) @ v
        return self.c_proj(out.transpose(1, 2).reshape(b, t, d))


class Mlp(nn.Module):
    def __init__(self, d_model: int):
        super().__init__()
        self.c_fc = nn.Linear(d_model, 4 * d_model)
        self.c_proj = nn.Linear(4 * d_model, d_model)

    def forward(self, x):
        return self.c_proj(F.gelu(self.c_fc(x)))


class Block(nn.Module):
    def __init__(self, d_model: int, n_heads: int):
        super().__init__()
        self.ln_1 = nn.LayerNorm(d_model)
        self.attn = CausalSelfAttention(d_model, n_heads)
        self.ln_2 = nn.LayerNorm(d_model)
        self.mlp = Mlp(d_model)

    def forward(self, x):
        x = x + self.attn(self.ln_1(x))
        return x + self.mlp(self.ln_2(x))


class FrozenDecoder(nn.Module):
    """Language model plus per-group frozen flags."""

    def __init__(self, config: DecoderConfig):
        super().__init__()
        self.config = config
        self.wte = nn.Embedding(config.vocab_size, config.d_model)
        self.wpe = nn.Embedding(config.max_positions, config.d_model)
        self.blocks = nn.ModuleList(Block(config.d_model, config.n_heads)
                                    for _ in range(config.n_layers))
        self.ln_f = nn.LayerNorm(config.d_model)
        self.header = nn.Linear(config.d_model, config.vocab_size, bias=False)
        self.group_frozen = {g: True for g in PARAM_GROUPS}
        self._apply_freeze()

    def _apply_freeze(self):
        for group, params in self.param_groups().items():
            for _, p in params:
                p.requires_grad_(not self.group_frozen[group])

    def set_frozen(self, group: str, frozen: bool) -> None:
        self.group_frozen[group] = frozen
        self._apply_freeze()

    def param_groups(self) -> dict[str, list[tuple[str, nn.Parameter]]]:
        groups = {g: [] for g in PARAM_GROUPS}
        for name, p in self.named_parameters():
            if name.startswith(("wte", "wpe")):
                groups["embedding"].append((name, p))
            elif name.startswith("header"):
                groups["header"].append((name, p))
            else:
                groups["transformer"].append((name, p))
        return groups

    def forward(self, prefixes: torch.Tensor | None,
                tokens: torch.Tensor) -> torch.Tensor:
        """prefixes (B, K, d) or None; tokens (B, T) -> logits (B, K+T, V)."""
        emb = self.wte(tokens)
        if prefixes is not None:
            if prefixes.shape[-1] != self.config.d_model:
                raise DimensionMismatch(
                    f"prefix width {prefixes.shape[-1]} != d_model {self.config.d_model}")
            emb = torch.cat([prefixes.to(emb.dtype), emb], dim=1)
        length = emb.shape[1]
        if length > self.config.max_positions:
            raise LengthMismatch(f"sequence length {length} exceeds "
                                 f"max_positions {self.config.max_positions}")
        pos = torch.arange(length, device=emb.device)
        h = emb + self.wpe(pos)
        for block in self.blocks:
            h = block(h)
        return self.header(self.ln_f(h))


def caption_loss(logits: torch.Tensor, tokens: torch.Tensor, n_prefixes: int,
                 pad_id: int, token_mask: torch.Tensor | None = None) -> torch.Tensor:
    """Mean negative log-likelihood over target token positions.

    ``tokens`` include BOS at position 0; the row of ``logits`` at index
    n_prefixes + i - 1 predicts tokens[i]. Pad positions are excluded.
    """
    if logits.dim() == 2:
        logits, tokens = logits.unsqueeze(0), tokens.unsqueeze(0)
        if token_mask is not None:
            token_mask = token_mask.unsqueeze(0)
    b, t = tokens.shape
    if logits.shape[1] < n_prefixes + t - 1:
        raise LengthMismatch(
            f"logits length {logits.shape[1]} < prefixes {n_prefixes} + targets {t - 1}")
    pred = logits[:, n_prefixes: n_prefixes + t - 1, :]
    targets = tokens[:, 1:]
    if token_mask is None:
        valid = targets != pad_id
    else:
        valid = token_mask[:, 1:]
    logp = F.log_softmax(pred, dim=-1)
    nll = -logp.gather(2, targets.unsqueeze(-1).clamp(min=0)).squeeze(-1)
    return (nll * valid).sum() / valid.sum().clamp(min=1)


@torch.no_grad()
def generate(decoder: FrozenDecoder, prefixes: torch.Tensor | None,
             vocab: Vocabulary, strategy: str = "greedy", beam_width: int = 5,
             max_len: int = 30) -> str:
    """Decode one caption from prefixes, starting at BOS."""
    decoder.eval()
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    if prefixes is not None and prefixes.dim() == 2:
        prefixes = prefixes.unsqueeze(0)
    if strategy == "greedy":
        ids = _greedy(decoder, prefixes, vocab, max_len)
    elif strategy == "beam":
        ids = _beam(decoder, prefixes, vocab, beam_width, max_len)
    else:
        raise ValueError(f"unknown strategy {strategy!r}")
    return detokenize(TokenSequence(tokens=tuple(ids)), vocab)


def _greedy(decoder, prefixes, vocab, max_len):
    tokens = [vocab.bos_id]
    for _ in range(max_len):
        inp = torch.tensor([tokens], dtype=torch.long)
        logits = decoder(prefixes, inp)
        nxt = int(logits[0, -1].argmax())
        tokens.append(nxt)
        if nxt == vocab.eos_id:
            break
    return tokens


def _beam(decoder, prefixes, vocab, width, max_len):
    beams = [([vocab.bos_id], 0.0)]  # (tokens, total logprob)
    finished = []
    for _ in range(max_len):
        candidates = []
        for tokens, score in beams:
            inp = torch.tensor([tokens], dtype=torch.long)
            logp = F.log_softmax(decoder(prefixes, inp)[0, -1], dim=-1)
            top = torch.topk(logp, width)
            for val, idx in zip(top.values.tolist(), top.indices.tolist()):
                cand = (tokens + [idx], score + val)
                if idx == vocab.eos_id:
                    finished.append(cand)
                else:
                    candidates.append(cand)
        if not candidates:
            break
        candidates.sort(key=lambda c: c[1] / (len(c[0]) - 1), reverse=True)
        beams = candidates[:width]
    pool = finished if finished else beams
    best = max(pool, key=lambda c: c[1] / (len(c[0]) - 1))
    return best[0]


def snapshot_params(decoder: FrozenDecoder) -> dict[str, torch.Tensor]:
    return {n: p.detach().clone() for n, p in decoder.named_parameters()}


def verify_frozen(decoder: FrozenDecoder,
                  snapshot: dict[str, torch.Tensor]) -> dict[str, float]:
    """Max absolute parameter change per group; frozen groups must be 0."""
    report = {}
    for group, params in decoder.param_groups().items():
        diffs = [float((p.detach() - snapshot[n]).abs().max()) for n, p in params]
        report[group] = max(diffs) if diffs else 0.0
        if decoder.group_frozen[group] and report[group] != 0.0:
            raise FrozenViolation(group, report[group])
    return report


def retune_header(decoder: FrozenDecoder, target_vocab: Vocabulary,
                  source_vocab: Vocabulary) -> FrozenDecoder:
    """Rebuild the model over a target vocabulary, header trainable.

    The output header is re-initialized with |target_vocab| rows and
    marked trainable. Input token embeddings are re-keyed: each target
    token row is the source embedding of that token (UNK row when
    absent). Transformer parameters are shared and stay frozen.
    """
    if len(target_vocab) < 10:
        raise VocabTooSmall(f"target vocabulary has {len(target_vocab)} tokens")
    cfg = decoder.config
    new_cfg = DecoderConfig(vocab_size=len(target_vocab), d_model=cfg.d_model,
                            n_layers=cfg.n_layers, n_heads=cfg.n_heads,
                            max_positions=cfg.max_positions)
    new = FrozenDecoder(new_cfg)
    with torch.no_grad():
        new.wpe.weight.copy_(decoder.wpe.weight)
        for i in range(len(target_vocab)):
            tok = target_vocab.id_to_token(i)
            src_id = source_vocab.token_to_id(tok)
            new.wte.weight[i] = decoder.wte.weight[src_id]
        for dst, src in zip(new.blocks, decoder.blocks):
            dst.load_state_dict(src.state_dict())
        new.ln_f.load_state_dict(decoder.ln_f.state_dict())
        nn.init.normal_(new.header.weight, std=0.02)
    new.set_frozen("header", False)
    return new


def save_decoder(decoder: FrozenDecoder, path, metadata: dict | None = None) -> None:
    save_tensors(path, module_tensors(decoder, "decoder"), metadata)


def load_decoder_weights(decoder: FrozenDecoder, path, strict: bool = True) -> dict:
    tensors, _meta = load_tensors(path)
    return load_module(decoder, tensors, "decoder", strict=strict)


def import_gpt2_weights(gpt2_state: dict[str, np.ndarray],
                        config: DecoderConfig) -> dict[str, np.ndarray]:
    """Translate a standard pretrained-GPT2 weight layout into our names.

    The name-mapping table ships as ``gpt2_mapping.json``; GPT2's Conv1D
    weights are stored transposed relative to nn.Linear and are flipped
    here. Returns tensors keyed for the shared checkpoint container.
    """
    table = json.loads(
        resources.files("audioprefix").joinpath("gpt2_mapping.json").read_text())
    out: dict[str, np.ndarray] = {}

    def put(src: str, dst: str, transpose: bool):
        if src not in gpt2_state:
            return False
        arr = np.asarray(gpt2_state[src])
        out[f"decoder/{dst}"] = arr.T.copy() if transpose else arr
        return True

    for entry in table["static"]:
        put(entry["src"], entry["dst"], entry.get("transpose", False))
    for layer in range(config.n_layers):
        for entry in table["per_layer"]:
            put(entry["src"].format(i=layer), entry["dst"].format(i=layer),
                entry.get("transpose", False))
    if "lm_head.weight" not in gpt2_state and "wte.weight" in gpt2_state:
        # GPT2 ties the output header to the token embedding
        out["decoder/header.weight"] = np.asarray(gpt2_state["wte.weight"])
    return out
