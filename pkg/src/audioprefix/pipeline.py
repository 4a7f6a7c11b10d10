"""End-to-end caption pipeline: spectrogram -> encoder -> prefixes ->
frozen decoder, with shared-checkpoint save/load."""

from __future__ import annotations

import numpy as np
import torch
import torch.nn as nn

from .audio import StftConfig
from .checkpoint import load_module, load_tensors, module_tensors, save_tensors
from .data import Batch, Vocabulary
from .decoder import FrozenDecoder, caption_loss, generate
from .encoder import AudioEncoder, EncoderConfig
from .mapper import MapperConfig, PrefixNetwork


class CaptionPipeline(nn.Module):
    def __init__(self, encoder_config: EncoderConfig, mapper_config: MapperConfig,
                 decoder: FrozenDecoder, vocab: Vocabulary,
                 stft: StftConfig | None = None):
        super().__init__()
        self.encoder = AudioEncoder(encoder_config)
        self.prefix_net = PrefixNetwork(mapper_config, encoder_config.channels)
        self.decoder = decoder
        self.vocab = vocab
        self.stft = stft or StftConfig()

    def prefixes(self, specs: torch.Tensor) -> torch.Tensor:
        f_t, f_g = self.encoder(specs)
        return self.prefix_net(f_t, f_g)

    def loss_on_batch(self, batch: Batch) -> torch.Tensor:
        specs = torch.as_tensor(batch.spectrograms, dtype=torch.float32)
        tokens = torch.as_tensor(batch.token_matrix, dtype=torch.long)
        mask = torch.as_tensor(batch.token_mask, dtype=torch.bool)
        prefixes = self.prefixes(specs)
        logits = self.decoder(prefixes, tokens)
        return caption_loss(logits, tokens, prefixes.shape[1],
                            self.vocab.pad_id, token_mask=mask)

    @torch.no_grad()
    def caption(self, spec_values, strategy: str = "greedy",
                beam_width: int = 5, max_len: int = 30) -> str:
        self.eval()
        specs = torch.as_tensor(np.asarray(spec_values), dtype=torch.float32)
        if specs.dim() == 2:
            specs = specs.unsqueeze(0)
        prefixes = self.prefixes(specs)
        return generate(self.decoder, prefixes[0], self.vocab,
                        strategy=strategy, beam_width=beam_width, max_len=max_len)

    # --- checkpointing ---

    def _named_modules_for_ckpt(self) -> dict[str, nn.Module]:
        parts = {"encoder": self.encoder, "decoder": self.decoder}
        if self.prefix_net.bypass is not None:
            parts["bypass"] = self.prefix_net.bypass
        if self.prefix_net.mapper_t is not None:
            parts["mapper_t"] = self.prefix_net.mapper_t
        if self.prefix_net.mapper_g is not None:
            parts["mapper_g"] = self.prefix_net.mapper_g
        return parts

    def state_tensors(self) -> dict[str, np.ndarray]:
        tensors: dict[str, np.ndarray] = {}
        for prefix, module in self._named_modules_for_ckpt().items():
            tensors.update(module_tensors(module, prefix))
        return tensors

    def save(self, path, metadata: dict | None = None,
             extra_tensors: dict[str, np.ndarray] | None = None) -> None:
        tensors = self.state_tensors()
        if extra_tensors:
            tensors.update(extra_tensors)
        save_tensors(path, tensors, metadata)

    def load(self, path, strict: bool = True) -> dict:
        tensors, metadata = load_tensors(path)
        reports = {}
        for prefix, module in self._named_modules_for_ckpt().items():
            reports[prefix] = load_module(module, tensors, prefix, strict=strict)
        return {"metadata": metadata, "reports": reports}
