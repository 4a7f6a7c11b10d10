import math

import numpy as np
import pytest
import torch
import torch.nn.functional as F

from audioprefix.checkpoint import load_tensors, save_tensors
from audioprefix.data import Vocabulary
from audioprefix.decoder import (
    PARAM_GROUPS,
    DecoderConfig,
    FrozenDecoder,
    caption_loss,
    generate,
    import_gpt2_weights,
    load_decoder_weights,
    retune_header,
    save_decoder,
    snapshot_params,
    verify_frozen,
)
from audioprefix.errors import (
    DimensionMismatch,
    FrozenViolation,
    LengthMismatch,
    VocabTooSmall,
)

VOCAB = Vocabulary([f"w{i}" for i in range(12)])


def _decoder(seed=0, vocab_size=None, d_model=64):
    torch.manual_seed(seed)
    dec = FrozenDecoder(DecoderConfig.toy(vocab_size or len(VOCAB), d_model=d_model))
    dec.eval()
    return dec


class TestForward:
    def test_logit_shapes(self):
        dec = _decoder()
        logits = dec(torch.randn(2, 3, 64), torch.zeros(2, 5, dtype=torch.long))
        assert tuple(logits.shape) == (2, 8, len(VOCAB))
        logits = dec(None, torch.zeros(1, 4, dtype=torch.long))
        assert tuple(logits.shape) == (1, 4, len(VOCAB))

    def test_prefix_width_checked(self):
        with pytest.raises(DimensionMismatch):
            _decoder()(torch.randn(1, 3, 32), torch.zeros(1, 2, dtype=torch.long))

    def test_max_positions_checked(self):
        dec = _decoder()
        with pytest.raises(LengthMismatch):
            dec(torch.randn(1, 200, 64), torch.zeros(1, 60, dtype=torch.long))

    def test_softmax_rows_stochastic(self):
        dec = _decoder(seed=2)
        logits = dec(torch.randn(1, 4, 64), torch.zeros(1, 6, dtype=torch.long))
        probs = F.softmax(logits, dim=-1)
        assert torch.allclose(probs.sum(-1), torch.ones(1, 10), atol=1e-5)

    def test_causality(self):
        """Perturbing a later token must not change earlier logit rows."""
        dec = _decoder(seed=3)
        tokens = torch.tensor([[0, 4, 5, 6, 7, 1]])
        prefixes = torch.randn(1, 3, 64)
        base = dec(prefixes, tokens)
        mutated = tokens.clone()
        mutated[0, 4] = 9
        out = dec(prefixes, mutated)
        # rows strictly before the mutated position (prefix offset 3) agree
        assert torch.allclose(base[:, : 3 + 4], out[:, : 3 + 4], atol=1e-6)
        assert not torch.allclose(base[:, 3 + 4], out[:, 3 + 4], atol=1e-6)

    def test_prefix_changes_all_token_rows(self):
        dec = _decoder(seed=4)
        tokens = torch.tensor([[0, 4, 5, 1]])
        torch.manual_seed(0)
        a = dec(torch.randn(1, 2, 64), tokens)
        b = dec(torch.randn(1, 2, 64), tokens)
        assert not torch.allclose(a[:, 2:], b[:, 2:])


class TestCaptionLoss:
    def test_uniform_logits_give_log_vocab(self):
        v = len(VOCAB)
        tokens = torch.tensor([[0, 4, 5, 1, 2, 2]])
        logits = torch.zeros(1, 3 + 6, v)
        loss = caption_loss(logits, tokens, n_prefixes=3, pad_id=2)
        assert loss.item() == pytest.approx(math.log(v), abs=1e-6)

    def test_perfect_prediction_near_zero(self):
        v = len(VOCAB)
        tokens = torch.tensor([[0, 4, 5, 1]])
        logits = torch.full((1, 2 + 4, v), -100.0)
        for i, tgt in enumerate(tokens[0, 1:].tolist()):
            logits[0, 2 + i, tgt] = 100.0
        loss = caption_loss(logits, tokens, n_prefixes=2, pad_id=2)
        assert loss.item() < 1e-6

    def test_hand_computed_two_positions(self):
        # two target positions with known per-position distributions
        tokens = torch.tensor([[0, 1, 2]])  # BOS, EOS(target), PAD
        logits = torch.zeros(1, 3, 4)
        logits[0, 1] = torch.tensor([0.0, 2.0, 0.0, 0.0])
        expected = -math.log(math.exp(2.0) / (3 + math.exp(2.0)))
        loss = caption_loss(logits, tokens, n_prefixes=1, pad_id=2)
        assert loss.item() == pytest.approx(expected, rel=1e-6)

    def test_pad_positions_excluded(self):
        v = len(VOCAB)
        tokens_short = torch.tensor([[0, 4, 1]])
        tokens_padded = torch.tensor([[0, 4, 1, 2, 2, 2]])
        torch.manual_seed(0)
        dec = _decoder()
        prefixes = torch.randn(1, 2, 64)
        with torch.no_grad():
            a = caption_loss(dec(prefixes, tokens_short), tokens_short, 2, 2)
            b = caption_loss(dec(prefixes, tokens_padded), tokens_padded, 2, 2)
        assert a.item() == pytest.approx(b.item(), abs=1e-5)
        assert v  # silence unused warning

    def test_mask_argument_overrides_pad_rule(self):
        tokens = torch.tensor([[0, 4, 5, 1]])
        logits = torch.zeros(1, 1 + 4, len(VOCAB))
        mask = torch.tensor([[True, True, False, False]])
        loss = caption_loss(logits, tokens, 1, 2, token_mask=mask)
        # only tokens[1] counted, uniform logits
        assert loss.item() == pytest.approx(math.log(len(VOCAB)), abs=1e-6)

    def test_short_logits_rejected(self):
        with pytest.raises(LengthMismatch):
            caption_loss(torch.zeros(1, 3, 8), torch.zeros(1, 5, dtype=torch.long), 3, 2)


class _RiggedDecoder(FrozenDecoder):
    """Deterministic script: BOS -> 'a' -> 'dog' -> EOS regardless of input."""

    def __init__(self, vocab):
        super().__init__(DecoderConfig.toy(len(vocab), d_model=8))
        self._script = {
            vocab.bos_id: vocab.token_to_id("a"),
            vocab.token_to_id("a"): vocab.token_to_id("dog"),
            vocab.token_to_id("dog"): vocab.eos_id,
        }

    def forward(self, prefixes, tokens):
        k = 0 if prefixes is None else prefixes.shape[1]
        b, t = tokens.shape
        logits = torch.zeros(b, k + t, self.config.vocab_size)
        for i in range(t):
            nxt = self._script.get(int(tokens[0, i]), 1)
            logits[:, k + i, nxt] = 10.0
        return logits


class TestGenerate:
    def test_rigged_greedy(self):
        vocab = Vocabulary(["a", "dog", "barks", "loud", "cat", "runs",
                            "water", "flows", "wind", "blows"])
        dec = _RiggedDecoder(vocab)
        out = generate(dec, torch.randn(2, 8), vocab, strategy="greedy")
        assert out == "a dog"

    def test_beam_width_one_matches_greedy(self):
        torch.manual_seed(7)
        dec = _decoder(seed=7)
        for trial in range(20):
            torch.manual_seed(100 + trial)
            prefixes = torch.randn(3, 64)
            g = generate(dec, prefixes, VOCAB, strategy="greedy", max_len=12)
            b = generate(dec, prefixes, VOCAB, strategy="beam", beam_width=1, max_len=12)
            assert g == b

    def test_max_len_one(self):
        dec = _decoder()
        out = generate(dec, torch.randn(2, 64), VOCAB, max_len=1)
        assert len(out.split()) <= 1

    def test_bad_arguments(self):
        dec = _decoder()
        with pytest.raises(ValueError):
            generate(dec, None, VOCAB, max_len=0)
        with pytest.raises(ValueError):
            generate(dec, None, VOCAB, strategy="sampling")


class TestFreezing:
    def test_default_everything_frozen(self):
        dec = _decoder()
        assert all(dec.group_frozen[g] for g in PARAM_GROUPS)
        assert not any(p.requires_grad for p in dec.parameters())

    def test_unfreeze_header_only(self):
        dec = _decoder()
        dec.set_frozen("header", False)
        for group, params in dec.param_groups().items():
            expected = group == "header"
            assert all(p.requires_grad == expected for _, p in params)

    def test_verify_frozen_passes_untouched(self):
        dec = _decoder()
        snap = snapshot_params(dec)
        report = verify_frozen(dec, snap)
        assert all(v == 0.0 for v in report.values())

    def test_verify_frozen_raises_on_drift(self):
        dec = _decoder()
        snap = snapshot_params(dec)
        with torch.no_grad():
            dec.blocks[0].attn.c_proj.weight += 1e-3
        with pytest.raises(FrozenViolation) as exc:
            verify_frozen(dec, snap)
        assert "transformer" in str(exc.value)

    def test_verify_frozen_allows_trainable_drift(self):
        dec = _decoder()
        dec.set_frozen("header", False)
        snap = snapshot_params(dec)
        with torch.no_grad():
            dec.header.weight += 0.5
        report = verify_frozen(dec, snap)
        assert report["header"] == pytest.approx(0.5)


class TestRetuneHeader:
    def test_shapes_and_flags(self):
        source_vocab = Vocabulary([f"w{i}" for i in range(12)])
        target_vocab = Vocabulary(["w0", "w1", "w2", "brandnew", "w5", "w6", "w7"])
        dec = _decoder()
        new = retune_header(dec, target_vocab, source_vocab)
        assert new.header.weight.shape == (len(target_vocab), 64)
        assert new.header.weight.requires_grad
        assert not new.wte.weight.requires_grad
        # known tokens keep their source embedding rows
        w0_src = dec.wte.weight[source_vocab.token_to_id("w0")]
        w0_new = new.wte.weight[target_vocab.token_to_id("w0")]
        assert torch.equal(w0_src, w0_new)
        # unseen token falls back to the UNK embedding
        unk_row = dec.wte.weight[source_vocab.unk_id]
        assert torch.equal(new.wte.weight[target_vocab.token_to_id("brandnew")], unk_row)

    def test_transformer_shared(self):
        dec = _decoder()
        target = Vocabulary([f"t{i}" for i in range(10)])
        new = retune_header(dec, target, VOCAB)
        assert torch.equal(new.blocks[1].mlp.c_fc.weight,
                           dec.blocks[1].mlp.c_fc.weight)

    def test_tiny_vocab_rejected(self):
        dec = _decoder()
        with pytest.raises(VocabTooSmall):
            retune_header(dec, Vocabulary(["a", "b"]), VOCAB)


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        dec = _decoder(seed=5)
        path = tmp_path / "dec.npz"
        save_decoder(dec, path, metadata={"kind": "toy"})
        other = _decoder(seed=6)
        report = load_decoder_weights(other, path)
        assert report["skipped"] == []
        x = torch.zeros(1, 4, dtype=torch.long)
        with torch.no_grad():
            assert torch.equal(dec(None, x), other(None, x))
        _, meta = load_tensors(path)
        assert meta["kind"] == "toy"

    def test_shape_mismatch_names_tensor(self, tmp_path):
        dec = _decoder()
        path = tmp_path / "dec.npz"
        save_decoder(dec, path)
        tensors, meta = load_tensors(path)
        tensors["decoder/ln_f.weight"] = np.zeros(3, dtype=np.float32)
        bad = tmp_path / "bad.npz"
        save_tensors(bad, tensors, meta)
        from audioprefix.errors import CheckpointMismatch
        with pytest.raises(CheckpointMismatch) as exc:
            load_decoder_weights(_decoder(), bad)
        assert "ln_f.weight" in str(exc.value)


class TestGpt2Import:
    def _synthetic_gpt2_state(self, cfg: DecoderConfig, with_lm_head: bool):
        rng = np.random.default_rng(0)
        d, v = cfg.d_model, cfg.vocab_size
        state = {
            "wte.weight": rng.standard_normal((v, d)).astype(np.float32),
            "wpe.weight": rng.standard_normal((cfg.max_positions, d)).astype(np.float32),
            "ln_f.weight": np.ones(d, dtype=np.float32),
            "ln_f.bias": np.zeros(d, dtype=np.float32),
        }
        if with_lm_head:
            state["lm_head.weight"] = rng.standard_normal((v, d)).astype(np.float32)
        for i in range(cfg.n_layers):
            p = f"h.{i}."
            state[p + "ln_1.weight"] = np.ones(d, dtype=np.float32)
            state[p + "ln_1.bias"] = np.zeros(d, dtype=np.float32)
            state[p + "attn.c_attn.weight"] = rng.standard_normal((d, 3 * d)).astype(np.float32)
            state[p + "attn.c_attn.bias"] = np.zeros(3 * d, dtype=np.float32)
            state[p + "attn.c_proj.weight"] = rng.standard_normal((d, d)).astype(np.float32)
            state[p + "attn.c_proj.bias"] = np.zeros(d, dtype=np.float32)
            state[p + "ln_2.weight"] = np.ones(d, dtype=np.float32)
            state[p + "ln_2.bias"] = np.zeros(d, dtype=np.float32)
            state[p + "mlp.c_fc.weight"] = rng.standard_normal((d, 4 * d)).astype(np.float32)
            state[p + "mlp.c_fc.bias"] = np.zeros(4 * d, dtype=np.float32)
            state[p + "mlp.c_proj.weight"] = rng.standard_normal((4 * d, d)).astype(np.float32)
            state[p + "mlp.c_proj.bias"] = np.zeros(d, dtype=np.float32)
        return state

    def test_conv1d_weights_transposed_and_loadable(self):
        cfg = DecoderConfig.toy(len(VOCAB), d_model=16)
        state = self._synthetic_gpt2_state(cfg, with_lm_head=True)
        tensors = import_gpt2_weights(state, cfg)
        dec = FrozenDecoder(cfg)
        from audioprefix.checkpoint import load_module
        report = load_module(dec, tensors, "decoder", strict=True)
        assert report["skipped"] == []
        got = dec.blocks[0].attn.c_attn.weight.detach().numpy()
        np.testing.assert_array_equal(got, state["h.0.attn.c_attn.weight"].T)

    def test_header_tied_to_wte_when_lm_head_absent(self):
        cfg = DecoderConfig.toy(len(VOCAB), d_model=16)
        state = self._synthetic_gpt2_state(cfg, with_lm_head=False)
        tensors = import_gpt2_weights(state, cfg)
        np.testing.assert_array_equal(tensors["decoder/header.weight"],
                                      state["wte.weight"])
