import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from audioprefix.data import (
    CaptionRecord,
    Vocabulary,
    build_vocabulary,
    collate,
    detokenize,
    expand_pairs,
    filter_split,
    load_manifest,
    normalize_caption,
    tokenize,
    write_manifest,
)
from audioprefix.errors import (
    AudioLoadError,
    DuplicateAudioId,
    EmptyCorpus,
    MalformedManifest,
)
from audioprefix.synth import TOY_STFT


def _write_manifest(path, rows):
    with open(path, "w") as fh:
        for row in rows:
            fh.write(json.dumps(row) + "\n")


def _rec(caption="a dog barks", split="train", audio_id="x"):
    return CaptionRecord(audio_id=audio_id, audio_path="none.wav",
                         captions=(caption,), split=split)


class TestLoadManifest:
    def test_three_lines_in_order(self, tmp_path):
        rows = [{"audio_id": f"a{i}", "audio": f"a{i}.wav",
                 "captions": [f"caption {i}"], "split": "train"}
                for i in range(3)]
        path = tmp_path / "m.jsonl"
        _write_manifest(path, rows)
        records = load_manifest(path)
        assert [r.audio_id for r in records] == ["a0", "a1", "a2"]

    def test_empty_captions_reports_line(self, tmp_path):
        rows = [{"audio_id": "a", "audio": "a.wav", "captions": ["ok"], "split": "train"},
                {"audio_id": "b", "audio": "b.wav", "captions": [], "split": "train"}]
        path = tmp_path / "m.jsonl"
        _write_manifest(path, rows)
        with pytest.raises(MalformedManifest) as exc:
            load_manifest(path)
        assert exc.value.line == 2

    def test_duplicate_audio_id(self, tmp_path):
        rows = [{"audio_id": "a", "audio": "a.wav", "captions": ["x y"], "split": "train"},
                {"audio_id": "a", "audio": "b.wav", "captions": ["z w"], "split": "val"}]
        path = tmp_path / "m.jsonl"
        _write_manifest(path, rows)
        with pytest.raises(DuplicateAudioId):
            load_manifest(path)

    def test_split_filtering(self, tmp_path):
        rows = [{"audio_id": f"a{i}", "audio": "a.wav", "captions": ["c c"],
                 "split": s} for i, s in enumerate(["train", "train", "val", "test"])]
        path = tmp_path / "m.jsonl"
        _write_manifest(path, rows)
        records = load_manifest(path)
        assert (len(filter_split(records, "train")),
                len(filter_split(records, "val")),
                len(filter_split(records, "test"))) == (2, 1, 1)

    def test_round_trip_byte_identical(self, tmp_path):
        rows = [{"audio_id": f"a{i}", "audio": f"a{i}.wav",
                 "captions": ["one two", "three four"], "split": "train"}
                for i in range(4)]
        p1 = tmp_path / "m1.jsonl"
        p2 = tmp_path / "m2.jsonl"
        _write_manifest(p1, rows)
        write_manifest(load_manifest(p1), p2)
        # canonicalize the source the same way before comparing
        p3 = tmp_path / "m3.jsonl"
        write_manifest(load_manifest(p2), p3)
        assert p2.read_bytes() == p3.read_bytes()


class TestVocabulary:
    def test_min_freq_two(self):
        records = [_rec("a dog barks", audio_id="1"), _rec("a dog runs", audio_id="2")]
        vocab = build_vocabulary(records, min_freq=2)
        assert set(vocab.non_special_tokens()) == {"a", "dog"}

    def test_min_freq_one_keeps_all(self):
        vocab = build_vocabulary([_rec("a dog barks loudly")], min_freq=1)
        assert set(vocab.non_special_tokens()) == {"a", "dog", "barks", "loudly"}

    def test_empty_corpus(self):
        with pytest.raises(EmptyCorpus):
            build_vocabulary([])

    def test_deterministic_ordering(self):
        records = [_rec("b a b c", audio_id="1"), _rec("c a", audio_id="2")]
        v1 = build_vocabulary(records)
        v2 = build_vocabulary(records)
        assert [v1.id_to_token(i) for i in range(len(v1))] == \
               [v2.id_to_token(i) for i in range(len(v2))]
        # freq desc, lexicographic ties: b=2 c=2 a=2 -> a, b, c
        assert v1.non_special_tokens() == ["a", "b", "c"]

    def test_specials_distinct(self, toy_vocab):
        ids = {toy_vocab.bos_id, toy_vocab.eos_id, toy_vocab.pad_id, toy_vocab.unk_id}
        assert len(ids) == 4

    def test_file_round_trip(self, tmp_path, toy_vocab):
        path = tmp_path / "vocab.txt"
        toy_vocab.save(path)
        loaded = Vocabulary.load(path)
        assert [loaded.id_to_token(i) for i in range(len(loaded))] == \
               [toy_vocab.id_to_token(i) for i in range(len(toy_vocab))]


class TestTokenize:
    def test_direct_mapping(self):
        vocab = Vocabulary(["a", "dog", "barks"])
        seq = tokenize("a dog barks", vocab)
        assert seq.tokens == (vocab.bos_id, vocab.token_to_id("a"),
                              vocab.token_to_id("dog"), vocab.token_to_id("barks"),
                              vocab.eos_id)

    def test_oov_becomes_unk(self):
        vocab = Vocabulary(["a", "dog"])
        seq = tokenize("a cat", vocab)
        assert seq.tokens[2] == vocab.unk_id

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.sampled_from(["a", "dog", "cat", "barks", "runs",
                                     "loudly", "rain", "falls"]),
                    min_size=1, max_size=10))
    def test_round_trip(self, words):
        text = " ".join(words)
        vocab = Vocabulary(sorted(set(words)))
        assert detokenize(tokenize(text, vocab), vocab) == normalize_caption(text)


class TestCollate:
    def test_shapes_and_mask(self, toy_dataset, toy_vocab):
        recs = toy_dataset["train"][:2]
        pairs = expand_pairs(recs)
        batch = collate(pairs, toy_vocab, TOY_STFT, 2.0, max_text_len=12)
        assert batch.token_matrix.shape == (2, 12)
        lengths = batch.token_mask.sum(axis=1)
        # BOS + words + EOS per caption
        expected = [len(normalize_caption(r.captions[0]).split()) + 2 for r in recs]
        assert sorted(lengths.tolist()) == sorted(expected)
        assert batch.spectrograms.shape[0] == 2

    def test_single_record(self, toy_dataset, toy_vocab):
        batch = collate(expand_pairs(toy_dataset["train"][:1]), toy_vocab,
                        TOY_STFT, 2.0, max_text_len=16)
        assert batch.spectrograms.shape[0] == 1
        assert batch.spectrograms.shape[2] == TOY_STFT.n_mels

    def test_unreadable_audio_carries_id(self, toy_vocab):
        rec = CaptionRecord(audio_id="ghost", audio_path="missing.wav",
                            captions=("a dog barks",), split="train")
        with pytest.raises(AudioLoadError) as exc:
            collate([(rec, rec.captions[0])], toy_vocab, TOY_STFT, 2.0, 16)
        assert exc.value.audio_id == "ghost"

    def test_pad_positions_masked(self, toy_dataset, toy_vocab):
        batch = collate(expand_pairs(toy_dataset["train"][:2]), toy_vocab,
                        TOY_STFT, 2.0, max_text_len=14)
        assert np.all(batch.token_matrix[~batch.token_mask] == toy_vocab.pad_id)
