import copy

import pytest
import torch

from audioprefix.data import build_vocabulary, expand_pairs, filter_split, load_manifest
from audioprefix.encoder import EncoderConfig
from audioprefix.mapper import MapperConfig
from audioprefix.pipeline import CaptionPipeline
from audioprefix.synth import TOY_STFT, build_fixture_decoder, make_toy_dataset
from audioprefix.trainer import TrainConfig, train

TOY_SECONDS = 2.0


@pytest.fixture(scope="session")
def toy_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("toyset")
    manifest = make_toy_dataset(root, n_train=8, n_val=2, n_test=2,
                                seconds=TOY_SECONDS, seed=0)
    records = load_manifest(manifest)
    return {"manifest": manifest, "records": records,
            "train": filter_split(records, "train"),
            "val": filter_split(records, "val"),
            "test": filter_split(records, "test")}


@pytest.fixture(scope="session")
def toy_vocab(toy_dataset):
    return build_vocabulary(toy_dataset["records"])


@pytest.fixture(scope="session")
def fixture_decoder(toy_dataset, toy_vocab):
    """Pretrained-then-frozen stand-in language model. Treat as read-only;
    deepcopy before mutating."""
    sentences = [c for r in toy_dataset["train"] for c in r.captions]
    return build_fixture_decoder(toy_vocab, pretrain_steps=800, seed=0,
                                 sentences=sentences)


def make_toy_pipeline(decoder, vocab, seed=0, mapper_config=None,
                      encoder_config=None):
    torch.manual_seed(seed)
    return CaptionPipeline(encoder_config or EncoderConfig.toy(),
                           mapper_config or MapperConfig.toy(),
                           decoder, vocab, stft=TOY_STFT)


@pytest.fixture(scope="session")
def memorized_run(toy_dataset, toy_vocab, fixture_decoder, tmp_path_factory):
    """One 500-step training run on the 8-sample toy set, shared by the
    acceptance criteria (frozen contract, memorization, gradients)."""
    out = tmp_path_factory.mktemp("memorized")
    pipeline = make_toy_pipeline(copy.deepcopy(fixture_decoder), toy_vocab)
    config = TrainConfig(profile="toy", peak_lr=3e-3, warmup_steps=10,
                         max_epochs=500, patience=1000, seed=0)
    result = train(pipeline, expand_pairs(toy_dataset["train"]),
                   expand_pairs(toy_dataset["val"]), config, out,
                   max_steps=500)
    return {"pipeline": pipeline, "result": result, "out": out,
            "config": config}
