"""Command-line entry point.

Subcommands: train, caption, evaluate, retrieve-index, retrieve-query,
inspect. Exit codes: 0 ok, 2 config error, 3 data error, 4 model error,
5 internal error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import errors
from .audio import StftConfig, dump_mel, fix_duration, load_waveform, log_mel
from .checkpoint import load_tensors
from .config import config_hash, load_config
from .data import (
    Vocabulary,
    build_vocabulary,
    load_manifest,
)
from .decoder import DecoderConfig, FrozenDecoder, load_decoder_weights, retune_header
from .encoder import EncoderConfig, load_pretrained
from .mapper import MapperConfig
from .metrics import (
    EvalEntry,
    evaluate_corpus,
    load_spice_sidecar,
)
from .pipeline import CaptionPipeline
from .report import plot_history, write_metric_report, write_retrieval_report
from .retrieval import (
    RetrievalIndex,
    build_index,
    load_gold_queries,
    make_embedder,
    recall_at_k,
    retrieve,
)
from .synth import build_fixture_decoder
from .trainer import TrainConfig, run_setup, train, training_pairs

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_MODEL = 4
EXIT_INTERNAL = 5

_DATA_ERRORS = (errors.MalformedManifest, errors.DuplicateAudioId,
                errors.ManifestMissing, errors.AudioLoadError,
                errors.IdMismatch, errors.EmptyCorpus,
                errors.MalformedSpiceFile)
_MODEL_ERRORS = (errors.CheckpointMismatch, errors.ShapeMismatch,
                 errors.DimensionMismatch, errors.FrozenViolation,
                 errors.VocabTooSmall, errors.LengthMismatch,
                 errors.NonFiniteLoss, errors.EmptyIndex,
                 errors.ConfigMismatch)


def _fail(code: int, exc: Exception) -> int:
    record = {"error": type(exc).__name__, "message": str(exc)}
    print(json.dumps(record), file=sys.stderr)
    return code


def _stft_from(cfg: dict) -> StftConfig:
    a = cfg["audio"]
    return StftConfig(sample_rate=a["sample_rate"], window_size=a["window_size"],
                      hop_size=a["hop_size"], n_mels=a["n_mels"],
                      fmin=a["fmin"], fmax=a["fmax"], log_offset=a["log_offset"])


def _encoder_cfg(cfg: dict) -> EncoderConfig:
    e = cfg["encoder"]
    return EncoderConfig(n_blocks=e["n_blocks"], base_channels=e["base_channels"],
                         channels=e["channels"], time_downsample=e["time_downsample"],
                         n_mels=cfg["audio"]["n_mels"], trainable=e["trainable"])


def _mapper_cfg(cfg: dict) -> MapperConfig:
    m = cfg["mapper"]
    return MapperConfig(n_temporal_prefixes=m["n_temporal_prefixes"],
                        n_global_prefixes=m["n_global_prefixes"],
                        d_model=m["d_model"], n_layers=m["n_layers"],
                        n_heads=m["n_heads"],
                        use_positional_encoding=m["use_positional_encoding"],
                        use_temporal=m["use_temporal"],
                        use_global=m["use_global"], use_mapper=m["use_mapper"])


def _train_cfg(cfg: dict) -> TrainConfig:
    t = cfg["trainer"]
    return TrainConfig(profile=t["profile"],
                       batch_size=t["batch_size"] or None,
                       weight_decay=t["weight_decay"] if t["weight_decay"] >= 0 else None,
                       audio_seconds=t["audio_seconds"] or None,
                       peak_lr=t["peak_lr"],
                       warmup_steps=t["warmup_steps"] if t["warmup_steps"] >= 0 else None,
                       max_epochs=t["max_epochs"], patience=t["patience"],
                       seed=t["seed"], header_tuning=t["setup"] == "i",
                       grad_clip=t["grad_clip"],
                       max_text_len=cfg["data"]["max_text_len"],
                       decay=t["decay"])


def cmd_train(args) -> int:
    cfg = load_config(args.config, args.set)
    chash = config_hash(cfg)
    data_cfg, dec_cfg = cfg["data"], cfg["decoder"]
    if not data_cfg["train_manifests"]:
        raise errors.ConfigError("data.train_manifests", "no training manifests")
    if cfg["mapper"]["d_model"] != dec_cfg["d_model"]:
        raise errors.ConfigError("mapper.d_model",
                                 "must equal decoder.d_model")

    test_manifest = data_cfg["test_manifest"] or data_cfg["train_manifests"][0]
    setup = run_setup(cfg["trainer"]["setup"], data_cfg["train_manifests"],
                      test_manifest, data_cfg["val_manifest"] or None)

    if dec_cfg["vocab"]:
        base_vocab = Vocabulary.load(dec_cfg["vocab"])
    else:
        base_vocab = build_vocabulary(setup.train_records,
                                      min_freq=data_cfg["min_freq"])

    if dec_cfg["weights"]:
        decoder = FrozenDecoder(DecoderConfig(
            vocab_size=len(base_vocab), d_model=dec_cfg["d_model"],
            n_layers=dec_cfg["n_layers"], n_heads=dec_cfg["n_heads"],
            max_positions=dec_cfg["max_positions"]))
        load_decoder_weights(decoder, dec_cfg["weights"])
    else:
        # no pretrained weights supplied: substitute a small frozen
        # decoder pretrained as a fixture on the training captions
        decoder = build_fixture_decoder(
            base_vocab, d_model=dec_cfg["d_model"],
            pretrain_steps=dec_cfg["fixture_pretrain_steps"],
            seed=cfg["trainer"]["seed"],
            sentences=[c for r in setup.train_records for c in r.captions])

    vocab = base_vocab
    if setup.header_tuning:
        target_vocab = build_vocabulary(setup.train_records,
                                        min_freq=data_cfg["min_freq"])
        decoder = retune_header(decoder, target_vocab, base_vocab)
        vocab = target_vocab

    pipeline = CaptionPipeline(_encoder_cfg(cfg), _mapper_cfg(cfg), decoder,
                               vocab, stft=_stft_from(cfg))
    if cfg["encoder"]["pretrained"]:
        load_pretrained(pipeline.encoder, cfg["encoder"]["pretrained"])

    train_cfg = _train_cfg(cfg)
    train_pairs, val_pairs = training_pairs(setup)
    out_dir = Path(cfg["paths"]["out_dir"])
    resolved = train_cfg.resolved()
    extra_meta = {
        "config": cfg,
        "vocab": [vocab.id_to_token(i) for i in range(len(vocab))],
        "audio_seconds": resolved.audio_seconds,
        "setup": setup.setup,
        "setup_tag": setup.tag,
        "header_tuning": setup.header_tuning,
    }
    result = train(pipeline, train_pairs, val_pairs, train_cfg, out_dir,
                   config_hash=chash,
                   max_steps=cfg["trainer"]["max_steps"] or None,
                   extra_metadata=extra_meta)
    vocab.save(out_dir / "vocab.txt")
    plot_history(result.history_path, out_dir / "history.png")
    print(f"best checkpoint: {result.best_checkpoint}")
    print(f"history: {result.history_path}")
    return EXIT_OK


def _pipeline_from_checkpoint(path) -> tuple[CaptionPipeline, dict]:
    _tensors, meta = load_tensors(path)
    if "config" not in meta or "vocab" not in meta:
        raise errors.CheckpointMismatch(str(path), "missing config/vocab metadata")
    cfg = meta["config"]
    id_to_token = meta["vocab"]
    vocab = Vocabulary(id_to_token[4:])  # specials occupy the first four ids
    dec_cfg = cfg["decoder"]
    dcfg = (DecoderConfig.toy(vocab_size=len(vocab), d_model=dec_cfg["d_model"])
            if not dec_cfg["weights"]
            else DecoderConfig(vocab_size=len(vocab), d_model=dec_cfg["d_model"],
                               n_layers=dec_cfg["n_layers"],
                               n_heads=dec_cfg["n_heads"],
                               max_positions=dec_cfg["max_positions"]))
    decoder = FrozenDecoder(dcfg)
    pipeline = CaptionPipeline(_encoder_cfg(cfg), _mapper_cfg(cfg), decoder,
                               vocab, stft=_stft_from(cfg))
    pipeline.load(path)
    pipeline.eval()
    return pipeline, meta


def _spec_for(pipeline: CaptionPipeline, meta: dict, audio_path):
    wave = load_waveform(audio_path, pipeline.stft.sample_rate)
    wave = fix_duration(wave, meta["audio_seconds"])
    return log_mel(wave, pipeline.stft)


def cmd_caption(args) -> int:
    pipeline, meta = _pipeline_from_checkpoint(args.checkpoint)
    gen = meta["config"]["generation"]
    strategy = args.strategy or gen["strategy"]
    out_fh = open(args.output, "w", encoding="utf-8") if args.output else sys.stdout
    try:
        target = Path(args.audio)
        if target.suffix.lower() in (".wav", ".wave"):
            spec = _spec_for(pipeline, meta, target)
            caption = pipeline.caption(spec.values, strategy=strategy,
                                       beam_width=gen["beam_width"],
                                       max_len=gen["max_len"])
            print(caption, file=out_fh)
        else:
            for rec in load_manifest(target):
                spec = _spec_for(pipeline, meta, rec.audio_path)
                caption = pipeline.caption(spec.values, strategy=strategy,
                                           beam_width=gen["beam_width"],
                                           max_len=gen["max_len"])
                print(json.dumps({"audio_id": rec.audio_id, "caption": caption}),
                      file=out_fh)
    finally:
        if args.output:
            out_fh.close()
    return EXIT_OK


def cmd_evaluate(args) -> int:
    candidates = {}
    with open(args.candidates, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                obj = json.loads(line)
                candidates[obj["audio_id"]] = obj["caption"]
    references = {r.audio_id: r.captions for r in load_manifest(args.references)}
    missing = set(candidates) ^ set(references)
    if missing:
        raise errors.IdMismatch(list(missing))
    corpus = [EvalEntry(audio_id=a, candidate=candidates[a],
                        references=references[a]) for a in sorted(candidates)]
    spice = load_spice_sidecar(args.spice) if args.spice else None
    metric_names = tuple(args.metrics.split(",")) if args.metrics else (
        "bleu", "rouge_l", "cider", "meteor_lite", "spider")
    report = evaluate_corpus(corpus, metrics=metric_names, spice_scores=spice)
    paths = write_metric_report(report, args.out_dir)
    for name in sorted(report.scores):
        print(f"{name}\t{report.scores[name]:.6f}")
    print(f"report: {paths['json']}")
    return EXIT_OK


def cmd_retrieve_index(args) -> int:
    pipeline, meta = _pipeline_from_checkpoint(args.checkpoint)
    gen = meta["config"]["generation"]
    captions = {}
    for rec in load_manifest(args.manifest):
        spec = _spec_for(pipeline, meta, rec.audio_path)
        captions[rec.audio_id] = pipeline.caption(
            spec.values, strategy=gen["strategy"],
            beam_width=gen["beam_width"], max_len=gen["max_len"])
    embedder = make_embedder(args.embedder)
    index = build_index(captions, embedder,
                        config_hash=meta.get("config_hash", ""))
    index.save(Path(args.output).with_suffix(".npz"))
    print(f"indexed {len(index)} audios -> {Path(args.output).with_suffix('.npz')}")
    return EXIT_OK


def cmd_retrieve_query(args) -> int:
    index = RetrievalIndex.load(Path(args.index))
    embedder = make_embedder(index.embedder_name
                             if index.embedder_name != "char-ngram-hash"
                             else "fallback")
    if args.query:
        for audio_id in retrieve(args.query, index, embedder, k=args.k):
            print(audio_id)
        return EXIT_OK
    if not args.gold:
        raise errors.ConfigError("retrieve-query", "need --query or --gold")
    queries = load_gold_queries(args.gold)
    recalls = {k: recall_at_k(queries, index, embedder, k)
               for k in (args.k_values or [1, 5, 10])}
    paths = write_retrieval_report(recalls, args.out_dir)
    for k in sorted(recalls):
        print(f"R@{k}\t{recalls[k]:.4f}")
    print(f"report: {paths['json']}")
    return EXIT_OK


def cmd_inspect(args) -> int:
    if args.dump_mel:
        from .synth import TOY_STFT
        stft = TOY_STFT if args.toy_audio else StftConfig()
        wave = load_waveform(args.dump_mel, stft.sample_rate)
        spec = log_mel(wave, stft)
        out = args.mel_out or (str(args.dump_mel) + ".mel")
        dump_mel(spec, out)
        print(f"wrote {spec.n_frames}x{spec.n_mels} mel matrix to {out}")
        return EXIT_OK
    _tensors, meta = load_tensors(args.artifact)
    stored = meta.get("config_hash", "")
    recomputed = config_hash(meta["config"]) if "config" in meta else None
    consistent = recomputed is None or stored == recomputed
    print(json.dumps({"config_hash": stored,
                      "recomputed_hash": recomputed,
                      "hash_consistent": consistent,
                      "step": meta.get("step"),
                      "seed": meta.get("seed"),
                      "profile": meta.get("profile"),
                      "setup": meta.get("setup")}, indent=2))
    return EXIT_OK if consistent else EXIT_MODEL


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="audioprefix",
        description="Audio captioning with a frozen language model "
                    "conditioned on learned audio prefixes.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train encoder + mapping networks")
    p.add_argument("--config", required=True, help="JSON config file")
    p.add_argument("--set", action="append", default=[], metavar="SEC.KEY=VAL",
                   help="override a config value (repeatable)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("caption", help="generate captions for audio")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--audio", required=True, help="WAV file or manifest")
    p.add_argument("--strategy", choices=["greedy", "beam"], default=None)
    p.add_argument("--output", default=None, help="JSON-lines output path")
    p.set_defaults(func=cmd_caption)

    p = sub.add_parser("evaluate", help="score candidate captions")
    p.add_argument("--candidates", required=True, help="JSON-lines {audio_id, caption}")
    p.add_argument("--references", required=True, help="reference manifest")
    p.add_argument("--metrics", default=None,
                   help="comma list: bleu,rouge_l,cider,meteor_lite,spider")
    p.add_argument("--spice", default=None, help="SPICE sidecar JSON-lines")
    p.add_argument("--out-dir", default="reports")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("retrieve-index", help="caption and index a database")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--embedder", default="fallback")
    p.add_argument("--output", required=True)
    p.set_defaults(func=cmd_retrieve_index)

    p = sub.add_parser("retrieve-query", help="query the retrieval index")
    p.add_argument("--index", required=True)
    p.add_argument("--query", default=None)
    p.add_argument("--gold", default=None, help="JSON-lines {query, gold_audio_id}")
    p.add_argument("--k", type=int, default=10)
    p.add_argument("--k-values", type=int, nargs="*", default=None)
    p.add_argument("--out-dir", default="reports")
    p.set_defaults(func=cmd_retrieve_query)

    p = sub.add_parser("inspect", help="inspect artifacts / dump spectrograms")
    p.add_argument("artifact", nargs="?", default=None)
    p.add_argument("--dump-mel", default=None, metavar="WAV")
    p.add_argument("--mel-out", default=None)
    p.add_argument("--toy-audio", action="store_true",
                   help="use the 16 kHz toy spectrogram profile")
    p.set_defaults(func=cmd_inspect)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except errors.ConfigError as exc:
        return _fail(EXIT_CONFIG, exc)
    except _DATA_ERRORS as exc:
        return _fail(EXIT_DATA, exc)
    except _MODEL_ERRORS as exc:
        return _fail(EXIT_MODEL, exc)
    except errors.AudioPrefixError as exc:
        return _fail(EXIT_INTERNAL, exc)


if __name__ == "__main__":
    sys.exit(main())
