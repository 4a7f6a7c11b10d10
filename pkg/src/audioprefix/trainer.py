"""Training loop: AdamW over the non-frozen parameters, peak-then-decay
learning rate, early stopping on validation loss, resumable checkpoints,
and the three experiment setups (homogeneous, cross-dataset, merged).
"""

from __future__ import annotations

import io
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from .checkpoint import load_tensors
from .data import (
    Batch,
    CaptionRecord,
    build_vocabulary,
    collate,
    expand_pairs,
    filter_split,
    load_manifest,
)
from .decoder import snapshot_params, verify_frozen
from .errors import ManifestMissing, NonFiniteLoss
from .pipeline import CaptionPipeline

DATASET_PROFILES = {
    "clotho": {"batch_size": 55, "weight_decay": 0.02, "audio_seconds": 30.0},
    "audiocaps": {"batch_size": 75, "weight_decay": 0.01, "audio_seconds": 10.0},
    # merged training pads every clip to the superset duration
    "merged": {"batch_size": 55, "weight_decay": 0.02, "audio_seconds": 30.0},
    "toy": {"batch_size": 8, "weight_decay": 0.01, "audio_seconds": 2.0},
}


@dataclass(frozen=True)
class TrainConfig:
    profile: str = "toy"
    batch_size: int | None = None       # default from profile
    weight_decay: float | None = None
    audio_seconds: float | None = None
    peak_lr: float = 5e-5
    warmup_steps: int | None = None     # default: 5% of total steps
    max_epochs: int = 50
    patience: int = 5
    seed: int = 0
    header_tuning: bool = False
    grad_clip: float = 1.0
    max_text_len: int = 32
    decay: str = "linear"               # or "cosine"

    def __post_init__(self):
        if self.profile not in DATASET_PROFILES:
            raise ValueError(f"unknown dataset profile {self.profile!r}")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")

    def resolved(self) -> "TrainConfig":
        prof = DATASET_PROFILES[self.profile]
        return replace(
            self,
            batch_size=self.batch_size or prof["batch_size"],
            weight_decay=(self.weight_decay if self.weight_decay is not None
                          else prof["weight_decay"]),
            audio_seconds=self.audio_seconds or prof["audio_seconds"],
        )


def lr_at(step: int, peak_lr: float, warmup_steps: int, total_steps: int,
          decay: str = "linear") -> float:
    """Linear warmup 0 -> peak over warmup_steps, then decay to 0 at
    total_steps."""
    if step < 0:
        raise ValueError("step must be >= 0")
    if step <= warmup_steps:
        return peak_lr * step / max(warmup_steps, 1)
    if step >= total_steps:
        return 0.0
    frac = (step - warmup_steps) / max(total_steps - warmup_steps, 1)
    if decay == "cosine":
        return peak_lr * 0.5 * (1.0 + math.cos(math.pi * frac))
    return peak_lr * (1.0 - frac)


@dataclass
class TrainResult:
    best_checkpoint: Path
    last_checkpoint: Path
    history_path: Path
    history: list[dict] = field(default_factory=list)
    stopped_early: bool = False
    frozen_report: dict = field(default_factory=dict)


def prepare_batches(pairs, vocab, stft, audio_seconds, max_text_len) -> Batch:
    """Materialize the whole split once; batches then slice these arrays."""
    return collate(pairs, vocab, stft, audio_seconds, max_text_len)


def _slice_batch(data: Batch, idx: np.ndarray) -> Batch:
    return Batch(spectrograms=data.spectrograms[idx],
                 token_matrix=data.token_matrix[idx],
                 token_mask=data.token_mask[idx],
                 record_ids=[data.record_ids[i] for i in idx])


def _optimizer_blob(optimizer) -> np.ndarray:
    buf = io.BytesIO()
    torch.save(optimizer.state_dict(), buf)
    return np.frombuffer(buf.getvalue(), dtype=np.uint8)


def _load_optimizer_blob(optimizer, blob: np.ndarray) -> None:
    optimizer.load_state_dict(torch.load(io.BytesIO(bytes(blob)),
                                         weights_only=False))


def train(pipeline: CaptionPipeline, train_pairs, val_pairs, config: TrainConfig,
          out_dir, config_hash: str = "", resume_from=None,
          max_steps: int | None = None, val_loss_fn=None,
          extra_metadata: dict | None = None,
          halt_step: int | None = None) -> TrainResult:
    """Run the optimization loop; returns paths to best/last checkpoints.

    Only parameters with requires_grad participate in updates; frozen
    decoder groups are verified unchanged at the end.
    """
    if not train_pairs or not val_pairs:
        raise ValueError("train and validation splits must be non-empty")
    cfg = config.resolved()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    torch.set_num_threads(1)  # bitwise-reproducible reductions

    train_data = prepare_batches(train_pairs, pipeline.vocab, pipeline.stft,
                                 cfg.audio_seconds, cfg.max_text_len)
    val_data = prepare_batches(val_pairs, pipeline.vocab, pipeline.stft,
                               cfg.audio_seconds, cfg.max_text_len)

    n = len(train_pairs)
    steps_per_epoch = math.ceil(n / cfg.batch_size)
    total_steps = cfg.max_epochs * steps_per_epoch
    if max_steps is not None:
        total_steps = min(total_steps, max_steps)
    warmup = cfg.warmup_steps if cfg.warmup_steps is not None else max(1, total_steps // 20)

    trainable = [p for p in pipeline.parameters() if p.requires_grad]
    optimizer = torch.optim.AdamW(trainable, lr=cfg.peak_lr,
                                  weight_decay=cfg.weight_decay)

    frozen_snapshot = snapshot_params(pipeline.decoder)
    step = 0
    best_val = float("inf")
    epochs_since_improvement = 0
    history: list[dict] = []
    if resume_from is not None:
        report = pipeline.load(resume_from)
        meta = report["metadata"]
        step = meta["step"]
        best_val = meta.get("best_val_loss", float("inf"))
        epochs_since_improvement = meta.get("epochs_since_improvement", 0)
        tensors, _ = load_tensors(resume_from)
        if "optim/state" in tensors:
            _load_optimizer_blob(optimizer, tensors["optim/state"])

    history_path = out_dir / "history.jsonl"
    best_path = out_dir / "best.npz"
    last_path = out_dir / "last.npz"
    hist_fh = open(history_path, "a" if resume_from else "w", encoding="utf-8")

    def log(entry: dict):
        history.append(entry)
        hist_fh.write(json.dumps(entry) + "\n")
        hist_fh.flush()

    def metadata():
        meta = {"config_hash": config_hash, "step": step, "seed": cfg.seed,
                "best_val_loss": best_val,
                "epochs_since_improvement": epochs_since_improvement,
                "profile": cfg.profile}
        if extra_metadata:
            meta.update(extra_metadata)
        return meta

    def save_checkpoint(path):
        pipeline.save(path, metadata(),
                      extra_tensors={"optim/state": _optimizer_blob(optimizer)})

    def val_loss() -> float:
        if val_loss_fn is not None:
            return float(val_loss_fn(pipeline))
        pipeline.eval()
        with torch.no_grad():
            losses = []
            for start in range(0, len(val_pairs), cfg.batch_size):
                idx = np.arange(start, min(start + cfg.batch_size, len(val_pairs)))
                losses.append(float(pipeline.loss_on_batch(_slice_batch(val_data, idx))))
        pipeline.train()
        return float(np.mean(losses))

    stopped_early = False
    pipeline.train()
    while step < total_steps:
        epoch = step // steps_per_epoch
        perm = np.random.default_rng([cfg.seed, epoch]).permutation(n)
        epoch_end = min((epoch + 1) * steps_per_epoch, total_steps)
        while step < epoch_end:
            # reseed per step so resumed runs replay identically
            torch.manual_seed(cfg.seed * 1_000_003 + step)
            pos = step - epoch * steps_per_epoch
            idx = perm[pos * cfg.batch_size:(pos + 1) * cfg.batch_size]
            lr = lr_at(step + 1, cfg.peak_lr, warmup, total_steps, cfg.decay)
            for group in optimizer.param_groups:
                group["lr"] = lr
            optimizer.zero_grad()
            loss = pipeline.loss_on_batch(_slice_batch(train_data, idx))
            if not torch.isfinite(loss):
                hist_fh.close()
                raise NonFiniteLoss(step)
            loss.backward()
            torch.nn.utils.clip_grad_norm_(trainable, cfg.grad_clip)
            optimizer.step()
            step += 1
            log({"step": step, "lr": lr, "train_loss": float(loss.detach())})
            if halt_step is not None and step >= halt_step:
                break
        if halt_step is not None and step >= halt_step:
            break

        vl = val_loss()
        log({"epoch": epoch, "val_loss": vl})
        if vl < best_val:
            best_val = vl
            epochs_since_improvement = 0
            save_checkpoint(best_path)
        else:
            epochs_since_improvement += 1
            if epochs_since_improvement >= cfg.patience:
                stopped_early = True
                break

    save_checkpoint(last_path)
    if not best_path.exists():
        save_checkpoint(best_path)
    hist_fh.close()
    frozen_report = verify_frozen(pipeline.decoder, frozen_snapshot)
    return TrainResult(best_checkpoint=best_path, last_checkpoint=last_path,
                       history_path=history_path, history=history,
                       stopped_early=stopped_early, frozen_report=frozen_report)


@dataclass
class SetupResult:
    setup: str
    tag: str                       # in-domain / cross-domain / merged
    header_tuning: bool
    train_records: list[CaptionRecord]
    val_records: list[CaptionRecord]
    test_records: list[CaptionRecord]
    vocab_source: str              # "target-dataset" or "decoder-native"


def run_setup(setup: str, train_manifests: list, test_manifest,
              val_manifest=None) -> SetupResult:
    """Resolve manifests and flags for experiment setups i/ii/iii.

    (i) homogeneous train/test with target-vocabulary header tuning;
    (ii) train on one dataset, test on the other (cross-domain);
    (iii) concatenated training manifests, no header tuning.
    """
    if setup not in ("i", "ii", "iii"):
        raise ValueError(f"unknown setup {setup!r}")
    for path in list(train_manifests) + [test_manifest] + (
            [val_manifest] if val_manifest else []):
        if not Path(path).exists():
            raise ManifestMissing(str(path))

    if setup in ("i", "ii") and len(train_manifests) != 1:
        raise ValueError(f"setup {setup} takes exactly one training manifest")
    records: list[CaptionRecord] = []
    for path in train_manifests:
        records.extend(load_manifest(path))
    test_records = filter_split(load_manifest(test_manifest), "test")
    if val_manifest:
        val_records = filter_split(load_manifest(val_manifest), "val")
    else:
        val_records = filter_split(records, "val")
    train_records = filter_split(records, "train")

    tag = {"i": "in-domain", "ii": "cross-domain", "iii": "merged"}[setup]
    header_tuning = setup == "i"
    return SetupResult(setup=setup, tag=tag, header_tuning=header_tuning,
                       train_records=train_records, val_records=val_records,
                       test_records=test_records,
                       vocab_source="target-dataset" if header_tuning
                       else "decoder-native")


def training_vocab(result: SetupResult, min_freq: int = 1):
    return build_vocabulary(result.train_records, min_freq=min_freq)


def training_pairs(result: SetupResult):
    return expand_pairs(result.train_records), expand_pairs(result.val_records)
