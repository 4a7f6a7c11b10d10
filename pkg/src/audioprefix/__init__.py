"""Audio captioning with a frozen language model conditioned on learned
audio prefixes: encoder, mapping networks, trainer, metrics, retrieval."""

__version__ = "0.1.0"

from .audio import LogMelSpectrogram, StftConfig, Waveform, fix_duration, load_waveform, log_mel
from .data import Batch, CaptionRecord, TokenSequence, Vocabulary, build_vocabulary, collate, load_manifest, tokenize
from .decoder import DecoderConfig, FrozenDecoder, caption_loss, generate, retune_header, verify_frozen
from .encoder import AudioEncoder, EncoderConfig, encode, load_pretrained
from .mapper import GlobalMapper, MapperConfig, PrefixNetwork, TemporalMapper, concat_prefixes
from .metrics import EvalEntry, bleu, cider, evaluate_corpus, meteor_lite, rouge_l, spider
from .pipeline import CaptionPipeline
from .retrieval import RetrievalIndex, build_index, recall_at_k, retrieve
from .trainer import TrainConfig, lr_at, run_setup, train
