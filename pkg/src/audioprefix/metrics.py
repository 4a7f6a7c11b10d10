"""Corpus-level caption metrics: BLEU 1-4, ROUGE-L, CIDEr-D, a
synonym-free METEOR variant (reported as ``meteor_lite``), and the
SPIDEr combiner over externally supplied SPICE scores.

All metrics tokenize with the same normalization as the dataset layer
(lowercase, terminal punctuation stripped); scores are sensitive to this
convention and reports record it.
"""

from __future__ import annotations

import json
import math
import warnings
from collections import Counter, defaultdict
from dataclasses import dataclass, field

from .data import normalize_caption
from .errors import EmptyCorpus, MalformedSpiceFile, SingleDocumentCorpusWarning
from .stemmer import porter_stem

CIDER_SIGMA = 6.0
ROUGE_BETA = 1.2


@dataclass(frozen=True)
class EvalEntry:
    audio_id: str
    candidate: str
    references: tuple[str, ...]

    def __post_init__(self):
        if not self.references:
            raise ValueError("every entry needs at least one reference")


def load_eval_corpus(path) -> list[EvalEntry]:
    entries = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            obj = json.loads(line)
            entries.append(EvalEntry(audio_id=obj["audio_id"],
                                     candidate=obj["candidate"],
                                     references=tuple(obj["references"])))
    return entries


def _tokens(text: str) -> list[str]:
    return normalize_caption(text).split()


def _ngrams(tokens: list[str], n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


# --- BLEU ---

def bleu(corpus: list[EvalEntry], max_n: int = 4) -> dict[str, float]:
    """Corpus BLEU with clipped counts, closest-reference brevity penalty,
    no smoothing."""
    if not corpus:
        raise EmptyCorpus("BLEU needs a non-empty corpus")
    correct = [0] * max_n
    guess = [0] * max_n
    cand_len = 0
    ref_len = 0
    for entry in corpus:
        cand = _tokens(entry.candidate)
        refs = [_tokens(r) for r in entry.references]
        cand_len += len(cand)
        ref_len += min((abs(len(r) - len(cand)), len(r)) for r in refs)[1]
        for n in range(1, max_n + 1):
            counts = _ngrams(cand, n)
            max_ref = Counter()
            for r in refs:
                for ng, c in _ngrams(r, n).items():
                    max_ref[ng] = max(max_ref[ng], c)
            guess[n - 1] += max(0, len(cand) - n + 1)
            correct[n - 1] += sum(min(c, max_ref[ng]) for ng, c in counts.items())
    bp = 1.0 if cand_len > ref_len else (
        math.exp(1.0 - ref_len / cand_len) if cand_len > 0 else 0.0)
    scores = {}
    for n in range(1, max_n + 1):
        precisions = [correct[k] / guess[k] if guess[k] > 0 else 0.0
                      for k in range(n)]
        if any(p == 0.0 for p in precisions):
            scores[f"bleu_{n}"] = 0.0
        else:
            log_mean = sum(math.log(p) for p in precisions) / n
            scores[f"bleu_{n}"] = bp * math.exp(log_mean)
    return scores


# --- ROUGE-L ---

def _lcs_length(a: list[str], b: list[str]) -> int:
    if not a or not b:
        return 0
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b, 1):
            cur.append(prev[j - 1] + 1 if x == y else max(prev[j], cur[j - 1]))
        prev = cur
    return prev[-1]


def rouge_l(corpus: list[EvalEntry], beta: float = ROUGE_BETA) -> float:
    """LCS F-measure averaged over the corpus; per-sample max precision
    and recall over references, recall-weighted by beta."""
    if not corpus:
        raise EmptyCorpus("ROUGE-L needs a non-empty corpus")
    total = 0.0
    for entry in corpus:
        cand = _tokens(entry.candidate)
        prec_max = rec_max = 0.0
        for ref in entry.references:
            ref_toks = _tokens(ref)
            lcs = _lcs_length(cand, ref_toks)
            if cand:
                prec_max = max(prec_max, lcs / len(cand))
            if ref_toks:
                rec_max = max(rec_max, lcs / len(ref_toks))
        if prec_max > 0 and rec_max > 0:
            total += ((1 + beta ** 2) * prec_max * rec_max
                      / (rec_max + beta ** 2 * prec_max))
    return total / len(corpus)


# --- CIDEr-D ---

def cider(corpus: list[EvalEntry], max_n: int = 4,
          sigma: float = CIDER_SIGMA) -> float:
    """CIDEr-D: TF-IDF weighted n-gram cosine with a length penalty,
    corpus document frequencies, scaled to [0, 10]."""
    if not corpus:
        raise EmptyCorpus("CIDEr needs a non-empty corpus")
    if len(corpus) < 2:
        warnings.warn("IDF is degenerate with a single scored audio",
                      SingleDocumentCorpusWarning)
    n_docs = len(corpus)
    doc_freq = [defaultdict(int) for _ in range(max_n)]
    for entry in corpus:
        for n in range(1, max_n + 1):
            seen = set()
            for ref in entry.references:
                seen.update(_ngrams(_tokens(ref), n).keys())
            for ng in seen:
                doc_freq[n - 1][ng] += 1

    def tfidf_vec(tokens):
        vecs, norms = [], []
        for n in range(1, max_n + 1):
            counts = _ngrams(tokens, n)
            vec = {}
            for ng, c in counts.items():
                idf = math.log(n_docs) - math.log(max(1.0, doc_freq[n - 1][ng]))
                vec[ng] = c * idf
            vecs.append(vec)
            norms.append(math.sqrt(sum(v * v for v in vec.values())))
        return vecs, norms

    total = 0.0
    for entry in corpus:
        cand = _tokens(entry.candidate)
        cand_vec, cand_norm = tfidf_vec(cand)
        score_n = [0.0] * max_n
        for ref in entry.references:
            ref_toks = _tokens(ref)
            ref_vec, ref_norm = tfidf_vec(ref_toks)
            delta = len(cand) - len(ref_toks)
            penalty = math.exp(-(delta ** 2) / (2 * sigma ** 2))
            for n in range(max_n):
                val = sum(min(cand_vec[n][ng], ref_vec[n].get(ng, 0.0))
                          * ref_vec[n].get(ng, 0.0)
                          for ng in cand_vec[n])
                if cand_norm[n] > 0 and ref_norm[n] > 0:
                    val /= cand_norm[n] * ref_norm[n]
                score_n[n] += val * penalty
        per_ref = [s / len(entry.references) for s in score_n]
        total += 10.0 * sum(per_ref) / max_n
    return total / len(corpus)


# --- METEOR (synonym-free variant) ---

def _meteor_align(cand: list[str], ref: list[str]) -> list[tuple[int, int]]:
    """Two-stage alignment: exact surface matches first, then Porter-stem
    matches on the leftovers; candidate order, earliest free reference."""
    used_ref = [False] * len(ref)
    pairs = {}
    for i, w in enumerate(cand):
        for j, r in enumerate(ref):
            if not used_ref[j] and w == r:
                used_ref[j] = True
                pairs[i] = j
                break
    ref_stems = [porter_stem(r) for r in ref]
    for i, w in enumerate(cand):
        if i in pairs:
            continue
        ws = porter_stem(w)
        for j in range(len(ref)):
            if not used_ref[j] and ws == ref_stems[j]:
                used_ref[j] = True
                pairs[i] = j
                break
    return sorted(pairs.items())


def _count_chunks(pairs: list[tuple[int, int]]) -> int:
    chunks = 0
    prev = None
    for i, j in pairs:
        if prev is None or i != prev[0] + 1 or j != prev[1] + 1:
            chunks += 1
        prev = (i, j)
    return chunks


def meteor_lite(corpus: list[EvalEntry]) -> float:
    """METEOR without synonym/paraphrase modules: exact + stem matching,
    Fmean = 10PR/(R+9P), penalty 0.5*(chunks/matches)^3; per-sample best
    reference, corpus mean."""
    if not corpus:
        raise EmptyCorpus("METEOR needs a non-empty corpus")
    total = 0.0
    for entry in corpus:
        cand = _tokens(entry.candidate)
        best = 0.0
        for ref in entry.references:
            ref_toks = _tokens(ref)
            pairs = _meteor_align(cand, ref_toks)
            m = len(pairs)
            if m == 0 or not cand or not ref_toks:
                continue
            p = m / len(cand)
            r = m / len(ref_toks)
            fmean = 10 * p * r / (r + 9 * p)
            penalty = 0.5 * (_count_chunks(pairs) / m) ** 3
            best = max(best, fmean * (1 - penalty))
        total += best
    return total / len(corpus)


# --- SPIDEr ---

def load_spice_sidecar(path) -> dict[str, float]:
    scores = {}
    try:
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                line = line.strip()
                if not line:
                    continue
                obj = json.loads(line)
                scores[obj["audio_id"]] = float(obj["spice"])
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise MalformedSpiceFile(f"{path}: {exc}") from exc
    return scores


def spider(cider_score: float, spice_scores: dict[str, float] | None) -> dict:
    """Arithmetic mean of CIDEr and SPICE; flagged partial when SPICE is
    absent (never silently substituted)."""
    if spice_scores:
        spice_mean = sum(spice_scores.values()) / len(spice_scores)
        return {"spider": (cider_score + spice_mean) / 2.0,
                "spice": spice_mean, "spice_missing": False}
    return {"spider": None, "spice": None, "spice_missing": True,
            "cider_only": cider_score}


# --- report assembly ---

@dataclass
class MetricReport:
    scores: dict[str, float] = field(default_factory=dict)
    partial_flags: dict[str, bool] = field(default_factory=dict)
    config: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"scores": self.scores, "partial_flags": self.partial_flags,
                "config": self.config}


def evaluate_corpus(corpus: list[EvalEntry],
                    metrics: tuple[str, ...] = ("bleu", "rouge_l", "cider",
                                                "meteor_lite", "spider"),
                    spice_scores: dict[str, float] | None = None) -> MetricReport:
    report = MetricReport(config={"tokenization": "lowercase_strip_punct"})
    if "bleu" in metrics:
        report.scores.update(bleu(corpus))
    if "rouge_l" in metrics:
        report.scores["rouge_l"] = rouge_l(corpus)
    cider_score = None
    if "cider" in metrics or "spider" in metrics:
        cider_score = cider(corpus)
        report.scores["cider"] = cider_score
    if "spider" in metrics:
        combined = spider(cider_score, spice_scores)
        report.partial_flags["spice_missing"] = combined["spice_missing"]
        if combined["spice_missing"]:
            report.scores["spider_cider_only"] = combined["cider_only"]
        else:
            report.scores["spice"] = combined["spice"]
            report.scores["spider"] = combined["spider"]
    if "meteor_lite" in metrics:
        report.scores["meteor_lite"] = meteor_lite(corpus)
    return report
