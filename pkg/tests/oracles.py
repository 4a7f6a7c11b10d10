"""Brute-force definitional metric implementations used as independent
oracles. Deliberately naive: explicit loops, no shared code with the
library beyond the tokenization convention."""

import math

from audioprefix.data import normalize_caption
from audioprefix.stemmer import porter_stem


def toks(text):
    return normalize_caption(text).split()


def ngram_list(words, n):
    return [tuple(words[i:i + n]) for i in range(len(words) - n + 1)]


def count(items, item):
    return sum(1 for x in items if x == item)


def bleu_oracle(corpus, max_n=4):
    correct = [0] * max_n
    guess = [0] * max_n
    cand_total = 0
    ref_total = 0
    for entry in corpus:
        cand = toks(entry.candidate)
        refs = [toks(r) for r in entry.references]
        cand_total += len(cand)
        # closest reference length; shorter wins ties
        best = None
        for r in refs:
            key = (abs(len(r) - len(cand)), len(r))
            if best is None or key < best:
                best = key
        ref_total += best[1]
        for n in range(1, max_n + 1):
            cand_ngrams = ngram_list(cand, n)
            guess[n - 1] += len(cand_ngrams)
            for ng in set(cand_ngrams):
                clipped = max(count(ngram_list(r, n), ng) for r in refs)
                correct[n - 1] += min(count(cand_ngrams, ng), clipped)
    if cand_total == 0:
        bp = 0.0
    elif cand_total > ref_total:
        bp = 1.0
    else:
        bp = math.exp(1.0 - ref_total / cand_total)
    out = {}
    for n in range(1, max_n + 1):
        prod = 1.0
        zero = False
        for k in range(n):
            if guess[k] == 0 or correct[k] == 0:
                zero = True
                break
            prod *= correct[k] / guess[k]
        out[f"bleu_{n}"] = 0.0 if zero else bp * prod ** (1.0 / n)
    return out


def lcs_oracle(a, b):
    # plain quadratic table, filled cell by cell
    table = [[0] * (len(b) + 1) for _ in range(len(a) + 1)]
    for i in range(1, len(a) + 1):
        for j in range(1, len(b) + 1):
            if a[i - 1] == b[j - 1]:
                table[i][j] = table[i - 1][j - 1] + 1
            else:
                table[i][j] = max(table[i - 1][j], table[i][j - 1])
    return table[len(a)][len(b)]


def rouge_l_oracle(corpus, beta=1.2):
    total = 0.0
    for entry in corpus:
        cand = toks(entry.candidate)
        p_best = 0.0
        r_best = 0.0
        for ref in entry.references:
            r = toks(ref)
            lcs = lcs_oracle(cand, r)
            if cand:
                p_best = max(p_best, lcs / len(cand))
            if r:
                r_best = max(r_best, lcs / len(r))
        if p_best > 0 and r_best > 0:
            total += ((1 + beta * beta) * p_best * r_best
                      / (r_best + beta * beta * p_best))
    return total / len(corpus)


def cider_oracle(corpus, max_n=4, sigma=6.0):
    n_docs = len(corpus)

    def doc_freq(ng, n):
        df = 0
        for entry in corpus:
            if any(ng in ngram_list(toks(r), n) for r in entry.references):
                df += 1
        return df

    def vec_and_norm(words, n):
        grams = ngram_list(words, n)
        vec = {}
        for ng in set(grams):
            idf = math.log(n_docs) - math.log(max(1.0, doc_freq(ng, n)))
            vec[ng] = count(grams, ng) * idf
        norm = math.sqrt(sum(v * v for v in vec.values()))
        return vec, norm

    total = 0.0
    for entry in corpus:
        cand = toks(entry.candidate)
        per_n = [0.0] * max_n
        for ref in entry.references:
            r = toks(ref)
            penalty = math.exp(-((len(cand) - len(r)) ** 2) / (2 * sigma * sigma))
            for n in range(1, max_n + 1):
                cv, cn = vec_and_norm(cand, n)
                rv, rn = vec_and_norm(r, n)
                num = 0.0
                for ng, v in cv.items():
                    num += min(v, rv.get(ng, 0.0)) * rv.get(ng, 0.0)
                if cn > 0 and rn > 0:
                    num /= cn * rn
                per_n[n - 1] += num * penalty
        sample = sum(s / len(entry.references) for s in per_n) / max_n
        total += 10.0 * sample
    return total / len(corpus)


def meteor_oracle(corpus):
    total = 0.0
    for entry in corpus:
        cand = toks(entry.candidate)
        best = 0.0
        for ref in entry.references:
            r = toks(ref)
            # stage 1: exact, candidate order, earliest free reference slot
            taken = set()
            alignment = []
            for i in range(len(cand)):
                for j in range(len(r)):
                    if j not in taken and cand[i] == r[j]:
                        taken.add(j)
                        alignment.append((i, j))
                        break
            # stage 2: stems on whatever is left
            matched_cand = {i for i, _ in alignment}
            for i in range(len(cand)):
                if i in matched_cand:
                    continue
                for j in range(len(r)):
                    if j not in taken and porter_stem(cand[i]) == porter_stem(r[j]):
                        taken.add(j)
                        alignment.append((i, j))
                        break
            alignment.sort()
            m = len(alignment)
            if m == 0 or not cand or not r:
                continue
            p = m / len(cand)
            rec = m / len(r)
            fmean = 10.0 * p * rec / (rec + 9.0 * p)
            # count chunks by walking the alignment
            chunks = 1
            for k in range(1, m):
                ci, cj = alignment[k]
                pi, pj = alignment[k - 1]
                if not (ci == pi + 1 and cj == pj + 1):
                    chunks += 1
            score = fmean * (1.0 - 0.5 * (chunks / m) ** 3)
            if score > best:
                best = score
        total += best
    return total / len(corpus)
