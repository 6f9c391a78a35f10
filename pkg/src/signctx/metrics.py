"""Corpus BLEU, ROUGE-L F1 and chrF written from their reference definitions.

BLEU follows the sacreBLEU defaults: 13a tokenisation (here also lowercased),
corpus-pooled clipped n-gram counts, ``exp`` smoothing of zero precisions and
the usual brevity penalty. chrF pools character n-gram statistics over the
corpus, averages precision and recall over orders 1..6, and combines them
with beta = 2; whitespace is removed first.
"""

from __future__ import annotations

import math
import re
from collections import Counter
from typing import Iterable, Sequence

BLEU_SIGNATURE = "bleu|tok:13a-lc|smooth:exp|refs:1"
CHRF_SIGNATURE = "chrf|order:6|beta:2|nows"
ROUGE_SIGNATURE = "rougeL|f1|tok:13a-lc"

Pair = tuple  # (hypothesis, reference), each a string or a token list


def _text(x) -> str:
    return x if isinstance(x, str) else " ".join(x)


def tokenize_13a(line: str) -> list[str]:
    norm = line.replace("<skipped>", "").replace("-\n", "").replace("\n", " ")
    norm = norm.replace("&quot;", '"').replace("&amp;", "&").replace("&lt;", "<").replace("&gt;", ">")
    norm = f" {norm} "
    norm = re.sub(r"([\{-\~\[-\` -\&\(-\+\:-\@\/])", r" \1 ", norm)
    norm = re.sub(r"([^0-9])([\.,])", r"\1 \2 ", norm)
    norm = re.sub(r"([\.,])([^0-9])", r" \1 \2", norm)
    norm = re.sub(r"([0-9])(-)", r"\1 \2 ", norm)
    return norm.split()


def metric_tokens(x) -> list[str]:
    return tokenize_13a(_text(x).lower())


def _ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def bleu_statistics(pairs: Iterable[Pair], max_n: int = 4):
    correct = [0] * max_n
    total = [0] * max_n
    sys_len = ref_len = 0
    for hyp, ref in pairs:
        h, r = metric_tokens(hyp), metric_tokens(ref)
        sys_len += len(h)
        ref_len += len(r)
        for n in range(1, max_n + 1):
            hc, rc = _ngrams(h, n), _ngrams(r, n)
            correct[n - 1] += sum(min(c, rc[g]) for g, c in hc.items())
            total[n - 1] += max(0, len(h) - n + 1)
    return correct, total, sys_len, ref_len


def bleu(pairs: Sequence[Pair], max_n: int = 4) -> float:
    """Corpus BLEU in [0, 100] with exponential smoothing of zero counts."""
    pairs = list(pairs)
    if not pairs:
        raise ValueError("BLEU needs at least one hypothesis/reference pair")
    if max_n < 1:
        raise ValueError("max_n must be >= 1")
    correct, total, sys_len, ref_len = bleu_statistics(pairs, max_n)
    if sys_len == 0:
        return 0.0
    log_sum = 0.0
    smooth = 1.0
    for n in range(max_n):
        if total[n] == 0:
            return 0.0
        if correct[n] == 0:
            smooth *= 2.0
            p = 1.0 / (smooth * total[n])
        else:
            p = correct[n] / total[n]
        log_sum += math.log(p)
    bp = 1.0 if sys_len >= ref_len else math.exp(1.0 - ref_len / sys_len)
    return 100.0 * bp * math.exp(log_sum / max_n)


def lcs_length(a: Sequence[str], b: Sequence[str]) -> int:
    if not a or not b:
        return 0
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b, start=1):
            cur.append(prev[j - 1] + 1 if x == y else max(prev[j], cur[j - 1]))
        prev = cur
    return prev[-1]


def rouge_l_pair(hyp, ref) -> float:
    h, r = metric_tokens(hyp), metric_tokens(ref)
    lcs = lcs_length(h, r)
    if lcs == 0:
        return 0.0
    p, rec = lcs / len(h), lcs / len(r)
    return 2 * p * rec / (p + rec)


def rouge_l_f1(pairs: Sequence[Pair]) -> float:
    """Mean sentence-level ROUGE-L F1 (beta = 1), scaled to [0, 100]."""
    pairs = list(pairs)
    if not pairs:
        raise ValueError("ROUGE-L needs at least one pair")
    return 100.0 * sum(rouge_l_pair(h, r) for h, r in pairs) / len(pairs)


def _char_ngrams(s: str, n: int) -> Counter:
    return Counter(s[i : i + n] for i in range(len(s) - n + 1))


def chrf_statistics(pairs: Iterable[Pair], char_n: int = 6) -> list[list[int]]:
    stats = [[0, 0, 0] for _ in range(char_n)]  # hyp n-grams, ref n-grams, matches
    for hyp, ref in pairs:
        h = re.sub(r"\s+", "", _text(hyp))
        r = re.sub(r"\s+", "", _text(ref))
        for n in range(1, char_n + 1):
            hc, rc = _char_ngrams(h, n), _char_ngrams(r, n)
            stats[n - 1][0] += sum(hc.values())
            stats[n - 1][1] += sum(rc.values())
            stats[n - 1][2] += sum((hc & rc).values())
    return stats


def chrf(pairs: Sequence[Pair], char_n: int = 6, beta: float = 2.0) -> float:
    pairs = list(pairs)
    if not pairs:
        raise ValueError("chrF needs at least one pair")
    prec = rec = 0.0
    orders = 0
    for n_hyp, n_ref, n_match in chrf_statistics(pairs, char_n):
        if n_hyp > 0 and n_ref > 0:
            prec += n_match / n_hyp
            rec += n_match / n_ref
            orders += 1
    if orders == 0:
        return 0.0
    prec /= orders
    rec /= orders
    if prec + rec == 0:
        return 0.0
    b2 = beta * beta
    return 100.0 * (1 + b2) * prec * rec / (b2 * prec + rec)


def evaluate_pairs(pairs: Sequence[Pair]) -> dict:
    pairs = list(pairs)
    return {
        "bleu1": bleu(pairs, 1),
        "bleu4": bleu(pairs, 4),
        "rougeL": rouge_l_f1(pairs),
        "chrf": chrf(pairs),
        "n_pairs": len(pairs),
        "signature": {"bleu": BLEU_SIGNATURE, "chrf": CHRF_SIGNATURE, "rouge": ROUGE_SIGNATURE},
    }
