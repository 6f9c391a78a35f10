"""Automatic sign spotting by exemplar voting.

For a word and a reference video whose subtitle contains it, positive
exemplars (other videos whose subtitles contain the word) and negative
exemplars (videos whose subtitles do not) are correlated with the reference
window by window. An exemplar votes for reference window ``r`` when its best
matching window has cosine similarity above the threshold. Positive votes
count for, negative votes against; the window with the largest margin is the
localisation, provided the margin reaches ``vote_min``.
"""

from __future__ import annotations

import hashlib
import logging
import math
import re
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .corpus import Episode, iter_samples
from .embedding import WINDOW_SIZE, WINDOW_STRIDE, sign_embed
from .errors import ConfigError, CorpusParseError, PreconditionError

log = logging.getLogger(__name__)

Lemmatizer = Callable[[str], str]

_WORD_RE = re.compile(r"\w+", re.UNICODE)


def identity_lemmatizer(word: str) -> str:
    return word


def subtitle_words(text: str, lemmatizer: Lemmatizer = identity_lemmatizer) -> list[str]:
    """Lowercased, lemmatised words of a subtitle (punctuation dropped)."""
    return [w for w in (lemmatizer(t) for t in _WORD_RE.findall(text.lower())) if w]


@dataclass
class VocabularyEntry:
    word: str
    occurrences: list[tuple[str, int]]  # (video_id, subtitle_index)


@dataclass(frozen=True)
class SpottingRecord:
    gloss: str
    video_id: str
    window_index: int
    score: float
    vote_count: int


@dataclass
class SpotParams:
    n_positive: int = 9
    neg_ratio: int = 3
    threshold: float = 0.5
    vote_min: int | None = None  # default ceil(positives used / 2)
    min_count: int = 1
    seed: int = 0
    veto: str = "window"  # or "global"
    window_size: int = WINDOW_SIZE
    stride: int = WINDOW_STRIDE
    lemmatizer: Lemmatizer = field(default=identity_lemmatizer, repr=False)

    def __post_init__(self):
        if self.veto not in ("window", "global"):
            raise ConfigError(f"veto must be 'window' or 'global', got {self.veto!r}")
        if self.n_positive < 1 or self.neg_ratio < 0:
            raise ConfigError("n_positive must be >= 1 and neg_ratio >= 0")


def build_vocabulary(
    episodes: Iterable[Episode], lemmatizer: Lemmatizer = identity_lemmatizer, min_count: int = 1
) -> list[VocabularyEntry]:
    """Words with at least ``min_count`` subtitle occurrences, sorted lexicographically.

    A word repeated inside one subtitle counts once for that subtitle.
    """
    occ: dict[str, list[tuple[str, int]]] = defaultdict(list)
    for _, _, s in iter_samples(episodes):
        for w in dict.fromkeys(subtitle_words(s.target, lemmatizer)):
            occ[w].append((s.video_id, s.subtitle_index))
    return [VocabularyEntry(w, occ[w]) for w in sorted(occ) if len(occ[w]) >= min_count]


def cosine_similarity(a, b) -> float:
    """a.b / (|a| |b|); zero vectors have similarity 0."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def _unit_rows(x: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    return np.divide(x, norms, out=np.zeros_like(x), where=norms > 0)


class SpottingIndex:
    """Per-video window features and subtitle word sets for one corpus."""

    def __init__(self, episodes: Sequence[Episode], params: SpotParams | None = None):
        params = params or SpotParams()
        self.windows: dict[str, np.ndarray] = {}
        self.words: dict[str, frozenset[str]] = {}
        self.video_ids: list[str] = []
        for _, _, s in iter_samples(episodes):
            w = sign_embed(s.features, L=params.window_size, stride=params.stride).windows
            self.windows[s.video_id] = _unit_rows(w)
            self.words[s.video_id] = frozenset(subtitle_words(s.target, params.lemmatizer))
            self.video_ids.append(s.video_id)
        self.video_ids.sort()


def word_seed(seed: int, word: str, reference: str) -> int:
    digest = hashlib.sha256(f"{seed}\x1f{word}\x1f{reference}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


def sample_exemplars(
    word: str, reference: str, index: SpottingIndex, rng: np.random.Generator, n_positive: int, neg_ratio: int
) -> tuple[list[str], list[str]]:
    """Draw up to ``n_positive`` positives and ``neg_ratio * n_positive`` negatives."""
    pos = [v for v in index.video_ids if v != reference and word in index.words[v]]
    neg = [v for v in index.video_ids if word not in index.words[v]]
    n_pos = min(n_positive, len(pos))
    n_neg = min(neg_ratio * n_positive, len(neg))
    chosen_pos = sorted(rng.choice(pos, size=n_pos, replace=False).tolist()) if n_pos else []
    chosen_neg = sorted(rng.choice(neg, size=n_neg, replace=False).tolist()) if n_neg else []
    if n_pos < n_positive or n_neg < neg_ratio * n_positive:
        log.debug("word %r ref %s: shortfall, %d/%d positives, %d/%d negatives",
                  word, reference, n_pos, n_positive, n_neg, neg_ratio * n_positive)
    return chosen_pos, chosen_neg


def _best_match(ref: np.ndarray, exemplars: Sequence[np.ndarray]) -> np.ndarray:
    """[E, W_ref] best cosine similarity of each reference window within each exemplar."""
    if not exemplars:
        return np.zeros((0, ref.shape[0]))
    return np.stack([(ref @ ex.T).max(axis=1) for ex in exemplars])


def vote(
    ref: np.ndarray,
    positives: Sequence[np.ndarray],
    negatives: Sequence[np.ndarray],
    threshold: float,
    vote_min: int,
    veto: str = "window",
) -> tuple[int, float, int] | None:
    """Localise within ``ref`` (unit-norm rows); returns (window, score, margin) or None.

    Ties in margin go to the higher mean positive similarity, then the earliest window.
    """
    pos_best = _best_match(ref, positives)
    neg_best = _best_match(ref, negatives)
    pos_hit = pos_best > threshold
    pos_votes = pos_hit.sum(axis=0)
    neg_votes = (neg_best > threshold).sum(axis=0)
    margin = pos_votes - neg_votes if veto == "window" else pos_votes.copy()
    with np.errstate(invalid="ignore", divide="ignore"):
        score = np.where(pos_votes > 0, (pos_best * pos_hit).sum(axis=0) / np.maximum(pos_votes, 1), -np.inf)
    # lexsort: last key is primary
    order = np.lexsort((np.arange(ref.shape[0]), -score, -margin))
    r = int(order[0])
    if pos_votes[r] == 0 or margin[r] < vote_min:
        return None
    if veto == "global" and negatives and neg_votes[r] / len(negatives) >= pos_votes[r] / len(positives):
        return None
    return r, float(score[r]), int(margin[r])


def spot_word(
    word: VocabularyEntry | str,
    reference: str,
    index: SpottingIndex,
    rng: np.random.Generator,
    params: SpotParams | None = None,
) -> SpottingRecord | None:
    params = params or SpotParams()
    w = word.word if isinstance(word, VocabularyEntry) else word
    if reference not in index.words:
        raise PreconditionError(f"unknown reference video {reference!r}")
    if w not in index.words[reference]:
        raise PreconditionError(f"word {w!r} does not occur in the subtitle of {reference}")
    pos, neg = sample_exemplars(w, reference, index, rng, params.n_positive, params.neg_ratio)
    if not pos or not neg:
        log.info("word %r ref %s: no %s exemplars, skipped", w, reference, "positive" if not pos else "negative")
        return None
    vote_min = params.vote_min if params.vote_min is not None else math.ceil(len(pos) / 2)
    found = vote(
        index.windows[reference],
        [index.windows[v] for v in pos],
        [index.windows[v] for v in neg],
        params.threshold,
        vote_min,
        params.veto,
    )
    if found is None:
        return None
    r, score, margin = found
    return SpottingRecord(w, reference, r, score, margin)


def annotate_corpus(episodes: Sequence[Episode], params: SpotParams | None = None) -> list[SpottingRecord]:
    """Run ``spot_word`` for every (word, reference video) occurrence."""
    params = params or SpotParams()
    index = SpottingIndex(episodes, params)
    records = []
    for entry in build_vocabulary(episodes, params.lemmatizer, params.min_count):
        for video_id, _ in entry.occurrences:
            rng = np.random.default_rng(word_seed(params.seed, entry.word, video_id))
            try:
                rec = spot_word(entry, video_id, index, rng, params)
            except PreconditionError as exc:
                log.warning("spotting %r in %s failed: %s", entry.word, video_id, exc)
                continue
            if rec is not None:
                records.append(rec)
    records.sort(key=lambda r: (r.video_id, r.window_index, r.gloss))
    return records


def write_spottings(records: Iterable[SpottingRecord], path: str | Path) -> None:
    lines = [f"{r.video_id}\t{r.gloss}\t{r.window_index}\t{r.score!r}\t{r.vote_count}" for r in records]
    Path(path).write_text("".join(line + "\n" for line in lines), encoding="utf-8")


def read_spottings(path: str | Path) -> list[SpottingRecord]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            parts = line.rstrip("\n").split("\t")
            if len(parts) != 5:
                raise CorpusParseError(path, lineno, f"expected 5 tab-separated fields, got {len(parts)}")
            try:
                out.append(SpottingRecord(parts[1], parts[0], int(parts[2]), float(parts[3]), int(parts[4])))
            except ValueError as exc:
                raise CorpusParseError(path, lineno, str(exc)) from None
    return out
