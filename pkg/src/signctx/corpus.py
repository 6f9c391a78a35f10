"""Episodes, tokenisation, context assembly, corpus files and the synthetic generator."""

from __future__ import annotations

import json
import re
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .embedding import WINDOW_SIZE, WINDOW_STRIDE, FeatureSequence, read_fmat, window_count, write_fmat
from .errors import ConfigError, CorpusParseError
from .tokens import BOS, EOS, PAD, SEP, SPECIAL_TOKENS, UNK

__all__ = [
    "Spotting",
    "Sample",
    "Episode",
    "Tokenizer",
    "ContextMode",
    "build_context",
    "load_corpus",
    "save_corpus",
    "GeneratorConfig",
    "generate_synthetic",
    "synthesize",
]


@dataclass(frozen=True)
class Spotting:
    gloss: str
    window: int


@dataclass
class Sample:
    features: FeatureSequence
    target: str
    spottings: list[Spotting] = field(default_factory=list)
    subtitle_index: int = 0

    @property
    def video_id(self) -> str:
        return self.features.video_id


@dataclass
class Episode:
    episode_id: str
    samples: list[Sample]


def iter_samples(episodes: Iterable[Episode]) -> Iterable[tuple[Episode, int, Sample]]:
    for ep in episodes:
        for n, s in enumerate(ep.samples):
            yield ep, n, s


# ---------------------------------------------------------------------------
# tokenizer

_TOKEN_RE = re.compile(r"\w+|[^\w\s]", re.UNICODE)


def split_words(s: str) -> list[str]:
    """Lowercase, split on whitespace and detach punctuation."""
    return _TOKEN_RE.findall(s.lower())


class Tokenizer:
    """Word-level vocabulary: specials first, then tokens by frequency, ties alphabetical."""

    def __init__(self, vocabulary: Sequence[str]):
        if tuple(vocabulary[: len(SPECIAL_TOKENS)]) != SPECIAL_TOKENS:
            raise ConfigError("tokenizer vocabulary must start with the special tokens")
        self.vocabulary = list(vocabulary)
        self.ids = {tok: i for i, tok in enumerate(self.vocabulary)}
        if len(self.ids) != len(self.vocabulary):
            raise ConfigError("duplicate tokens in vocabulary")

    @classmethod
    def build(cls, texts: Iterable[str]) -> Tokenizer:
        counts = Counter()
        for t in texts:
            counts.update(split_words(t))
        for special in SPECIAL_TOKENS:
            counts.pop(special, None)
        ordered = sorted(counts, key=lambda w: (-counts[w], w))
        return cls(list(SPECIAL_TOKENS) + ordered)

    @classmethod
    def for_corpus(cls, episodes: Iterable[Episode]) -> Tokenizer:
        texts = []
        for _, _, s in iter_samples(episodes):
            texts.append(s.target)
            texts.extend(sp.gloss for sp in s.spottings)
        return cls.build(texts)

    def __len__(self) -> int:
        return len(self.vocabulary)

    def token_id(self, tok: str) -> int:
        return self.ids.get(tok, UNK)

    def tokenize(self, s: str) -> list[int]:
        return [self.token_id(w) for w in split_words(s)]

    def encode_tokens(self, toks: Iterable[str]) -> list[int]:
        return [self.token_id(t) for t in toks]

    def detokenize(self, ids: Iterable[int]) -> str:
        words = []
        for i in ids:
            i = int(i)
            if i in (PAD, BOS, EOS):
                continue
            words.append(self.vocabulary[i])
        return " ".join(words)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.vocabulary, ensure_ascii=False, indent=0) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> Tokenizer:
        return cls(json.loads(Path(path).read_text(encoding="utf-8")))


# ---------------------------------------------------------------------------
# context


@dataclass(frozen=True)
class ContextMode:
    """``sentences`` joins up to ``k`` preceding targets; ``spottings`` gathers
    glosses of up to ``lookback`` preceding samples, keeping the last ``k``."""

    kind: str = "sentences"
    k: int = 1
    lookback: int = 3
    max_tokens: int = 64

    def __post_init__(self):
        if self.kind not in ("sentences", "spottings", "none"):
            raise ConfigError(f"unknown context mode {self.kind!r}")
        if self.k < 0 or self.lookback < 0 or self.max_tokens < 1:
            raise ConfigError("context sizes must be non-negative")

    @classmethod
    def parse(cls, text: str) -> ContextMode:
        """``sentences:2``, ``spottings:10:3`` or ``none``."""
        parts = text.split(":")
        kind = parts[0]
        try:
            nums = [int(p) for p in parts[1:]]
        except ValueError:
            raise ConfigError(f"bad context mode {text!r}") from None
        if kind == "sentences":
            return cls("sentences", k=nums[0] if nums else 1)
        if kind == "spottings":
            return cls("spottings", k=nums[0] if nums else 10, lookback=nums[1] if len(nums) > 1 else 3)
        if kind == "none":
            return cls("none", k=0)
        raise ConfigError(f"unknown context mode {text!r}")

    def __str__(self) -> str:
        if self.kind == "sentences":
            return f"sentences:{self.k}"
        if self.kind == "spottings":
            return f"spottings:{self.k}:{self.lookback}"
        return "none"


def build_context(
    episode: Episode,
    n: int,
    mode: ContextMode,
    history: Sequence[str] | None = None,
) -> list[str]:
    """Context tokens for sample ``n`` built only from samples before it.

    ``history`` optionally replaces the reference targets of earlier samples
    (e.g. the model's own previous translations); it must cover indices < n.
    """
    if n < 0:
        raise ValueError("sample index must be >= 0")
    if n == 0 or mode.kind == "none" or mode.k == 0:
        return []
    if mode.kind == "sentences":
        start = max(0, n - mode.k)
        toks: list[str] = []
        for j in range(start, n):
            if toks:
                toks.append(SPECIAL_TOKENS[SEP])
            text = history[j] if history is not None else episode.samples[j].target
            toks.extend(split_words(text))
    else:
        glosses: list[str] = []
        for j in range(max(0, n - mode.lookback), n):
            spots = sorted(episode.samples[j].spottings, key=lambda s: s.window)
            glosses.extend(w for sp in spots for w in split_words(sp.gloss))
        toks = glosses[-mode.k :]
    return toks[-mode.max_tokens :]


# ---------------------------------------------------------------------------
# corpus files


def _sample_record(ep: Episode, s: Sample, feature_path: str) -> dict:
    return {
        "episode_id": ep.episode_id,
        "subtitle_index": s.subtitle_index,
        "video_id": s.video_id,
        "feature_path": feature_path,
        "target": s.target,
        "spottings": [{"gloss": sp.gloss, "window": sp.window} for sp in s.spottings],
    }


def save_corpus(episodes: Sequence[Episode], path: str | Path, feature_dir: str = "features") -> None:
    """Write a JSONL manifest plus one fmat file per sample under ``feature_dir``."""
    path = Path(path)
    root = path.parent
    (root / feature_dir).mkdir(parents=True, exist_ok=True)
    lines = []
    for ep in episodes:
        lines.append(json.dumps({"episode": ep.episode_id, "samples": len(ep.samples)}, ensure_ascii=False))
        for s in ep.samples:
            rel = f"{feature_dir}/{s.video_id}.fmat"
            write_fmat(root / rel, s.features.frames)
            lines.append(json.dumps(_sample_record(ep, s, rel), ensure_ascii=False))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_corpus(path: str | Path, root: str | Path | None = None) -> list[Episode]:
    """Parse a JSONL manifest; feature paths resolve against ``root`` (default: manifest dir)."""
    path = Path(path)
    root = Path(root) if root is not None else path.parent
    if not path.exists():
        raise FileNotFoundError(f"corpus manifest not found: {path}")
    episodes: list[Episode] = []
    expected: list[int] = []
    current: Episode | None = None
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorpusParseError(path, lineno, f"invalid JSON: {exc.msg}") from None
            if not isinstance(rec, dict):
                raise CorpusParseError(path, lineno, "expected a JSON object")
            if "episode" in rec:
                current = Episode(str(rec["episode"]), [])
                episodes.append(current)
                expected.append(int(rec.get("samples", -1)))
                continue
            if current is None:
                raise CorpusParseError(path, lineno, "sample line before any episode header")
            episodes[-1].samples.append(_parse_sample(rec, current, root, path, lineno))
    for ep, n in zip(episodes, expected):
        if n >= 0 and n != len(ep.samples):
            raise CorpusParseError(path, 0, f"episode {ep.episode_id}: header announces {n} samples, found {len(ep.samples)}")
    return episodes


def _parse_sample(rec: dict, ep: Episode, root: Path, path: Path, lineno: int) -> Sample:
    for key in ("episode_id", "subtitle_index", "feature_path", "target"):
        if key not in rec:
            raise CorpusParseError(path, lineno, f"missing field {key!r}")
    if rec["episode_id"] != ep.episode_id:
        raise CorpusParseError(path, lineno, f"sample of episode {rec['episode_id']!r} under header {ep.episode_id!r}")
    idx = rec["subtitle_index"]
    if not isinstance(idx, int):
        raise CorpusParseError(path, lineno, "subtitle_index must be an integer")
    if ep.samples and idx <= ep.samples[-1].subtitle_index:
        raise CorpusParseError(path, lineno, f"subtitle_index {idx} out of order in episode {ep.episode_id}")
    target = rec["target"]
    if not isinstance(target, str) or not target.strip():
        raise CorpusParseError(path, lineno, "target must be a non-empty string")
    spots = []
    for sp in rec.get("spottings", []):
        if not isinstance(sp, dict) or "gloss" not in sp or "window" not in sp:
            raise CorpusParseError(path, lineno, "spotting entries need 'gloss' and 'window'")
        spots.append(Spotting(str(sp["gloss"]), int(sp["window"])))
    fpath = root / rec["feature_path"]
    if not fpath.exists():
        raise FileNotFoundError(f"feature file not found: {fpath}")
    video_id = str(rec.get("video_id", f"{ep.episode_id}-{idx}"))
    frames = read_fmat(fpath)
    W = window_count(frames.shape[0]) if frames.shape[0] >= WINDOW_SIZE else 0
    for sp in spots:
        if not 0 <= sp.window < max(W, 1):
            raise CorpusParseError(path, lineno, f"spotting window {sp.window} outside [0, {W})")
    return Sample(FeatureSequence(video_id, frames), target, spots, idx)


# ---------------------------------------------------------------------------
# synthetic generator

_ONSETS = ["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z"]
_VOWELS = ["a", "e", "i", "o", "u"]


def pseudo_words(n: int) -> list[str]:
    """Deterministic, distinct two-syllable words (unique for n <= 4900)."""
    syllables = [o + v for o in _ONSETS for v in _VOWELS]
    k = len(syllables)
    if n > k * k:
        raise ConfigError(f"cannot make more than {k * k} pseudo-words")
    return [syllables[i % k] + syllables[(i // k + 3 * i) % k] for i in range(n)]


@dataclass
class GeneratorConfig:
    """Knobs of the synthetic episode corpus.

    ``ambiguity_rate`` is the per-slot probability that a content slot holds a
    homonym word; every non-opening sentence gets at least one such slot when
    the rate is positive. ``episode_words`` restricts each episode to a random
    subset of the neutral vocabulary, used with probability ``episode_focus``.
    """

    n_topics: int = 2
    n_neutral: int = 24
    n_homonym_pairs: int = 6
    episode_words: int = 8
    episode_focus: float = 0.8
    feature_dim: int = 16
    noise: float = 0.5
    spot_coverage: float = 0.5
    ambiguity_rate: float = 0.3
    train_episodes: int = 60
    dev_episodes: int = 15
    test_episodes: int = 0
    sentences_per_episode: int = 6
    min_sentence_len: int = 3
    max_sentence_len: int = 5
    min_sign_frames: int = 8
    max_sign_frames: int = 24
    rest_frames: int = 4
    announce_topic: bool = True

    def validate(self) -> None:
        if self.n_topics < 1:
            raise ConfigError("n_topics must be >= 1")
        if self.n_homonym_pairs and self.n_topics < 2:
            raise ConfigError("homonym pairs need at least two topics")
        if self.n_neutral < 1 or self.feature_dim < 1:
            raise ConfigError("n_neutral and feature_dim must be positive")
        if not 1 <= self.episode_words <= self.n_neutral:
            raise ConfigError("episode_words must lie in [1, n_neutral]")
        if not (0 <= self.episode_focus <= 1 and 0 <= self.spot_coverage <= 1 and 0 <= self.ambiguity_rate <= 1):
            raise ConfigError("probabilities must lie in [0, 1]")
        if self.ambiguity_rate > 0 and self.n_homonym_pairs == 0:
            raise ConfigError("ambiguity_rate > 0 needs homonym pairs")
        if self.noise < 0:
            raise ConfigError("noise must be >= 0")
        if not 1 <= self.min_sentence_len <= self.max_sentence_len:
            raise ConfigError("sentence length bounds invalid")
        if not 1 <= self.min_sign_frames <= self.max_sign_frames:
            raise ConfigError("sign duration bounds invalid")
        if self.sentences_per_episode < 1 or self.train_episodes < 1:
            raise ConfigError("need at least one training episode and sentence")
        if self.rest_frames < 0:
            raise ConfigError("rest_frames must be >= 0")

    @classmethod
    def from_dict(cls, d: dict) -> GeneratorConfig:
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown generator keys: {sorted(unknown)}")
        cfg = cls(**d)
        cfg.validate()
        return cfg


@dataclass
class Lexicon:
    opener: str
    topics: list[str]
    neutral: list[str]
    pairs: list[tuple[str, str]]  # (word for even topics, word for odd topics)
    pair_glosses: list[str]
    prototypes: dict[str, np.ndarray]  # gloss -> feature prototype
    gloss_of: dict[str, str]  # target word -> gloss


def _lexicon(cfg: GeneratorConfig, rng: np.random.Generator) -> Lexicon:
    words = pseudo_words(2 + cfg.n_topics + cfg.n_neutral + 3 * cfg.n_homonym_pairs)
    opener, topics = words[0], words[2 : 2 + cfg.n_topics]
    rest = words[2 + cfg.n_topics :]
    neutral = rest[: cfg.n_neutral]
    rest = rest[cfg.n_neutral :]
    pairs = [(rest[3 * i], rest[3 * i + 1]) for i in range(cfg.n_homonym_pairs)]
    pair_glosses = [rest[3 * i + 2] for i in range(cfg.n_homonym_pairs)]
    gloss_of = {w: w for w in [opener, *topics, *neutral]}
    for (a, b), g in zip(pairs, pair_glosses):
        gloss_of[a] = gloss_of[b] = g
    glosses = sorted(set(gloss_of.values()))
    protos = {}
    for g in glosses:
        v = rng.normal(size=cfg.feature_dim)
        protos[g] = v / np.linalg.norm(v) * np.sqrt(cfg.feature_dim)
    return Lexicon(opener, topics, neutral, pairs, pair_glosses, protos, gloss_of)


def _sentence(cfg: GeneratorConfig, lex: Lexicon, rng: np.random.Generator, topic: int, focus: list[str]):
    length = int(rng.integers(cfg.min_sentence_len, cfg.max_sentence_len + 1))
    homonym = rng.random(length) < cfg.ambiguity_rate
    if cfg.ambiguity_rate > 0 and not homonym.any():
        homonym[rng.integers(length)] = True
    words, slots = [], []
    for i in range(length):
        if homonym[i]:
            pair = lex.pairs[int(rng.integers(len(lex.pairs)))]
            words.append(pair[topic % 2])
            slots.append(i)
        elif rng.random() < cfg.episode_focus:
            words.append(focus[int(rng.integers(len(focus)))])
        else:
            words.append(lex.neutral[int(rng.integers(len(lex.neutral)))])
    return words, slots


def _render(cfg: GeneratorConfig, lex: Lexicon, words: list[str], rng: np.random.Generator):
    """Frame features for a word sequence plus each sign's frame span."""
    F = cfg.feature_dim
    chunks, spans = [], []
    t = 0

    def rest(n):
        nonlocal t
        if n:
            chunks.append(np.zeros((n, F)))
            t += n

    rest(cfg.rest_frames)
    for w in words:
        dur = int(rng.integers(cfg.min_sign_frames, cfg.max_sign_frames + 1))
        chunks.append(np.tile(lex.prototypes[lex.gloss_of[w]], (dur, 1)))
        spans.append((t, t + dur))
        t += dur
    rest(cfg.rest_frames)
    clean = np.concatenate(chunks, axis=0)
    if clean.shape[0] < WINDOW_SIZE:
        pad = WINDOW_SIZE - clean.shape[0]
        clean = np.concatenate([clean, np.zeros((pad, F))], axis=0)
    frames = clean + rng.normal(scale=cfg.noise, size=clean.shape) if cfg.noise > 0 else clean
    return frames, spans


def nearest_window(span: tuple[int, int], T: int, L: int = WINDOW_SIZE, stride: int = WINDOW_STRIDE) -> int:
    """Window whose centre is closest to the centre of ``span`` (earliest on ties)."""
    W = window_count(T, L, stride)
    centre = (span[0] + span[1]) / 2.0
    centres = np.arange(W) * stride + L / 2.0
    return int(np.argmin(np.abs(centres - centre)))


def synthesize(cfg: GeneratorConfig, seed: int) -> tuple[dict[str, list[Episode]], list[dict], Lexicon]:
    """Build all splits in memory; returns (splits, ground truth records, lexicon)."""
    cfg.validate()
    rng = np.random.default_rng(seed)
    lex = _lexicon(cfg, rng)
    splits: dict[str, list[Episode]] = {}
    truth: list[dict] = []
    counts = {"train": cfg.train_episodes, "dev": cfg.dev_episodes, "test": cfg.test_episodes}
    for split, n_eps in counts.items():
        eps = []
        # topics are balanced within a split so context-blind guessing stays at chance
        topics = rng.permutation(np.arange(n_eps) % cfg.n_topics)
        for e in range(n_eps):
            ep_id = f"{split}{e:03d}"
            topic = int(topics[e])
            focus = list(rng.choice(lex.neutral, size=cfg.episode_words, replace=False))
            samples = []
            for n in range(cfg.sentences_per_episode):
                if n == 0 and cfg.announce_topic:
                    words, slots = [lex.opener, lex.topics[topic]], []
                else:
                    words, slots = _sentence(cfg, lex, rng, topic, focus)
                frames, spans = _render(cfg, lex, words, rng)
                T = frames.shape[0]
                windows = [nearest_window(sp, T) for sp in spans]
                spotted = rng.random(len(words)) < cfg.spot_coverage
                spots = [Spotting(lex.gloss_of[w], windows[i]) for i, w in enumerate(words) if spotted[i]]
                vid = f"{ep_id}-{n:02d}"
                samples.append(Sample(FeatureSequence(vid, frames), " ".join(words), spots, n))
                truth.append(
                    {
                        "video_id": vid,
                        "split": split,
                        "episode_id": ep_id,
                        "subtitle_index": n,
                        "topic": topic,
                        "words": words,
                        "glosses": [lex.gloss_of[w] for w in words],
                        "homonym_slots": slots,
                        "spans": [list(sp) for sp in spans],
                        "windows": windows,
                    }
                )
            eps.append(Episode(ep_id, samples))
        splits[split] = eps
    return splits, truth, lex


def generate_synthetic(cfg: GeneratorConfig, seed: int, out_dir: str | Path) -> dict[str, Path]:
    """Write ``{train,dev,test}.jsonl``, features, ``truth.jsonl`` and ``generator.json``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    splits, truth, _ = synthesize(cfg, seed)
    paths = {}
    for split, eps in splits.items():
        if not eps:
            continue
        paths[split] = out / f"{split}.jsonl"
        save_corpus(eps, paths[split])
    (out / "truth.jsonl").write_text("".join(json.dumps(t) + "\n" for t in truth), encoding="utf-8")
    (out / "generator.json").write_text(
        json.dumps({"seed": seed, "config": asdict(cfg)}, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    return paths


def load_truth(path: str | Path) -> dict[str, dict]:
    out = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                rec = json.loads(line)
                out[rec["video_id"]] = rec
    return out
