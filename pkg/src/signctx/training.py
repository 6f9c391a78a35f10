"""Teacher-forced training with plateau decay on dev BLEU-4."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import metrics
from .corpus import ContextMode, Episode, Sample, Tokenizer, build_context
from .embedding import sign_embed
from .errors import ConfigError, NonFiniteError, TrainingDivergedError
from .model import (
    ModelInput,
    TranslationModel,
    decoder_logits,
    encode,
    greedy_decode_batch,
    save_checkpoint,
)
from .numerics import adam_step, clip_grad_norm, cross_entropy_label_smoothed, no_grad
from .tokens import BOS, EOS, PAD

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    lr0: float = 3e-4
    batch_size: int = 16
    plateau_patience: int = 5
    plateau_factor: float = 0.7
    lr_floor: float = 1e-5
    improvement_eps: float = 0.0
    max_epochs: int = 100
    seed: int = 0
    label_smoothing: float = 0.1
    context_mode: str = "sentences:1"
    context_source: str = "reference"
    decode_max_len: int = 30
    grad_clip: float | None = None
    stop_at_train_accuracy: float | None = None
    track_train_accuracy: bool = False

    def __post_init__(self):
        if not 0.0 < self.plateau_factor < 1.0:
            raise ConfigError("plateau_factor must lie in (0, 1)")
        if self.batch_size < 1 or self.max_epochs < 0 or self.plateau_patience < 1:
            raise ConfigError("batch_size, plateau_patience must be >= 1 and max_epochs >= 0")
        if self.context_source not in ("reference", "self"):
            raise ConfigError("context_source must be 'reference' or 'self'")
        if not 0.0 <= self.label_smoothing < 1.0:
            raise ConfigError("label_smoothing must lie in [0, 1)")
        ContextMode.parse(self.context_mode)

    @property
    def context(self) -> ContextMode:
        return ContextMode.parse(self.context_mode)


@dataclass
class TrainState:
    epoch: int = 0
    lr: float = 0.0
    best_dev_bleu4: float = -math.inf
    best_epoch: int = -1
    epochs_since_improvement: int = 0
    decays: int = 0
    history: list[dict] = field(default_factory=list)
    stop_reason: str = ""


def plateau_step(state: TrainState, dev_bleu4: float, cfg: TrainConfig) -> TrainState:
    """Update best score / patience; decay lr after ``plateau_patience`` flat epochs."""
    if dev_bleu4 > state.best_dev_bleu4 + cfg.improvement_eps:
        state.best_dev_bleu4 = dev_bleu4
        state.best_epoch = state.epoch
        state.epochs_since_improvement = 0
        return state
    state.epochs_since_improvement += 1
    if state.epochs_since_improvement >= cfg.plateau_patience:
        state.lr *= cfg.plateau_factor
        state.decays += 1
        state.epochs_since_improvement = 0
    return state


# ---------------------------------------------------------------------------
# examples


@dataclass
class Example:
    inputs: ModelInput
    target: list[int]
    reference: str
    video_id: str


class FeatureCache:
    """Mean-pooled window features per video, computed once."""

    def __init__(self):
        self._cache: dict[str, np.ndarray] = {}

    def windows(self, sample: Sample) -> np.ndarray:
        vid = sample.video_id
        if vid not in self._cache:
            self._cache[vid] = sign_embed(sample.features).windows
        return self._cache[vid]


def make_input(
    episode: Episode,
    n: int,
    tokenizer: Tokenizer,
    streams: Sequence[str],
    mode: ContextMode,
    cache: FeatureCache,
    history: Sequence[str] | None = None,
    context_episode: Episode | None = None,
) -> ModelInput:
    """Model input for sample ``n``; ``context_episode`` substitutes another episode's context."""
    sample = episode.samples[n]
    inp = ModelInput()
    if "context" in streams:
        if context_episode is not None:
            m = min(n, len(context_episode.samples) - 1)
            inp.context = tokenizer.encode_tokens(build_context(context_episode, m, mode))
        else:
            inp.context = tokenizer.encode_tokens(build_context(episode, n, mode, history))
    if "video" in streams:
        inp.video = cache.windows(sample)
    if "spotting" in streams:
        spots = sorted(sample.spottings, key=lambda s: s.window)
        inp.spotting = [tid for sp in spots for tid in tokenizer.tokenize(sp.gloss)]
    return inp


def make_examples(
    episodes: Sequence[Episode],
    tokenizer: Tokenizer,
    streams: Sequence[str],
    mode: ContextMode,
    cache: FeatureCache | None = None,
) -> list[Example]:
    cache = cache or FeatureCache()
    out = []
    for ep in episodes:
        for n, s in enumerate(ep.samples):
            out.append(Example(make_input(ep, n, tokenizer, streams, mode, cache), tokenizer.tokenize(s.target), s.target, s.video_id))
    return out


def collate_targets(targets: Sequence[Sequence[int]]) -> tuple[np.ndarray, np.ndarray]:
    """Shifted decoder input ([BOS] + y) and output (y + [EOS]), PAD-filled."""
    T = max(len(t) for t in targets) + 1
    tgt_in = np.full((len(targets), T), PAD, dtype=np.int64)
    tgt_out = np.full((len(targets), T), PAD, dtype=np.int64)
    for i, t in enumerate(targets):
        tgt_in[i, : len(t) + 1] = [BOS, *t]
        tgt_out[i, : len(t) + 1] = [*t, EOS]
    return tgt_in, tgt_out


def _batches(n: int, size: int, order: np.ndarray) -> list[np.ndarray]:
    return [order[i : i + size] for i in range(0, n, size)]


def token_accuracy(model: TranslationModel, examples: Sequence[Example], batch_size: int = 64) -> float:
    """Teacher-forced argmax accuracy over target tokens and EOS (eval mode)."""
    was_training = model.training
    model.eval()
    hit = total = 0
    with no_grad():
        for idx in _batches(len(examples), batch_size, np.arange(len(examples))):
            batch = [examples[i] for i in idx]
            tgt_in, tgt_out = collate_targets([e.target for e in batch])
            logits = decoder_logits(model, encode(model, [e.inputs for e in batch]), tgt_in).data
            keep = tgt_out != PAD
            hit += int(((logits.argmax(-1) == tgt_out) & keep).sum())
            total += int(keep.sum())
    model.train(was_training)
    return hit / max(total, 1)


# ---------------------------------------------------------------------------
# evaluation


@dataclass
class DevResult:
    metrics: dict
    hypotheses: list[str]
    references: list[str]
    video_ids: list[str]


def translate_episodes(
    model: TranslationModel,
    episodes: Sequence[Episode],
    tokenizer: Tokenizer,
    mode: ContextMode,
    context_source: str = "reference",
    max_len: int = 30,
    batch_size: int = 64,
    cache: FeatureCache | None = None,
) -> dict[str, str]:
    """Greedy translations keyed by video id.

    With ``context_source='self'`` each sample's context is built from the
    model's own earlier translations in the same episode, so samples are
    processed position by position across episodes. ``'shuffled'`` takes
    each sample's context from the next episode in the list, which keeps the
    context distribution but breaks its link to the sample.
    """
    if context_source not in ("reference", "self", "shuffled"):
        raise ConfigError(f"unknown context source {context_source!r}")
    cache = cache or FeatureCache()
    was_training = model.training
    model.eval()
    out: dict[str, str] = {}
    own: dict[str, list[str]] = {ep.episode_id: [] for ep in episodes}
    depth = max((len(ep.samples) for ep in episodes), default=0)
    donor = {ep.episode_id: episodes[(i + 1) % len(episodes)] for i, ep in enumerate(episodes)}
    if context_source != "self":
        jobs = [[(ep, n) for ep in episodes for n in range(len(ep.samples))]]
    else:
        jobs = [[(ep, n) for ep in episodes if n < len(ep.samples)] for n in range(depth)]
    with no_grad():
        for group in jobs:
            for start in range(0, len(group), batch_size):
                chunk = group[start : start + batch_size]
                inputs = [
                    make_input(ep, n, tokenizer, model.streams, mode, cache,
                               own[ep.episode_id] if context_source == "self" else None,
                               donor[ep.episode_id] if context_source == "shuffled" else None)
                    for ep, n in chunk
                ]
                hyps = greedy_decode_batch(model, encode(model, inputs), max_len)
                for (ep, n), ids in zip(chunk, hyps):
                    text = tokenizer.detokenize(ids)
                    out[ep.samples[n].video_id] = text
                    own[ep.episode_id].append(text)
    model.train(was_training)
    return out


def evaluate_dev(
    model: TranslationModel,
    episodes: Sequence[Episode],
    tokenizer: Tokenizer,
    cfg: TrainConfig,
    context_source: str | None = None,
    cache: FeatureCache | None = None,
) -> DevResult:
    source = context_source or cfg.context_source
    hyps = translate_episodes(model, episodes, tokenizer, cfg.context, source, cfg.decode_max_len, cache=cache)
    vids, h, r = [], [], []
    for ep in episodes:
        for s in ep.samples:
            vids.append(s.video_id)
            h.append(hyps[s.video_id])
            r.append(s.target)
    return DevResult(metrics.evaluate_pairs(list(zip(h, r))), h, r, vids)


def write_translations(path: str | Path, result: DevResult) -> None:
    lines = ["video_id\thypothesis\treference"]
    lines.extend(f"{v}\t{h}\t{r}" for v, h, r in zip(result.video_ids, result.hypotheses, result.references))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# training loop


def _param_norms(model: TranslationModel) -> dict[str, float]:
    return {p.name: float(np.linalg.norm(p.data)) for p in model.parameters() if np.isfinite(p.data).all()}


def train_epoch(
    model: TranslationModel,
    examples: Sequence[Example],
    cfg: TrainConfig,
    lr: float,
    rng: np.random.Generator,
    epoch: int = 0,
) -> float:
    model.train()
    params = model.parameters()
    order = rng.permutation(len(examples))
    losses = []
    for b, idx in enumerate(_batches(len(examples), cfg.batch_size, order)):
        batch = [examples[i] for i in idx]
        tgt_in, tgt_out = collate_targets([e.target for e in batch])
        try:
            logits = decoder_logits(model, encode(model, [e.inputs for e in batch]), tgt_in)
            loss = cross_entropy_label_smoothed(logits, tgt_out, cfg.label_smoothing, PAD)
            loss.backward()
            if cfg.grad_clip:
                clip_grad_norm(params, cfg.grad_clip)
            adam_step(params, lr)
        except NonFiniteError as exc:
            norms = _param_norms(model)
            largest = sorted(norms.items(), key=lambda kv: -kv[1])[:5]
            raise TrainingDivergedError(f"epoch {epoch} batch {b}: {exc}; largest parameter norms {largest}") from exc
        losses.append(loss.item())
    return float(np.mean(losses)) if losses else float("nan")


def train(
    model: TranslationModel,
    train_episodes: Sequence[Episode],
    dev_episodes: Sequence[Episode],
    tokenizer: Tokenizer,
    cfg: TrainConfig,
    run_dir: str | Path | None = None,
) -> TrainState:
    """Train until the learning rate falls below ``lr_floor`` or ``max_epochs``.

    The parameters with the best dev BLEU-4 are restored into ``model`` at the
    end (and written to ``run_dir/best.ckpt.npz`` when a run dir is given).
    """
    state = TrainState(lr=cfg.lr0)
    run_dir = Path(run_dir) if run_dir is not None else None
    if run_dir is not None:
        run_dir.mkdir(parents=True, exist_ok=True)
        (run_dir / "log.jsonl").write_text("", encoding="utf-8")
    if cfg.lr0 < cfg.lr_floor:
        state.stop_reason = "lr0 below lr_floor"
        return state
    cache = FeatureCache()
    mode = cfg.context
    examples = make_examples(train_episodes, tokenizer, model.streams, mode, cache)
    if not examples:
        raise ConfigError("training split is empty")
    rng = np.random.default_rng(cfg.seed)
    best_params = None
    best_result = None
    while True:
        if state.epoch >= cfg.max_epochs:
            state.stop_reason = "max_epochs"
            break
        t0 = time.perf_counter()
        loss = train_epoch(model, examples, cfg, state.lr, rng, state.epoch)
        dev = evaluate_dev(model, dev_episodes, tokenizer, cfg, cache=cache) if dev_episodes else None
        bleu4 = dev.metrics["bleu4"] if dev else -loss
        entry = {"epoch": state.epoch, "lr": state.lr, "train_loss": loss}
        if dev:
            entry.update({k: dev.metrics[k] for k in ("bleu1", "bleu4", "rougeL", "chrf")})
        acc = None
        if cfg.track_train_accuracy or cfg.stop_at_train_accuracy is not None:
            acc = token_accuracy(model, examples)
            entry["train_accuracy"] = acc
        prev_best = state.best_dev_bleu4
        plateau_step(state, bleu4, cfg)
        if state.best_dev_bleu4 > prev_best:
            best_params = model.state_dict()
            best_result = dev
            if run_dir is not None:
                save_checkpoint(run_dir / "best.ckpt.npz", model, tokenizer.vocabulary,
                                {"epoch": state.epoch, "dev": dev.metrics if dev else None, "train": asdict(cfg)})
        entry["seconds"] = time.perf_counter() - t0
        state.history.append(entry)
        log.info("epoch %d lr %.3g loss %.4f bleu4 %.2f", state.epoch, entry["lr"], loss, bleu4)
        if run_dir is not None:
            with (run_dir / "log.jsonl").open("a", encoding="utf-8") as fh:
                fh.write(json.dumps(entry, sort_keys=True) + "\n")
        state.epoch += 1
        if cfg.stop_at_train_accuracy is not None and acc is not None and acc >= cfg.stop_at_train_accuracy:
            state.stop_reason = "train accuracy reached"
            break
        if state.lr < cfg.lr_floor:
            state.stop_reason = "lr below floor"
            break
    if best_params is not None:
        model.load_state_dict(best_params)
    if run_dir is not None and best_result is not None:
        write_translations(run_dir / "dev_translations.tsv", best_result)
        (run_dir / "dev_metrics.json").write_text(json.dumps(best_result.metrics, indent=2, sort_keys=True) + "\n")
    model.eval()
    return state


def state_summary(state: TrainState) -> dict:
    d = asdict(state)
    d.pop("history")
    return d
