"""Three-encoder translation model with a cascaded cross-attention decoder.

The decoder attends to the enabled sources in the fixed order
context -> video -> spotting; each cross-attention block takes the previous
block's output as its query. Decoding helpers (greedy, beam) run the full
decoder over a fixed-width padded prefix so that a position's logits never
depend on anything beyond it.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from .embedding import EmbeddingTable, FeatureEmbedding, feature_embed, positional_encode, word_embed
from .errors import CheckpointError, ConfigError, DimensionError, LengthError, SampleSchemaError
from .numerics import (
    LayerNorm,
    Linear,
    Module,
    Tensor,
    assign_names,
    dropout,
    linear_forward,
    log_softmax_array,
    masked_softmax,
    matmul,
    no_grad,
    relu,
)
from .tokens import BOS, EOS, PAD

STREAMS = ("context", "video", "spotting")
TEXT_STREAMS = ("context", "spotting")
STREAM_CODES = {"context": "C", "video": "V", "spotting": "S"}
CHECKPOINT_FORMAT = "signctx-checkpoint-v1"


def parse_streams(spec: str | Sequence[str]) -> tuple[str, ...]:
    """Accept 'C+V+S', 'video,context' or a sequence; return canonical order."""
    if isinstance(spec, str):
        parts = [p.strip() for p in spec.replace("+", ",").split(",") if p.strip()]
    else:
        parts = list(spec)
    by_code = {v: k for k, v in STREAM_CODES.items()}
    names = set()
    for p in parts:
        name = by_code.get(p.upper(), p.lower())
        if name not in STREAMS:
            raise ConfigError(f"unknown stream {p!r}")
        names.add(name)
    return tuple(s for s in STREAMS if s in names)


def streams_label(streams: Sequence[str]) -> str:
    return "+".join(STREAM_CODES[s] for s in STREAMS if s in streams)


@dataclass
class ModelConfig:
    vocab_size: int
    feature_dim: int = 1024
    d_model: int = 512
    d_ff: int = 1024
    layers: int = 2
    heads: int = 8
    dropout: float = 0.1
    max_positions: int = 64
    enabled_streams: tuple[str, ...] = STREAMS
    seed: int = 0

    def __post_init__(self):
        self.enabled_streams = parse_streams(self.enabled_streams)
        if not self.enabled_streams:
            raise ConfigError("at least one input stream must be enabled")
        if self.d_model % self.heads:
            raise ConfigError(f"d_model {self.d_model} not divisible by heads {self.heads}")
        if self.d_model % 2:
            raise ConfigError("d_model must be even for positional encoding")
        if self.layers < 1:
            raise ConfigError("layers must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must lie in [0, 1)")
        if self.vocab_size < 4:
            raise ConfigError("vocabulary must hold at least the special tokens")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["enabled_streams"] = list(self.enabled_streams)
        return d


# ---------------------------------------------------------------------------
# layers


class MultiHeadAttention(Module):
    def __init__(self, rng: np.random.Generator, d_model: int, heads: int):
        self.heads = heads
        self.wq = Linear(rng, d_model, d_model)
        self.wk = Linear(rng, d_model, d_model)
        self.wv = Linear(rng, d_model, d_model)
        self.wo = Linear(rng, d_model, d_model)
        self.last_weights: np.ndarray | None = None

    def __call__(self, q: Tensor, k: Tensor, v: Tensor, mask: np.ndarray) -> Tensor:
        return multi_head_attention(q, k, v, mask, self.heads, self)


def multi_head_attention(
    q: Tensor, k: Tensor, v: Tensor, mask: np.ndarray, heads: int, proj: MultiHeadAttention
) -> Tensor:
    """Scaled dot-product attention over ``heads`` subspaces.

    Inputs are [B, N, d] (or [N, d]); ``mask`` broadcasts to [B, Nq, Nk] and
    is true where attending is allowed.
    """
    squeeze = q.ndim == 2
    if squeeze:
        q, k, v = (x.reshape(1, *x.shape) for x in (q, k, v))
        mask = np.asarray(mask)[None]
    B, Nq, d = q.shape
    Nk = k.shape[1]
    if d % heads:
        raise DimensionError(f"model width {d} not divisible by {heads} heads")
    if k.shape[1] != v.shape[1]:
        raise DimensionError(f"key length {k.shape} != value length {v.shape}")
    dk = d // heads
    Q = linear_forward(q, proj.wq.weight, proj.wq.bias) * (1.0 / math.sqrt(dk))
    K = linear_forward(k, proj.wk.weight, proj.wk.bias)
    V = linear_forward(v, proj.wv.weight, proj.wv.bias)
    Q = Q.reshape(B, Nq, heads, dk).transpose(0, 2, 1, 3)
    K = K.reshape(B, Nk, heads, dk).transpose(0, 2, 3, 1)
    V = V.reshape(B, Nk, heads, dk).transpose(0, 2, 1, 3)
    weights = masked_softmax(matmul(Q, K), np.expand_dims(np.asarray(mask, dtype=bool), -3))
    proj.last_weights = weights.data
    out = matmul(weights, V).transpose(0, 2, 1, 3).reshape(B, Nq, d)
    out = linear_forward(out, proj.wo.weight, proj.wo.bias)
    return out.reshape(Nq, d) if squeeze else out


class FeedForward(Module):
    def __init__(self, rng: np.random.Generator, d_model: int, d_ff: int):
        self.inner = Linear(rng, d_model, d_ff)
        self.outer = Linear(rng, d_ff, d_model)

    def __call__(self, x: Tensor) -> Tensor:
        return self.outer(relu(self.inner(x)))


class EncoderLayer(Module):
    def __init__(self, rng: np.random.Generator, cfg: ModelConfig):
        self.attn = MultiHeadAttention(rng, cfg.d_model, cfg.heads)
        self.attn_norm = LayerNorm(cfg.d_model)
        self.ff = FeedForward(rng, cfg.d_model, cfg.d_ff)
        self.ff_norm = LayerNorm(cfg.d_model)
        self.rate = cfg.dropout

    def __call__(self, x: Tensor, mask: np.ndarray, rng: np.random.Generator) -> Tensor:
        x = self.attn_norm(x + dropout(self.attn(x, x, x, mask), self.rate, rng, self.training))
        return self.ff_norm(x + dropout(self.ff(x), self.rate, rng, self.training))


class EncoderStack(Module):
    def __init__(self, rng: np.random.Generator, cfg: ModelConfig):
        self.layers = [EncoderLayer(rng, cfg) for _ in range(cfg.layers)]

    def __call__(self, x: Tensor, mask: np.ndarray, rng: np.random.Generator) -> Tensor:
        for layer in self.layers:
            x = layer(x, mask, rng)
        return x


class DecoderLayer(Module):
    """Masked self-attention, one cross-attention per enabled stream, feed-forward."""

    def __init__(self, rng: np.random.Generator, cfg: ModelConfig):
        self.self_attn = MultiHeadAttention(rng, cfg.d_model, cfg.heads)
        self.self_norm = LayerNorm(cfg.d_model)
        self.cross = {s: MultiHeadAttention(rng, cfg.d_model, cfg.heads) for s in STREAMS if s in cfg.enabled_streams}
        self.cross_norm = {s: LayerNorm(cfg.d_model) for s in self.cross}
        self.ff = FeedForward(rng, cfg.d_model, cfg.d_ff)
        self.ff_norm = LayerNorm(cfg.d_model)
        self.rate = cfg.dropout

    def __call__(self, x: Tensor, causal: np.ndarray, encoded: Encoded, rng: np.random.Generator) -> Tensor:
        drop = lambda t: dropout(t, self.rate, rng, self.training)  # noqa: E731
        x = self.self_norm(x + drop(self.self_attn(x, x, x, causal)))
        for stream, attn in self.cross.items():
            h, key_mask = encoded.outputs[stream], encoded.masks[stream]
            x = self.cross_norm[stream](x + drop(attn(x, h, h, key_mask[:, None, :])))
        return self.ff_norm(x + drop(self.ff(x)))


class MultiModalDecoder(Module):
    def __init__(self, rng: np.random.Generator, cfg: ModelConfig):
        self.layers = [DecoderLayer(rng, cfg) for _ in range(cfg.layers)]

    def __call__(self, x: Tensor, causal: np.ndarray, encoded: Encoded, rng: np.random.Generator) -> Tensor:
        for layer in self.layers:
            x = layer(x, causal, encoded, rng)
        return x


class TranslationModel(Module):
    def __init__(self, cfg: ModelConfig):
        self.config = cfg
        rng = np.random.default_rng(cfg.seed)
        self.word_table = EmbeddingTable(rng, cfg.vocab_size, cfg.d_model)
        if "video" in cfg.enabled_streams:
            self.feature_proj = FeatureEmbedding(rng, cfg.feature_dim, cfg.d_model)
        self.encoders = {s: EncoderStack(rng, cfg) for s in cfg.enabled_streams}
        self.decoder = MultiModalDecoder(rng, cfg)
        self.out_proj = Linear(rng, cfg.d_model, cfg.vocab_size)
        assign_names(self)
        self.dropout_rng = np.random.default_rng([cfg.seed, 1])

    @property
    def streams(self) -> tuple[str, ...]:
        return self.config.enabled_streams

    def state_dict(self) -> dict[str, np.ndarray]:
        return {p.name: p.data.copy() for p in self.parameters()}

    def load_state_dict(self, state: Mapping[str, np.ndarray]) -> None:
        params = {p.name: p for p in self.parameters()}
        if set(params) != set(state):
            missing = sorted(set(params) - set(state))
            extra = sorted(set(state) - set(params))
            raise CheckpointError(f"parameter mismatch: missing {missing[:3]}, unexpected {extra[:3]}")
        for name, p in params.items():
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != p.shape:
                raise CheckpointError(f"{name}: shape {arr.shape} != {p.shape}")
            p.data[...] = arr


# ---------------------------------------------------------------------------
# inputs and masks


@dataclass
class ModelInput:
    """Source streams of one sample; text streams hold token ids without the null token."""

    context: list[int] | None = None
    video: np.ndarray | None = None
    spotting: list[int] | None = None


@dataclass
class Masks:
    padding: dict[str, np.ndarray]  # stream -> [B, N] true = real position
    causal: np.ndarray  # [T, T]


def causal_mask(T: int) -> np.ndarray:
    return np.tril(np.ones((T, T), dtype=bool))


def make_masks(src_lengths: Mapping[str, Sequence[int]], tgt_length: int) -> Masks:
    """Padding masks per stream plus the lower-triangular target mask.

    Text streams get one extra leading slot for the null token, which is
    always attendable, so an empty source still has a valid key.
    """
    padding = {}
    for stream, lengths in src_lengths.items():
        lengths = np.asarray(lengths, dtype=np.int64)
        if lengths.size and lengths.min() < 0:
            raise ValueError("negative source length")
        offset = 1 if stream in TEXT_STREAMS else 0
        width = int(lengths.max(initial=0)) + offset
        padding[stream] = np.arange(width)[None, :] < (lengths[:, None] + offset)
    return Masks(padding, causal_mask(tgt_length))


@dataclass
class Encoded:
    outputs: dict[str, Tensor] = field(default_factory=dict)  # stream -> [B, N, d]
    masks: dict[str, np.ndarray] = field(default_factory=dict)  # stream -> [B, N]

    @property
    def batch_size(self) -> int:
        return next(iter(self.outputs.values())).shape[0]

    def select(self, rows: Sequence[int]) -> Encoded:
        rows = np.asarray(rows, dtype=np.int64)
        return Encoded(
            {s: Tensor(h.data[rows]) for s, h in self.outputs.items()},
            {s: m[rows] for s, m in self.masks.items()},
        )


def _pad_ids(seqs: Sequence[Sequence[int]], width: int, lead: Sequence[int] = ()) -> np.ndarray:
    out = np.full((len(seqs), width), PAD, dtype=np.int64)
    for i, s in enumerate(seqs):
        row = list(lead) + list(s)
        out[i, : len(row)] = row
    return out


def encode(model: TranslationModel, inputs: ModelInput | Sequence[ModelInput]) -> Encoded:
    """Embed, position-encode and encode every enabled stream of a batch."""
    if isinstance(inputs, ModelInput):
        inputs = [inputs]
    rng = model.dropout_rng
    cfg = model.config
    enc = Encoded()
    for stream in model.streams:
        values = [getattr(inp, stream) for inp in inputs]
        if any(v is None for v in values):
            raise SampleSchemaError(f"model expects the {stream} stream but a sample lacks it")
        if stream == "video":
            lengths = [v.shape[0] for v in values]
            masks = make_masks({stream: lengths}, 1).padding[stream]
            batch = np.zeros((len(values), masks.shape[1], cfg.feature_dim))
            for i, v in enumerate(values):
                if v.ndim != 2 or v.shape[1] != cfg.feature_dim:
                    raise DimensionError(f"video windows {v.shape} do not match feature_dim {cfg.feature_dim}")
                batch[i, : v.shape[0]] = v
            x = feature_embed(batch, model.feature_proj)
        else:
            lengths = [len(v) for v in values]
            masks = make_masks({stream: lengths}, 1).padding[stream]
            x = word_embed(_pad_ids(values, masks.shape[1], lead=(BOS,)), model.word_table)
        x = dropout(positional_encode(x), cfg.dropout, rng, model.training)
        enc.outputs[stream] = model.encoders[stream](x, masks[:, None, :], rng)
        enc.masks[stream] = masks
    return enc


def decoder_logits(
    model: TranslationModel, encoded: Encoded, tgt_in: np.ndarray, pad_to: int | None = None
) -> Tensor:
    """Teacher-forced logits [B, T, V] for shifted targets ``tgt_in`` [B, T]."""
    tgt_in = np.asarray(tgt_in, dtype=np.int64)
    if tgt_in.ndim == 1:
        tgt_in = tgt_in[None]
    if pad_to is not None and pad_to > tgt_in.shape[1]:
        padded = np.full((tgt_in.shape[0], pad_to), PAD, dtype=np.int64)
        padded[:, : tgt_in.shape[1]] = tgt_in
        tgt_in = padded
    cfg = model.config
    x = dropout(positional_encode(word_embed(tgt_in, model.word_table)), cfg.dropout, model.dropout_rng, model.training)
    x = model.decoder(x, causal_mask(tgt_in.shape[1]), encoded, model.dropout_rng)
    return model.out_proj(x)


def decode_step(model: TranslationModel, encoded: Encoded, prefix) -> np.ndarray:
    """Next-token logits after ``prefix`` (starting with BOS).

    A 1-D prefix gives [V]; a 2-D batch of equal-length prefixes gives [B, V].
    The prefix is padded to ``max_positions`` so results are independent of
    how many tokens follow it.
    """
    prefix = np.asarray(prefix, dtype=np.int64)
    single = prefix.ndim == 1
    if single:
        prefix = prefix[None]
    t = prefix.shape[1]
    if t > model.config.max_positions:
        raise LengthError(f"prefix length {t} exceeds max_positions {model.config.max_positions}")
    with no_grad():
        logits = decoder_logits(model, encoded, prefix, pad_to=model.config.max_positions).data[:, t - 1]
    return logits[0] if single else logits


def next_token_logprobs(logits: np.ndarray) -> np.ndarray:
    """Log-probabilities with PAD and BOS excluded from generation."""
    logits = np.array(logits, dtype=np.float64)
    logits[..., PAD] = -np.inf
    logits[..., BOS] = -np.inf
    return log_softmax_array(logits)


def _check_max_len(model: TranslationModel, max_len: int) -> int:
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    return min(max_len, model.config.max_positions - 1)


def greedy_decode_batch(model: TranslationModel, encoded: Encoded, max_len: int) -> list[list[int]]:
    max_len = _check_max_len(model, max_len)
    B = encoded.batch_size
    prefixes = np.full((B, 1), BOS, dtype=np.int64)
    finished = np.zeros(B, dtype=bool)
    for _ in range(max_len):
        logp = next_token_logprobs(decode_step(model, encoded, prefixes))
        nxt = np.where(finished, PAD, logp.argmax(axis=-1))
        prefixes = np.concatenate([prefixes, nxt[:, None]], axis=1)
        finished |= nxt == EOS
        if finished.all():
            break
    out = []
    for row in prefixes[:, 1:]:
        toks = []
        for tok in row:
            if tok in (EOS, PAD):
                break
            toks.append(int(tok))
        out.append(toks)
    return out


def greedy_decode(model: TranslationModel, encoded: Encoded, max_len: int) -> list[int]:
    """Argmax decoding of a single encoded sample (ties go to the lowest id)."""
    return greedy_decode_batch(model, encoded, max_len)[0]


StepFn = Callable[[list[list[int]]], np.ndarray]


def beam_search(step_logprobs: StepFn, beam: int, max_len: int, eos: int = EOS) -> tuple[list[int], float]:
    """Length-unnormalised beam search over a next-token log-prob function.

    ``step_logprobs`` maps a list of prefixes (without BOS) to [n, V] log
    probabilities. Candidates are ranked by cumulative score, ties by
    hypothesis order then token id. A candidate ending in EOS, or reaching
    ``max_len`` tokens, is retired; the best retired hypothesis is returned.
    """
    if beam < 1:
        raise ValueError("beam must be >= 1")
    live: list[tuple[list[int], float]] = [([], 0.0)]
    done: list[tuple[list[int], float]] = []
    for step in range(max_len):
        logp = step_logprobs([h for h, _ in live])
        cands = []
        for i, (hyp, score) in enumerate(live):
            for tok in np.flatnonzero(np.isfinite(logp[i])):
                cands.append((score + float(logp[i, tok]), i, int(tok)))
        cands.sort(key=lambda c: (-c[0], c[1], c[2]))
        nxt = []
        for score, i, tok in cands[:beam]:
            if tok == eos:
                done.append((live[i][0], score))
            elif step == max_len - 1:
                done.append((live[i][0] + [tok], score))
            else:
                nxt.append((live[i][0] + [tok], score))
        live = nxt
        if not live:
            break
        best_done = max((s for _, s in done), default=-np.inf)
        if best_done >= live[0][1]:
            break
    best = max(done, key=lambda d: d[1])  # max keeps the first of equal scores
    return best


def beam_decode(model: TranslationModel, encoded: Encoded, beam: int, max_len: int) -> list[int]:
    max_len = _check_max_len(model, max_len)

    def step(prefixes: list[list[int]]) -> np.ndarray:
        enc = encoded.select([0] * len(prefixes))
        batch = np.array([[BOS] + p for p in prefixes], dtype=np.int64)
        return next_token_logprobs(decode_step(model, enc, batch))

    return beam_search(step, beam, max_len)[0]


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path: str | Path, model: TranslationModel, vocabulary: Sequence[str], meta: dict | None = None) -> None:
    arrays = {f"param/{name}": data for name, data in model.state_dict().items()}
    arrays["__format__"] = np.array(CHECKPOINT_FORMAT)
    arrays["__config__"] = np.array(json.dumps(model.config.to_dict(), sort_keys=True))
    arrays["__vocab__"] = np.array(json.dumps(list(vocabulary)))
    arrays["__meta__"] = np.array(json.dumps(meta or {}, sort_keys=True))
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path: str | Path) -> tuple[TranslationModel, list[str], dict]:
    with np.load(path, allow_pickle=False) as z:
        if "__format__" not in z.files or str(z["__format__"]) != CHECKPOINT_FORMAT:
            raise CheckpointError(f"{path}: not a {CHECKPOINT_FORMAT} archive")
        cfg = json.loads(str(z["__config__"]))
        cfg["enabled_streams"] = tuple(cfg["enabled_streams"])
        model = TranslationModel(ModelConfig(**cfg))
        model.load_state_dict({k[len("param/"):]: z[k] for k in z.files if k.startswith("param/")})
        vocab = json.loads(str(z["__vocab__"]))
        meta = json.loads(str(z["__meta__"]))
    model.eval()
    return model, vocab, meta
