"""Encoder / attention / decoder translation model."""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .cells import CELL_KINDS, RESIDUAL_MODES, CellState, ParameterSet, Stack, make_stack_spec
from .tensor import ShapeError, Tensor

PAD, UNK, SOS, EOS = 0, 1, 2, 3
ATTENTION_TYPES = ("mul", "add", "none-state", "none-input")


@dataclass
class EncoderConfig:
    direction: str = "bidi"
    depth: int = 2
    reverse_source: bool = False
    cell: str = "gru"
    residual: str = "none"


@dataclass
class DecoderConfig:
    depth: int = 2
    cell: str = "gru"
    residual: str = "none"


@dataclass
class AttentionConfig:
    type: str = "mul"
    dim: int = 512


@dataclass
class ModelConfig:
    """Architecture hyperparameters; defaults are the 512-unit GRU baseline."""

    vocab_size: int = 37000
    embedding_dim: int = 512
    units: int = 512
    dropout: float = 0.2
    forget_bias: float = 1.0
    init_scale: float = 0.04
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)
    attention: AttentionConfig = field(default_factory=AttentionConfig)

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        enc, dec, att = self.encoder, self.decoder, self.attention
        if self.vocab_size <= 4:
            raise ValueError("vocab_size must exceed the 4 reserved ids")
        if self.embedding_dim <= 0 or self.units <= 0:
            raise ValueError("embedding_dim and units must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must be in [0, 1), got {self.dropout}")
        if enc.direction not in ("uni", "bidi"):
            raise ValueError(f"encoder.direction must be uni or bidi, got {enc.direction!r}")
        if enc.depth < 1 or dec.depth < 1:
            raise ValueError("encoder and decoder depth must be >= 1")
        if enc.direction == "bidi" and enc.depth % 2:
            raise ValueError("a bidirectional encoder's total depth must be even "
                             "(half the layers run in each direction)")
        for part in (enc, dec):
            if part.cell not in CELL_KINDS:
                raise ValueError(f"cell must be one of {CELL_KINDS}, got {part.cell!r}")
            if part.residual not in RESIDUAL_MODES:
                raise ValueError(f"residual must be one of {RESIDUAL_MODES}, got {part.residual!r}")
        if att.type not in ATTENTION_TYPES:
            raise ValueError(f"attention.type must be one of {ATTENTION_TYPES}, got {att.type!r}")
        if att.type in ("mul", "add") and att.dim <= 0:
            raise ValueError("attention.dim must be positive for mul/add attention")

    # derived sizes -----------------------------------------------------------------
    @property
    def encoder_layers_per_direction(self) -> int:
        return self.encoder.depth // 2 if self.encoder.direction == "bidi" else self.encoder.depth

    @property
    def encoder_state_dim(self) -> int:
        return self.units * (2 if self.encoder.direction == "bidi" else 1)

    @property
    def has_attention(self) -> bool:
        return self.attention.type in ("mul", "add")

    @property
    def decoder_input_dim(self) -> int:
        if self.attention.type == "none-state":
            return self.embedding_dim
        return self.embedding_dim + self.encoder_state_dim

    @property
    def needs_bridge(self) -> bool:
        return self.attention.type == "none-state" and self.encoder_state_dim != self.units

    @property
    def output_input_dim(self) -> int:
        return self.units + (self.encoder_state_dim if self.has_attention else 0)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        enc = EncoderConfig(**d.pop("encoder", {}))
        dec = DecoderConfig(**d.pop("decoder", {}))
        att = AttentionConfig(**d.pop("attention", {}))
        return cls(encoder=enc, decoder=dec, attention=att, **d)

    def digest(self) -> bytes:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode("utf-8")
        return hashlib.sha256(blob).digest()


def count_parameters(config: ModelConfig) -> int:
    """Closed-form parameter total for a model built from ``config``."""
    gates = {"vanilla": 1, "gru": 3, "lstm": 4}
    V, E, u = config.vocab_size, config.embedding_dim, config.units

    def stack(kind, first_in, depth):
        return sum(gates[kind] * ((first_in if i == 0 else u) + u + 1) * u for i in range(depth))

    total = 2 * V * E  # separate source and target embeddings
    directions = 2 if config.encoder.direction == "bidi" else 1
    total += directions * stack(config.encoder.cell, E, config.encoder_layers_per_direction)
    total += stack(config.decoder.cell, config.decoder_input_dim, config.decoder.depth)
    if config.has_attention:
        a = config.attention.dim
        total += config.encoder_state_dim * a + u * a
        if config.attention.type == "add":
            total += a
    if config.needs_bridge:
        total += config.encoder_state_dim * u + u
    total += config.output_input_dim * V + V
    return total


def reverse_within_length(lengths: np.ndarray, steps: int) -> np.ndarray:
    """Time index [T, B] that reverses each column's first ``length`` steps.

    Padding positions map to themselves, so applying it twice is the identity.
    """
    t = np.arange(steps)[:, None]
    lengths = np.asarray(lengths)[None, :]
    return np.where(t < lengths, lengths - 1 - t, t)


@dataclass
class EncoderOutput:
    """Annotations ``states [m, B, d]`` plus everything attention needs."""

    states: Tensor
    final: list
    final_h: Tensor
    mask: np.ndarray
    memory: Tensor
    keys: Tensor | None

    def select(self, index: np.ndarray) -> "EncoderOutput":
        w = Tensor._wrap
        return EncoderOutput(
            states=w(self.states.data[:, index]),
            final=[[s.select(index) for s in layer] for layer in self.final],
            final_h=w(self.final_h.data[index]),
            mask=self.mask[index],
            memory=w(self.memory.data[index]),
            keys=None if self.keys is None else w(self.keys.data[index]),
        )


@dataclass
class DecoderState:
    layers: list
    context: Tensor | None

    def select(self, index: np.ndarray) -> "DecoderState":
        ctx = None if self.context is None else Tensor._wrap(self.context.data[index])
        return DecoderState([s.select(index) for s in self.layers], ctx)


@dataclass
class DecoderStepOutput:
    logits: Tensor | None
    attention: Tensor | None
    state: DecoderState
    context: Tensor | None
    features: Tensor


class Seq2Seq:
    """Encoder-decoder with input feeding and Luong-style output layer.

    Parameters are created in a fixed order from ``np.random.default_rng(seed)``
    so a (config, seed) pair always yields the same model.
    """

    def __init__(self, config: ModelConfig, seed: int = 0):
        config.validate()
        self.config = config
        self.seed = seed
        rng = np.random.default_rng(seed)
        c = config
        s = c.init_scale
        self.params = ParameterSet()
        p = self.params
        self.src_embed = p.new("encoder/embedding", T.init((c.vocab_size, c.embedding_dim), "uniform", rng, s))
        self.tgt_embed = p.new("decoder/embedding", T.init((c.vocab_size, c.embedding_dim), "uniform", rng, s))
        per_dir = c.encoder_layers_per_direction
        enc_spec = make_stack_spec(c.encoder.cell, c.embedding_dim, c.units, per_dir,
                                   c.encoder.residual, c.dropout, c.forget_bias)
        self.enc_fwd = Stack(enc_spec, p, "encoder/fw", rng, s)
        self.enc_bwd = Stack(enc_spec, p, "encoder/bw", rng, s) if c.encoder.direction == "bidi" else None
        dec_spec = make_stack_spec(c.decoder.cell, c.decoder_input_dim, c.units, c.decoder.depth,
                                   c.decoder.residual, c.dropout, c.forget_bias)
        self.dec = Stack(dec_spec, p, "decoder", rng, s)
        self.W1 = self.W2 = self.v = None
        if c.has_attention:
            a = c.attention.dim
            self.W1 = p.new("attention/W1", T.init((c.encoder_state_dim, a), "uniform", rng, s))
            self.W2 = p.new("attention/W2", T.init((c.units, a), "uniform", rng, s))
            if c.attention.type == "add":
                self.v = p.new("attention/v", T.init((a, 1), "uniform", rng, s))
        self.bridge_W = self.bridge_b = None
        if c.needs_bridge:
            self.bridge_W = p.new("bridge/W", T.init((c.encoder_state_dim, c.units), "uniform", rng, s))
            self.bridge_b = p.new("bridge/b", T.init((c.units,), "zeros"))
        self.out_W = p.new("output/W", T.init((c.output_input_dim, c.vocab_size), "uniform", rng, s))
        self.out_b = p.new("output/b", T.init((c.vocab_size,), "zeros"))

    def parameters(self) -> list:
        return list(self.params.values())

    def num_parameters(self) -> int:
        return self.params.count()

    def state_dict(self) -> dict:
        return {name: p.data for name, p in self.params.items()}

    def load_state_dict(self, arrays: dict) -> None:
        missing = set(self.params) ^ set(arrays)
        if missing:
            raise KeyError(f"parameter set mismatch: {sorted(missing)}")
        for name, p in self.params.items():
            arr = np.asarray(arrays[name])
            if arr.shape != p.shape:
                raise ShapeError(f"{name}: expected shape {p.shape}, got {arr.shape}")
            p.data = arr.astype(p.data.dtype, copy=True)

    # encoder ---------------------------------------------------------------------
    def encode(self, source: np.ndarray, training: bool = False, rng=None) -> EncoderOutput:
        """Encode a right-padded batch of source ids ``[B, m]``."""
        source = np.asarray(source)
        if source.ndim != 2 or source.shape[1] < 1:
            raise ValueError(f"source must be a non-empty [batch, length] array, got {source.shape}")
        if source.min() < 0 or source.max() >= self.config.vocab_size:
            raise IndexError(f"source id out of range for vocabulary of size {self.config.vocab_size}")
        mask = source != PAD
        lengths = mask.sum(axis=1)
        if (lengths == 0).any():
            raise ValueError("every source sentence needs at least one token")
        ids = source.T  # time-major [m, B]
        steps = ids.shape[0]
        rev = reverse_within_length(lengths, steps)
        cols = np.arange(ids.shape[1])[None, :]
        if self.config.encoder.reverse_source:
            ids = ids[rev, cols]
        tmask = mask.T

        fwd_out, fwd_final = self.enc_fwd.run(T.embedding(self.src_embed.value, ids), tmask,
                                              training=training, rng=rng)
        if self.enc_bwd is None:
            states, final = fwd_out, [fwd_final]
            final_h = fwd_final[-1].h
        else:
            bwd_in = T.embedding(self.src_embed.value, ids[rev, cols])
            bwd_out, bwd_final = self.enc_bwd.run(bwd_in, tmask, training=training, rng=rng)
            states = T.concat([fwd_out, T.gather_time(bwd_out, rev)], axis=-1)
            final = [fwd_final, bwd_final]
            final_h = T.concat([fwd_final[-1].h, bwd_final[-1].h], axis=-1)
        memory = T.transpose(states, (1, 0, 2))
        keys = T.matmul(memory, self.W1.value) if self.W1 is not None else None
        return EncoderOutput(states, final, final_h, mask, memory, keys)

    # attention -------------------------------------------------------------------
    def attention_score(self, query: Tensor, enc: EncoderOutput) -> Tensor:
        """Scores ``[B, m]`` of decoder state ``query [B, units]`` against every annotation."""
        kind = self.config.attention.type
        if kind not in ("mul", "add"):
            raise ValueError(f"attention_score is undefined for attention type {kind!r}")
        return score(kind, enc.keys, T.matmul(query, self.W2.value), self.v.value if self.v else None)

    # decoder ---------------------------------------------------------------------
    def init_decoder(self, enc: EncoderOutput) -> DecoderState:
        batch = enc.mask.shape[0]
        c = self.config
        layers = self.dec.zero_state(batch)
        if c.attention.type == "none-state":
            h0 = enc.final_h
            if self.bridge_W is not None:
                h0 = T.add(T.matmul(h0, self.bridge_W.value), self.bridge_b.value)
            layers = [CellState(h0, st.c) for st in layers]
        context = None
        if c.has_attention:
            context = Tensor._wrap(np.zeros((batch, c.encoder_state_dim), dtype=self.out_W.data.dtype))
        return DecoderState(layers, context)

    def decode_step(self, prev_ids: np.ndarray, state: DecoderState, enc: EncoderOutput,
                    training: bool = False, rng=None, with_logits: bool = True) -> DecoderStepOutput:
        c = self.config
        emb = T.embedding(self.tgt_embed.value, np.asarray(prev_ids))
        kind = c.attention.type
        if kind in ("mul", "add"):
            inp = T.concat([emb, state.context])
        elif kind == "none-input":
            inp = T.concat([emb, enc.final_h])
        else:
            inp = emb
        top, layers = self.dec.step(inp, state.layers, training, rng)
        weights = context = None
        if c.has_attention:
            context, weights = attention_context(self.attention_score(top, enc), enc.memory, enc.mask)
            features = T.concat([top, context])
        else:
            features = top
        logits = None
        if with_logits:
            logits = T.add(T.matmul(features, self.out_W.value), self.out_b.value)
        return DecoderStepOutput(logits, weights, DecoderState(layers, context), context, features)

    def sequence_nll(self, source: np.ndarray, target: np.ndarray, training: bool = False,
                     rng=None, reduce: str = "mean") -> Tensor:
        """Teacher-forced NLL of ``target [B, k]`` (EOS-terminated, PAD-padded).

        ``reduce="mean"`` averages over non-padding target tokens; ``"sum"``
        returns the total.
        """
        target = np.asarray(target)
        if target.ndim != 2 or target.shape[1] == 0 or not (target != PAD).any():
            raise ValueError("target batch is empty")
        enc = self.encode(source, training, rng)
        state = self.init_decoder(enc)
        batch, steps = target.shape
        prev = np.full(batch, SOS, dtype=np.int64)
        feats = []
        for t in range(steps):
            out = self.decode_step(prev, state, enc, training, rng, with_logits=False)
            feats.append(out.features)
            state = out.state
            prev = target[:, t]
        stacked = T.reshape(T.stack(feats, 0), (steps * batch, -1))
        logits = T.add(T.matmul(stacked, self.out_W.value), self.out_b.value)
        flat = target.T.reshape(-1)
        weights = (flat != PAD)
        total = T.nll(logits, flat, weights)
        if reduce == "sum":
            return total
        return T.mul(total, 1.0 / weights.sum())


def score(kind: str, keys: Tensor, query: Tensor, v: Tensor | None = None) -> Tensor:
    """Alignment scores from projected keys ``W1 h [B, m, a]`` and query ``W2 s [B, a]``.

    ``mul``: <W1 h_j, W2 s>; ``add``: <v, tanh(W1 h_j + W2 s)>.
    """
    batch, m, a = keys.shape
    if kind == "mul":
        return T.reshape(T.matmul(keys, T.reshape(query, (batch, a, 1))), (batch, m))
    if kind == "add":
        hidden = T.tanh(T.add(keys, T.reshape(query, (batch, 1, a))))
        return T.reshape(T.matmul(hidden, v), (batch, m))
    raise ValueError(f"no score function for attention type {kind!r}")


def attention_context(scores: Tensor, memory: Tensor, mask: np.ndarray) -> tuple:
    """Masked softmax over ``scores [B, m]`` and weighted sum of ``memory [B, m, d]``.

    Returns ``(context [B, d], weights [B, m])``.
    """
    weights = T.softmax(scores, axis=-1, mask=mask)
    batch, m = weights.shape
    ctx = T.matmul(T.reshape(weights, (batch, 1, m)), memory)
    return T.reshape(ctx, (batch, memory.shape[-1])), weights
