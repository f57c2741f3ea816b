"""Beam search with length normalization, plus the matching greedy decoder."""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Any, Protocol

import numpy as np

from .model import EOS, PAD, SOS, Seq2Seq


@dataclass(frozen=True)
class BeamConfig:
    width: int = 10
    alpha: float = 0.6
    max_length: int = 100

    def __post_init__(self):
        if self.width < 1:
            raise ValueError("beam width must be >= 1")
        if self.alpha < 0:
            raise ValueError("length penalty alpha must be >= 0")
        if self.max_length < 1:
            raise ValueError("max_length must be >= 1")

    def for_source(self, source_length: int) -> "BeamConfig":
        """Cap the output length at ``2 * source_length + 10``."""
        return replace(self, max_length=min(self.max_length, 2 * source_length + 10))


@dataclass
class Hypothesis:
    tokens: tuple
    logprob: float
    finished: bool = False
    score: float = 0.0
    state: Any = None

    @property
    def output(self) -> list:
        """Token ids with the trailing EOS removed."""
        toks = list(self.tokens)
        if toks and toks[-1] == EOS:
            toks.pop()
        return toks


@dataclass
class BeamResult:
    best: Hypothesis
    nbest: list = field(default_factory=list)


def length_penalty(length: int, alpha: float) -> float:
    """``((5 + length) / 6) ** alpha``; a hypothesis is ranked by logP / lp."""
    if length < 1:
        raise ValueError("length must be >= 1")
    return ((5.0 + length) / 6.0) ** alpha


class Scorer(Protocol):
    """What the search needs from a model.

    ``start`` returns a batch-of-one decoder state; ``step`` consumes the
    previous token of every live hypothesis and returns next-token
    log-probabilities ``[n, V]`` and the advanced state; ``select`` reorders
    or replicates a state along the hypothesis axis.
    """

    def start(self, source) -> Any: ...

    def step(self, state, tokens: np.ndarray) -> tuple: ...

    def select(self, state, index: np.ndarray) -> Any: ...


def _log_softmax(x: np.ndarray) -> np.ndarray:
    x = x.astype(np.float64)
    s = x - x.max(axis=1, keepdims=True)
    return s - np.log(np.exp(s).sum(axis=1, keepdims=True))


class ModelScorer:
    """Adapts :class:`Seq2Seq` to the :class:`Scorer` protocol (inference only)."""

    def __init__(self, model: Seq2Seq):
        self.model = model

    def start(self, source) -> tuple:
        source = np.asarray(source)
        if source.ndim == 1:
            source = source[None, :]
        enc = self.model.encode(source)
        return enc, self.model.init_decoder(enc), {source.shape[0]: enc}

    def _memory(self, state, n: int):
        enc, _, cache = state
        if n not in cache:
            cache[n] = enc.select(np.zeros(n, dtype=np.int64))
        return cache[n]

    def step(self, state, tokens: np.ndarray) -> tuple:
        enc, dec, cache = state
        out = self.model.decode_step(np.asarray(tokens), dec, self._memory(state, len(tokens)))
        return _log_softmax(out.logits.data), (enc, out.state, cache)

    def select(self, state, index: np.ndarray):
        enc, dec, cache = state
        return enc, dec.select(index), cache


def _as_scorer(model) -> Scorer:
    return ModelScorer(model) if isinstance(model, Seq2Seq) else model


def beam_search(model, source, cfg: BeamConfig) -> BeamResult:
    """Search for the output maximizing logP(y|x) / lp(|y|).

    Each step expands every live hypothesis over the vocabulary and keeps the
    ``width`` best candidates by cumulative log-probability; candidates ending
    in EOS move to the finished set.  The search stops when no live
    hypothesis remains, when no live hypothesis can still beat the best
    finished score, or at ``max_length`` (live ones are then finished as-is).
    Ties are broken toward the lexicographically smaller token sequence.
    ``|y|`` counts generated tokens including EOS.
    """
    if source is None or len(source) == 0:
        raise ValueError("cannot decode an empty source")
    scorer = _as_scorer(model)
    state = scorer.start(source)
    live_tokens: list = [()]
    live_logp = np.zeros(1)
    last = np.array([SOS], dtype=np.int64)
    finished: list = []
    lp_max = length_penalty(cfg.max_length, cfg.alpha)

    for t in range(cfg.max_length):
        logp, state = scorer.step(state, last)
        cand = (live_logp[:, None] + logp).reshape(-1)
        vocab = logp.shape[1]
        k = min(cfg.width, cand.size)
        if cand.size > k:
            threshold = -np.partition(-cand, k - 1)[k - 1]
            pool = np.flatnonzero(cand >= threshold)
        else:
            pool = np.arange(cand.size)
        keyed = sorted(((-cand[i], live_tokens[i // vocab] + (int(i % vocab),), int(i)) for i in pool))
        chosen = keyed[:k]

        parents, new_tokens, new_logp = [], [], []
        length = t + 1
        for neg, toks, i in chosen:
            if toks[-1] == EOS:
                finished.append(Hypothesis(toks, -neg, True, -neg / length_penalty(length, cfg.alpha)))
            else:
                parents.append(i // vocab)
                new_tokens.append(toks)
                new_logp.append(-neg)
        if not parents:
            break
        live_tokens = new_tokens
        live_logp = np.array(new_logp)
        if length == cfg.max_length:
            lp = length_penalty(length, cfg.alpha)
            finished.extend(Hypothesis(tk, lg, True, lg / lp) for tk, lg in zip(live_tokens, new_logp))
            break
        if finished:
            best = max(h.score for h in finished)
            if best > live_logp.max() / lp_max:
                break
        state = scorer.select(state, np.array(parents, dtype=np.int64))
        last = np.array([tk[-1] for tk in live_tokens], dtype=np.int64)

    ranked = sorted(finished, key=lambda h: (-h.score, h.tokens))
    return BeamResult(ranked[0], ranked[: cfg.width])


def greedy_decode(model, source, max_length: int) -> list:
    """Argmax decoding of one source sentence; returns ids without EOS."""
    scorer = _as_scorer(model)
    state = scorer.start(source)
    last = np.array([SOS], dtype=np.int64)
    total = np.zeros(1)
    out = []
    for _ in range(max_length):
        logp, state = scorer.step(state, last)
        tok = int(np.argmax(total[:, None] + logp))
        total = total + logp[0, tok]
        if tok == EOS:
            break
        out.append(tok)
        last = np.array([tok], dtype=np.int64)
    return out


def greedy_decode_batch(model: Seq2Seq, sources: list, max_length: int | None = None) -> list:
    """Batched argmax decoding of several sources (validation-time helper)."""
    if not sources:
        return []
    width = max(len(s) for s in sources)
    batch = np.full((len(sources), width), PAD, dtype=np.int64)
    for i, s in enumerate(sources):
        batch[i, : len(s)] = s
    limit = max_length or 2 * width + 10
    enc = model.encode(batch)
    state = model.init_decoder(enc)
    last = np.full(len(sources), SOS, dtype=np.int64)
    done = np.zeros(len(sources), dtype=bool)
    outs: list = [[] for _ in sources]
    for _ in range(limit):
        step = model.decode_step(last, state, enc)
        tok = step.logits.data.argmax(axis=1)
        for i in np.flatnonzero(~done):
            if tok[i] == EOS:
                done[i] = True
            else:
                outs[i].append(int(tok[i]))
        if done.all():
            break
        state = step.state
        last = tok
    return outs


def nbest_lines(index: int, result: BeamResult, render) -> list:
    """``index ||| tokens ||| logprob ||| score`` lines for one sentence."""
    return [f"{index} ||| {' '.join(render(h.output))} ||| {h.logprob:.6f} ||| {h.score:.6f}"
            for h in result.nbest]
