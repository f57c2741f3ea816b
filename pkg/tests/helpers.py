"""Shared fixtures: a table-driven toy scorer and an exhaustive decoder."""
from __future__ import annotations

import functools
import itertools
import time

import numpy as np

from s2s.beam import length_penalty
from s2s.model import EOS

# criterion number -> (PASS/FAIL, title, detail); printed at the end of a pytest run
ACCEPTANCE: dict = {}


def criterion(number: int, title: str):
    """Record a test's outcome as an acceptance line.  The test may return a detail string."""
    def wrap(fn):
        @functools.wraps(fn)
        def run(*args, **kwargs):
            start = time.perf_counter()
            try:
                detail = fn(*args, **kwargs)
            except BaseException as e:
                first = str(e).splitlines()[0][:160] if str(e) else ""
                ACCEPTANCE[number] = ("FAIL", title, f"{type(e).__name__}: {first}")
                raise
            elapsed = time.perf_counter() - start
            ACCEPTANCE[number] = ("PASS", title, f"{detail + '; ' if detail else ''}{elapsed:.1f}s")
        return run
    return wrap


class TableModel:
    """Toy autoregressive model whose next-token distribution depends on the prefix.

    Log-probabilities for a prefix are drawn from ``default_rng([seed, len, *prefix])``
    so they are stable regardless of the order in which prefixes are visited.
    """

    def __init__(self, vocab: int, seed: int, temperature: float = 1.0, eos_penalty: float = 0.0):
        self.vocab = vocab
        self.seed = seed
        self.temperature = temperature
        self.eos_penalty = eos_penalty
        self._cache: dict = {}

    def logprobs(self, prefix: tuple) -> np.ndarray:
        if prefix not in self._cache:
            self._cache[prefix] = self._draw(prefix)
        return self._cache[prefix]

    def _draw(self, prefix: tuple) -> np.ndarray:
        rng = np.random.default_rng([self.seed, len(prefix), *prefix])
        z = rng.normal(size=self.vocab) * self.temperature
        if EOS < self.vocab:
            z[EOS] -= self.eos_penalty
        z = z - z.max()
        return z - np.log(np.exp(z).sum())

    # Scorer protocol
    def start(self, source):
        return [None]

    def step(self, state, tokens):
        prefixes = [() if p is None else p + (int(t),) for p, t in zip(state, tokens)]
        return np.stack([self.logprobs(p) for p in prefixes]), prefixes

    def select(self, state, index):
        return [state[i] for i in index]


def enumerate_outputs(model: TableModel, max_length: int, alpha: float) -> list:
    """Every complete output with its (logprob, normalized score), in search order.

    Outputs end at the first EOS, or are cut at ``max_length``.  Log-probs are
    accumulated left to right exactly as the search does.
    """
    out = []
    for length in range(1, max_length + 1):
        for seq in itertools.product(range(model.vocab), repeat=length):
            if EOS in seq[:-1]:
                continue
            if seq[-1] != EOS and length < max_length:
                continue
            total = np.zeros(1)
            for t in range(length):
                total = total + model.logprobs(seq[:t])[seq[t]]
            lp = float(total[0])
            out.append((seq, lp, lp / length_penalty(length, alpha)))
    return out


def exhaustive_best(model: TableModel, max_length: int, alpha: float) -> tuple:
    outs = enumerate_outputs(model, max_length, alpha)
    return min(outs, key=lambda o: (-o[2], o[0]))
