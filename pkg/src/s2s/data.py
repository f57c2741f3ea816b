"""Corpus reading, synthetic toy tasks and length-bucketed batching."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .bpe import Vocabulary, debpe
from .model import EOS, PAD

TASKS = ("copy", "reverse")


def read_lines(path: str) -> list:
    with open(path, encoding="utf-8") as fh:
        return [line.rstrip("\n") for line in fh]


def read_parallel(src_path: str, tgt_path: str) -> list:
    """Line-aligned (source tokens, target tokens) pairs."""
    src, tgt = read_lines(src_path), read_lines(tgt_path)
    if len(src) != len(tgt):
        raise ValueError(f"{src_path} has {len(src)} lines but {tgt_path} has {len(tgt)}")
    return [(s.split(), t.split()) for s, t in zip(src, tgt)]


def filter_pairs(pairs: list, max_len: int) -> list:
    """Drop pairs with an empty side or a side longer than ``max_len`` tokens."""
    return [(s, t) for s, t in pairs if 0 < len(s) <= max_len and 0 < len(t) <= max_len]


def symbol_names(count: int) -> list:
    return [f"w{i}" for i in range(count)]


def synthetic_pairs(task: str, n: int, vocab_size: int, min_len: int, max_len: int,
                    rng: np.random.Generator) -> list:
    """Random token strings over ``vocab_size - 4`` symbols; target copies or reverses them."""
    if task not in TASKS:
        raise ValueError(f"task must be one of {TASKS}, got {task!r}")
    names = symbol_names(vocab_size - 4)
    pairs = []
    for _ in range(n):
        length = int(rng.integers(min_len, max_len + 1))
        src = [names[i] for i in rng.integers(0, len(names), size=length)]
        pairs.append((src, list(src) if task == "copy" else src[::-1]))
    return pairs


def encode_pairs(pairs: list, vocab: Vocabulary) -> list:
    """Id arrays per pair; targets get a trailing EOS."""
    return [(np.array(vocab.encode(s), dtype=np.int64),
             np.array(vocab.encode(t) + [EOS], dtype=np.int64)) for s, t in pairs]


def pad(seqs: list) -> np.ndarray:
    width = max(len(s) for s in seqs)
    out = np.full((len(seqs), width), PAD, dtype=np.int64)
    for i, s in enumerate(seqs):
        out[i, : len(s)] = s
    return out


def render_ids(vocab: Vocabulary | None):
    """Map output ids to word strings (undoing BPE) for BLEU."""
    if vocab is None:
        return lambda ids: [str(i) for i in ids]
    return lambda ids: debpe(vocab.decode(ids))


@dataclass
class BatchStream:
    """Deterministic, random-access batch schedule.

    Each epoch shuffles the corpus with ``rng([seed, epoch])``, sorts pools of
    ``pool`` batches by length to limit padding, and shuffles the batch order.
    ``batch(step)`` (1-based) is a pure function of (data, seed, step), which is
    what makes resumed training identical to an uninterrupted run.
    """

    data: list
    batch_size: int
    seed: int
    pool: int = 16

    def __post_init__(self):
        if not self.data:
            raise ValueError("cannot batch an empty corpus")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        self._epoch = None
        self._plan: list = []
        self.batches_per_epoch = -(-len(self.data) // self.batch_size)

    def _make_plan(self, epoch: int) -> list:
        rng = np.random.default_rng([self.seed, epoch])
        order = rng.permutation(len(self.data))
        size = self.batch_size * self.pool
        batches = []
        for start in range(0, len(order), size):
            chunk = sorted(order[start:start + size],
                           key=lambda i: (len(self.data[i][0]), len(self.data[i][1])))
            batches.extend(chunk[j:j + self.batch_size] for j in range(0, len(chunk), self.batch_size))
        return [batches[i] for i in rng.permutation(len(batches))]

    def indices(self, step: int) -> list:
        epoch, k = divmod(step - 1, self.batches_per_epoch)
        if epoch != self._epoch:
            self._plan = self._make_plan(epoch)
            self._epoch = epoch
        return self._plan[k]

    def batch(self, step: int) -> tuple:
        idx = self.indices(step)
        return pad([self.data[i][0] for i in idx]), pad([self.data[i][1] for i in idx])
