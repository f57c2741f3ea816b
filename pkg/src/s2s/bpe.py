"""Byte-pair-encoding subword units and the shared token vocabulary."""
from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable

END = "</w>"
CONT = "@@"
MERGES_HEADER = "#version: s2s-bpe-1"
RESERVED = ("<pad>", "<unk>", "<s>", "</s>")


@dataclass
class MergeTable:
    """Learned merges in priority order (index 0 is applied first)."""

    merges: list = field(default_factory=list)

    def __post_init__(self):
        self.merges = [tuple(m) for m in self.merges]
        if len(set(self.merges)) != len(self.merges):
            raise ValueError("merge table contains duplicate pairs")
        self.ranks = {pair: i for i, pair in enumerate(self.merges)}

    def __len__(self) -> int:
        return len(self.merges)

    def save(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(MERGES_HEADER + "\n")
            for a, b in self.merges:
                fh.write(f"{a} {b}\n")

    @classmethod
    def load(cls, path: str) -> "MergeTable":
        with open(path, encoding="utf-8") as fh:
            lines = fh.read().splitlines()
        if not lines or lines[0].strip() != MERGES_HEADER:
            raise ValueError(f"{path}: missing '{MERGES_HEADER}' header")
        merges = []
        for n, line in enumerate(lines[1:], start=2):
            if not line.strip():
                continue
            parts = line.split(" ")
            if len(parts) != 2:
                raise ValueError(f"{path}:{n}: expected 'left right', got {line!r}")
            merges.append((parts[0], parts[1]))
        return cls(merges)


def word_counts(lines: Iterable[str]) -> Counter:
    counts: Counter = Counter()
    for line in lines:
        counts.update(line.split())
    return counts


def _pair_counts(vocab: dict) -> Counter:
    pairs: Counter = Counter()
    for symbols, freq in vocab.items():
        for pair in zip(symbols, symbols[1:]):
            pairs[pair] += freq
    return pairs


def _merge_word(symbols: tuple, pair: tuple) -> tuple:
    a, b = pair
    out = []
    i = 0
    n = len(symbols)
    while i < n:
        if i + 1 < n and symbols[i] == a and symbols[i + 1] == b:
            out.append(a + b)
            i += 2
        else:
            out.append(symbols[i])
            i += 1
    return tuple(out)


def _tie_key(pair: tuple) -> tuple:
    # the end-of-word marker orders after every ordinary character
    return tuple(sym.replace(END, "\U0010ffff") for sym in pair)


def learn_bpe(counts: dict, num_merges: int, min_frequency: int = 2) -> MergeTable:
    """Learn merges from a word-frequency map.

    Each word becomes its characters plus ``</w>``; the most frequent adjacent
    pair (weighted by word count) is merged repeatedly.  Equal frequencies go
    to the lexicographically smallest ``(left, right)``, with ``</w>`` ordered
    after every ordinary character.  Learning stops early
    once no pair occurs ``min_frequency`` times.
    """
    if num_merges < 0:
        raise ValueError("num_merges must be >= 0")
    if not counts:
        raise ValueError("cannot learn BPE from an empty corpus")
    vocab = {tuple(w) + (END,): f for w, f in counts.items() if w}
    if not vocab:
        raise ValueError("cannot learn BPE from an empty corpus")
    pairs = _pair_counts(vocab)
    # which words contain each pair, so a merge only rescans those words
    where: dict = {}
    for symbols in vocab:
        for pair in zip(symbols, symbols[1:]):
            where.setdefault(pair, set()).add(symbols)

    merges = []
    for _ in range(num_merges):
        if not pairs:
            break
        best = min(pairs.items(), key=lambda kv: (-kv[1], _tie_key(kv[0])))
        if best[1] < min_frequency:
            break
        pair = best[0]
        merges.append(pair)
        for old in list(where.get(pair, ())):
            if old not in vocab:
                continue
            freq = vocab.pop(old)
            new = _merge_word(old, pair)
            vocab[new] = vocab.get(new, 0) + freq
            for p in zip(old, old[1:]):
                pairs[p] -= freq
                if pairs[p] <= 0:
                    del pairs[p]
                where.get(p, set()).discard(old)
            for p in zip(new, new[1:]):
                pairs[p] += freq
                where.setdefault(p, set()).add(new)
        pairs.pop(pair, None)
    return MergeTable(merges)


def segment(word: str, merges: MergeTable) -> list:
    """Raw symbol sequence (with ``</w>``) after applying ``merges``."""
    symbols = list(word) + [END]
    ranks = merges.ranks
    while len(symbols) > 1:
        ranked = [(ranks.get(p, None), i) for i, p in enumerate(zip(symbols, symbols[1:]))]
        ranked = [r for r in ranked if r[0] is not None]
        if not ranked:
            break
        rank = min(ranked)[0]
        pair = merges.merges[rank]
        symbols = list(_merge_word(tuple(symbols), pair))
    return symbols


def render(symbols: list) -> list:
    """Turn raw symbols into output units: ``x@@`` for continuations, final unit bare."""
    if symbols and symbols[-1] == END:
        symbols = symbols[:-1]
    if not symbols:
        return []
    last = symbols[-1]
    if last.endswith(END):
        last = last[: -len(END)]
    return [s + CONT for s in symbols[:-1]] + [last]


def apply_bpe(word: str, merges: MergeTable) -> list:
    return render(segment(word, merges))


def apply_bpe_line(line: str, merges: MergeTable, cache: dict | None = None) -> list:
    cache = {} if cache is None else cache
    out = []
    for word in line.split():
        if word not in cache:
            cache[word] = apply_bpe(word, merges)
        out.extend(cache[word])
    return out


def debpe(tokens: Iterable[str]) -> list:
    """Join ``x@@ y`` continuations back into words."""
    words = []
    buf = ""
    for tok in tokens:
        if tok.endswith(CONT):
            buf += tok[: -len(CONT)]
        else:
            words.append(buf + tok)
            buf = ""
    if buf:
        words.append(buf)
    return words


class Vocabulary:
    """Token <-> id bijection with PAD/UNK/SOS/EOS fixed at ids 0-3."""

    def __init__(self, tokens: Iterable[str] = ()):
        self.itos = list(RESERVED)
        self.stoi = {t: i for i, t in enumerate(self.itos)}
        for t in tokens:
            self.add(t)

    def add(self, token: str) -> int:
        if token not in self.stoi:
            if not token or any(ch.isspace() for ch in token):
                raise ValueError(f"invalid token {token!r}")
            self.stoi[token] = len(self.itos)
            self.itos.append(token)
        return self.stoi[token]

    def __len__(self) -> int:
        return len(self.itos)

    def __contains__(self, token: str) -> bool:
        return token in self.stoi

    def encode(self, tokens: Iterable[str]) -> list:
        unk = self.stoi["<unk>"]
        return [self.stoi.get(t, unk) for t in tokens]

    def decode(self, ids: Iterable[int]) -> list:
        return [self.itos[i] for i in ids]

    def save(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for i, t in enumerate(self.itos):
                fh.write(f"{t}\t{i}\n")

    @classmethod
    def load(cls, path: str) -> "Vocabulary":
        rows = []
        with open(path, encoding="utf-8") as fh:
            for n, line in enumerate(fh, start=1):
                line = line.rstrip("\n")
                if not line:
                    continue
                tok, _, idx = line.rpartition("\t")
                if not tok:
                    raise ValueError(f"{path}:{n}: expected 'token<TAB>id'")
                rows.append((int(idx), tok))
        rows.sort()
        if [i for i, _ in rows] != list(range(len(rows))):
            raise ValueError(f"{path}: ids must be contiguous from 0")
        if tuple(t for _, t in rows[:4]) != RESERVED:
            raise ValueError(f"{path}: ids 0-3 must be {RESERVED}")
        return cls(t for _, t in rows[4:])

    @classmethod
    def from_corpus(cls, lines: Iterable[str]) -> "Vocabulary":
        """Vocabulary of every whitespace token, in first-seen order."""
        vocab = cls()
        for line in lines:
            for tok in line.split():
                vocab.add(tok)
        return vocab

    @classmethod
    def from_merges(cls, counts: dict, merges: MergeTable) -> "Vocabulary":
        """Every unit a segmentation can produce from the corpus alphabet.

        That is each initial character and each merge product, in both its
        continuation (``x@@``) and final form.  Merge tables learned with more
        operations extend shorter ones, so the vocabulary only grows.
        """
        alphabet = sorted({ch for w in counts for ch in w})
        symbols = alphabet + [a + b for a, b in merges.merges]
        vocab = cls()
        for s in symbols:
            if s == END:
                continue
            if s.endswith(END):
                vocab.add(s[: -len(END)])
            else:
                vocab.add(s + CONT)
                vocab.add(s)
        return vocab
