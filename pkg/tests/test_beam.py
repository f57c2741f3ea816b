import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from helpers import TableModel, enumerate_outputs, exhaustive_best
from s2s.beam import BeamConfig, beam_search, greedy_decode, greedy_decode_batch, length_penalty, nbest_lines
from s2s.model import EOS, AttentionConfig, ModelConfig, Seq2Seq


class TestLengthPenalty:
    def test_examples(self):
        assert length_penalty(17, 0.0) == 1.0
        assert length_penalty(1, 0.6) == 1.0
        assert length_penalty(1, 3.0) == 1.0
        assert length_penalty(25, 0.6) == pytest.approx(5 ** 0.6)
        assert length_penalty(25, 0.6) == pytest.approx(2.6265, abs=1e-4)

    def test_invalid(self):
        with pytest.raises(ValueError):
            length_penalty(0, 0.6)
        with pytest.raises(ValueError):
            BeamConfig(width=0)
        with pytest.raises(ValueError):
            BeamConfig(alpha=-0.1)

    def test_for_source_caps(self):
        assert BeamConfig(max_length=100).for_source(3).max_length == 16
        assert BeamConfig(max_length=10).for_source(30).max_length == 10


class HandModel:
    """Three live symbols {EOS, a=4, b=5}; other ids are effectively impossible."""

    A, B = 4, 5
    table = {
        (): {EOS: 0.40, 4: 0.38, 5: 0.22},
        (4,): {EOS: 0.99, 4: 0.005, 5: 0.005},
        (5,): {EOS: 0.2, 4: 0.5, 5: 0.3},
    }

    def logprobs(self, prefix):
        out = np.full(6, -60.0)
        for tok, p in self.table.get(prefix, {EOS: 1.0}).items():
            out[tok] = math.log(p)
        return out

    def start(self, source):
        return [None]

    def step(self, state, tokens):
        prefixes = [() if p is None else p + (int(t),) for p, t in zip(state, tokens)]
        return np.stack([self.logprobs(p) for p in prefixes]), prefixes

    def select(self, state, index):
        return [state[i] for i in index]


class TestHandModel:
    def test_alpha_zero_prefers_short(self):
        res = beam_search(HandModel(), [4], BeamConfig(9, 0.0, 2))
        assert res.best.tokens == (EOS,)
        assert res.best.score == pytest.approx(math.log(0.4))

    def test_alpha_one_prefers_normalized(self):
        res = beam_search(HandModel(), [4], BeamConfig(9, 1.0, 2))
        assert res.best.tokens == (4, EOS)
        assert res.best.score == pytest.approx((math.log(0.38) + math.log(0.99)) / (7 / 6))

    def test_matches_enumeration(self):
        for alpha in (0.0, 0.6, 1.0):
            res = beam_search(HandModel(), [4], BeamConfig(9, alpha, 2))
            outs = []
            for seq in [(EOS,), (4, EOS), (4, 4), (4, 5), (5, EOS), (5, 4), (5, 5)]:
                lp = sum(HandModel().logprobs(seq[:i])[seq[i]] for i in range(len(seq)))
                outs.append((seq, lp / length_penalty(len(seq), alpha)))
            best = max(outs, key=lambda o: o[1])
            assert res.best.tokens == best[0]

    def test_greedy_diverges_from_beam(self):
        # greedy commits to EOS; a wide beam with alpha=1 finds "a EOS"
        assert greedy_decode(HandModel(), [4], 2) == []
        assert beam_search(HandModel(), [4], BeamConfig(2, 1.0, 2)).best.output == [4]


@pytest.mark.parametrize("alpha", [0.0, 0.6, 1.0])
def test_exhaustive_oracle_small(alpha):
    for seed in range(8):
        model = TableModel(4, seed)
        res = beam_search(model, [4], BeamConfig(4 ** 4, alpha, 4))
        seq, lp, sc = exhaustive_best(model, 4, alpha)
        assert res.best.tokens == seq
        assert res.best.score == sc


def test_nbest_scores_are_exact():
    model = TableModel(5, 3)
    res = beam_search(model, [4], BeamConfig(5 ** 3, 0.6, 3))
    table = {o[0]: o for o in enumerate_outputs(model, 3, 0.6)}
    assert 1 <= len(res.nbest) <= 125
    assert res.best.tokens == max(table.values(), key=lambda o: (o[2], [-t for t in o[0]]))[0]
    for h in res.nbest:
        _, lp, sc = table[h.tokens]
        assert h.logprob == lp and h.score == sc
        assert h.logprob <= 0 and h.finished
    scores = [h.score for h in res.nbest]
    assert scores == sorted(scores, reverse=True)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 6))
def test_alpha_zero_ranks_by_logprob(seed, width):
    res = beam_search(TableModel(5, seed), [4], BeamConfig(width, 0.0, 4))
    keys = [(-h.logprob, h.tokens) for h in res.nbest]
    assert keys == sorted(keys)
    assert all(h.score == h.logprob for h in res.nbest)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from([0.0, 0.6, 1.0]), st.integers(1, 8))
def test_exhaustive_width_dominates(seed, alpha, width):
    model = TableModel(4, seed, temperature=2.0)
    narrow = beam_search(model, [4], BeamConfig(width, alpha, 4)).best.score
    full = beam_search(model, [4], BeamConfig(4 ** 4, alpha, 4)).best.score
    assert narrow <= full


def test_width_one_equals_greedy_on_tables():
    for seed in range(30):
        model = TableModel(6, seed, temperature=1.5)
        greedy = greedy_decode(model, [4], 7)
        assert beam_search(model, [4], BeamConfig(1, 0.6, 7)).best.output == greedy


def random_model(seed, att="mul"):
    cfg = ModelConfig(vocab_size=9, embedding_dim=4, units=6, dropout=0.0, init_scale=1.0,
                      attention=AttentionConfig(att, 5))
    return Seq2Seq(cfg, seed)


def test_width_one_equals_greedy_on_models():
    rng = np.random.default_rng(0)
    for seed in range(6):
        model = random_model(seed, ["mul", "add", "none-state", "none-input"][seed % 4])
        for _ in range(3):
            src = rng.integers(4, 9, size=rng.integers(1, 6))
            for alpha in (0.0, 0.6):
                cfg = BeamConfig(1, alpha, 12)
                assert beam_search(model, src, cfg).best.output == greedy_decode(model, src, 12)


def test_batched_greedy_matches_single():
    model = random_model(3)
    rng = np.random.default_rng(1)
    sources = [rng.integers(4, 9, size=n) for n in (2, 5, 3, 1)]
    batch = greedy_decode_batch(model, sources, 12)
    assert batch == [greedy_decode(model, s, 12) for s in sources]


def test_max_length_forces_finish():
    model = TableModel(5, 0)
    res = beam_search(model, [4], BeamConfig(3, 0.6, 1))
    assert all(len(h.tokens) == 1 for h in res.nbest)
    assert all(h.finished for h in res.nbest)


def test_empty_source():
    with pytest.raises(ValueError):
        beam_search(TableModel(5, 0), [], BeamConfig())


def test_nbest_format():
    res = beam_search(TableModel(5, 1), [4], BeamConfig(2, 0.6, 3))
    lines = nbest_lines(7, res, lambda ids: [f"t{i}" for i in ids])
    assert len(lines) == len(res.nbest)
    parts = lines[0].split(" ||| ")
    assert parts[0] == "7" and len(parts) == 4
    assert float(parts[3]) == pytest.approx(res.best.score, abs=1e-6)
