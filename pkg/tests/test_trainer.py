import math
import os

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from s2s import checkpoint as ckpt
from s2s.bpe import Vocabulary
from s2s.data import BatchStream, encode_pairs, symbol_names, synthetic_pairs
from s2s.model import EOS, AttentionConfig, DecoderConfig, EncoderConfig, ModelConfig, Seq2Seq
from s2s.tensor import Parameter
from s2s.trainer import (Adam, Checkpoint, TrainingDiverged, TrainSchedule, clip_gradients, evaluate,
                         load_model, select_best_checkpoint, train)


def copy_data(n, vocab_size=20, seed=0, lo=5, hi=10, task="copy"):
    vocab = Vocabulary(symbol_names(vocab_size - 4))
    return encode_pairs(synthetic_pairs(task, n, vocab_size, lo, hi, np.random.default_rng(seed)), vocab)


def small_config(vocab=20, units=16, emb=8, dropout=0.2, **kw):
    return ModelConfig(vocab_size=vocab, embedding_dim=emb, units=units, dropout=dropout, init_scale=0.1,
                       attention=AttentionConfig("mul", units), **kw)


class TestAdam:
    def test_zero_gradient_keeps_parameters(self):
        p = Parameter("w", np.array([0.3, -0.7]))
        opt = Adam([p])
        opt.update({"w": np.zeros(2)})
        np.testing.assert_array_equal(p.data, np.float32([0.3, -0.7]))

    def test_first_step_closed_form(self):
        p = Parameter("w", np.array([1.0]))
        opt = Adam([p], lr=1e-4)
        opt.update({"w": np.array([0.5])})
        expected = 1.0 - 1e-4 * 0.5 / (0.5 + 1e-8)
        assert float(p.data[0]) == pytest.approx(expected, abs=1e-7)
        assert float(p.data[0]) == pytest.approx(1.0 - 1e-4, abs=1e-7)

    def test_missing_gradient(self):
        opt = Adam([Parameter("w", np.zeros(1))])
        with pytest.raises(KeyError):
            opt.update({})


class TestClipping:
    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.floats(-100, 100), min_size=1, max_size=12), st.floats(0.01, 50))
    def test_never_increases_norm(self, values, limit):
        grads = {"a": np.array(values[: len(values) // 2 + 1]), "b": np.array(values[len(values) // 2:])}
        clipped, norm = clip_gradients(grads, limit)
        new = math.sqrt(sum(float(np.vdot(g, g)) for g in clipped.values()))
        assert new <= norm * (1 + 1e-12)
        if norm > limit:
            assert new == pytest.approx(limit, rel=1e-9)
        else:
            assert all(clipped[k] is grads[k] for k in grads)

    def test_infinite_threshold_is_identity(self):
        grads = {"a": np.array([3.0, 4.0])}
        clipped, norm = clip_gradients(grads, math.inf)
        assert norm == 5.0 and clipped["a"] is grads["a"]

    def test_scales_to_threshold(self):
        clipped, _ = clip_gradients({"a": np.array([3.0, 4.0])}, 1.0)
        np.testing.assert_allclose(clipped["a"], [0.6, 0.8])


class TestSelection:
    def ck(self, pairs):
        return [Checkpoint(s, {"val_bleu": b}) for s, b in pairs]

    def test_examples(self):
        assert select_best_checkpoint(self.ck([(1000, 10.2), (2000, 12.4), (3000, 12.1)])).step == 2000
        assert select_best_checkpoint(self.ck([(500, 3.0)])).step == 500
        assert select_best_checkpoint(self.ck([(1000, 12.4), (2000, 12.4)])).step == 1000

    def test_empty(self):
        with pytest.raises(ValueError):
            select_best_checkpoint([])


class TestBatching:
    def test_pure_function_of_step(self):
        data = copy_data(100)
        a = BatchStream(data, 7, seed=3)
        b = BatchStream(data, 7, seed=3)
        order = [a.indices(s) for s in (1, 30, 2, 15, 31)]
        assert order == [b.indices(s) for s in (1, 30, 2, 15, 31)]

    def test_epoch_covers_corpus(self):
        data = copy_data(50)
        s = BatchStream(data, 8, seed=1)
        seen = sorted(i for step in range(1, s.batches_per_epoch + 1) for i in s.indices(step))
        assert seen == list(range(50))

    def test_small_corpus_falls_back(self):
        data = copy_data(3)
        src, tgt = BatchStream(data, 32, seed=0).batch(1)
        assert src.shape[0] == 3


def test_evaluate_perplexity_relation():
    data = copy_data(20, vocab_size=5)
    m = Seq2Seq(small_config(vocab=5), 0)
    m.out_W.data[:] = 0
    m.out_b.data[:] = 0
    metrics = evaluate(m, data, lambda ids: [str(i) for i in ids])
    assert metrics["val_ppl"] == pytest.approx(5.0, rel=1e-5)
    m2 = Seq2Seq(small_config(vocab=5), 1)
    metrics = evaluate(m2, data, lambda ids: [str(i) for i in ids])
    assert metrics["val_ppl"] == math.exp(metrics["val_loss"])


@pytest.mark.slow
def test_micro_corpus_learning_curve():
    # baseline architecture at desk scale, default learning rate
    data = copy_data(32)
    cfg = ModelConfig(vocab_size=20, embedding_dim=32, units=64, dropout=0.2, init_scale=0.1,
                      attention=AttentionConfig("mul", 64))
    res = train(Seq2Seq(cfg, 1), data, TrainSchedule(batch_size=32, max_steps=500, checkpoint_every=500),
                1, data[:4])
    assert min(res.losses[:200]) < math.log(20)
    windows = np.array(res.losses).reshape(-1, 10).mean(axis=1)
    assert np.all(np.diff(windows) < 0), np.flatnonzero(np.diff(windows) >= 0)


def test_checkpoint_roundtrip(tmp_path):
    m = Seq2Seq(small_config(), 4)
    path = tmp_path / "a.ckpt"
    arrays = dict(m.state_dict())
    arrays["extra/f64"] = np.arange(6, dtype=np.float64).reshape(2, 3)
    ckpt.save(str(path), arrays, 1234, m.config.digest(), {"note": "x"})
    back = ckpt.load(str(path), expect_digest=m.config.digest())
    assert back.step == 1234 and back.meta == {"note": "x"}
    for name, arr in arrays.items():
        assert back.arrays[name].dtype == arr.dtype
        assert back.arrays[name].tobytes() == arr.tobytes()
    with pytest.raises(ckpt.CheckpointError):
        ckpt.load(str(path), expect_digest=b"\0" * 32)
    path.write_bytes(b"JUNK" + path.read_bytes()[4:])
    with pytest.raises(ckpt.CheckpointError):
        ckpt.load(str(path))


def test_training_artifacts_and_resume(tmp_path):
    data = copy_data(64, lo=3, hi=6)
    valid = copy_data(8, lo=3, hi=6, seed=1)
    cfg = small_config()
    sched = TrainSchedule(batch_size=16, max_steps=30, checkpoint_every=10, learning_rate=3e-3)
    render = lambda ids: [str(i) for i in ids]  # noqa: E731

    full = train(Seq2Seq(cfg, 7), data, sched, 7, valid, render, str(tmp_path / "full"))
    assert [c.step for c in full.checkpoints] == [10, 20, 30]
    log_lines = (tmp_path / "full" / "train_log.csv").read_text().splitlines()
    assert log_lines[0] == "step,train_loss,val_loss,val_ppl,val_bleu"
    assert len(log_lines) == 4

    for c in full.checkpoints:
        assert c.metrics["val_ppl"] == pytest.approx(math.exp(c.metrics["val_loss"]))
        model, state = load_model(c.path)
        again = evaluate(model, valid, render)
        assert again["val_loss"] == pytest.approx(c.metrics["val_loss"], rel=1e-6)
        assert again["val_bleu"] == pytest.approx(c.metrics["val_bleu"])

    resumed_model = Seq2Seq(cfg, 7)
    resumed = train(resumed_model, data, sched, 7, valid, render, str(tmp_path / "resumed"),
                    resume=full.checkpoints[0].path)
    assert resumed.losses == full.losses[10:]
    final = ckpt.load(full.checkpoints[-1].path).arrays
    for name, arr in resumed_model.state_dict().items():
        assert arr.tobytes() == final[name].tobytes()


def test_identical_seeds_identical_parameters():
    data = copy_data(40, lo=3, hi=5)
    sched = TrainSchedule(batch_size=8, max_steps=12, checkpoint_every=12, learning_rate=1e-3)
    a, b = Seq2Seq(small_config(), 2), Seq2Seq(small_config(), 2)
    ra = train(a, data, sched, 2, data[:4])
    rb = train(b, data, sched, 2, data[:4])
    assert ra.losses == rb.losses
    for n in a.params:
        assert a.params[n].data.tobytes() == b.params[n].data.tobytes()


def test_nan_loss_aborts():
    data = copy_data(16, lo=3, hi=5)
    m = Seq2Seq(small_config(), 0)
    m.out_W.data[:] = np.nan
    with pytest.raises(TrainingDiverged, match="step 1"):
        train(m, data, TrainSchedule(batch_size=8, max_steps=5, checkpoint_every=5), 0)


def test_schedule_validation():
    with pytest.raises(ValueError):
        TrainSchedule(batch_size=0)
    with pytest.raises(ValueError):
        train(Seq2Seq(small_config(), 0), [], TrainSchedule(), 0)
