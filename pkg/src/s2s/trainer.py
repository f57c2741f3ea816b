"""Adam training loop with step-based checkpoints and validation-BLEU selection."""
from __future__ import annotations

import logging
import math
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from . import checkpoint as ckpt
from .beam import BeamConfig, beam_search, greedy_decode_batch
from .bleu import corpus_bleu
from .data import BatchStream, pad
from .model import Seq2Seq
from .tensor import Tape

log = logging.getLogger(__name__)

LOG_HEADER = "step,train_loss,val_loss,val_ppl,val_bleu\n"


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, loss: float):
        super().__init__(f"training diverged at step {step}: loss is {loss} "
                         "(deep or residual-heavy models are prone to this; try a smaller "
                         "learning rate or gradient clipping)")
        self.step = step
        self.loss = loss


@dataclass
class TrainSchedule:
    batch_size: int = 32
    max_steps: int = 2000
    checkpoint_every: int = 200
    learning_rate: float = 1e-4
    clip_norm: float = 5.0
    max_length: int = 50
    valid_beam: int = 1

    def __post_init__(self):
        for name in ("batch_size", "max_steps", "checkpoint_every", "max_length", "valid_beam"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.learning_rate <= 0 or self.clip_norm <= 0:
            raise ValueError("learning_rate and clip_norm must be positive")


class Adam:
    """Adam with bias correction and a fixed learning rate."""

    def __init__(self, params: list, lr: float = 1e-4, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = {p.name: p for p in params}
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {n: np.zeros_like(p.data) for n, p in self.params.items()}
        self.v = {n: np.zeros_like(p.data) for n, p in self.params.items()}
        self.t = 0

    def update(self, grads: dict) -> None:
        missing = set(self.params) - set(grads)
        if missing:
            raise KeyError(f"missing gradients for {sorted(missing)}")
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for name, p in self.params.items():
            g = grads[name]
            m = self.m[name]
            v = self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            step = self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.data = (p.data - step).astype(p.data.dtype, copy=False)

    def state_arrays(self) -> dict:
        out = {}
        for n in self.params:
            out[f"adam/m/{n}"] = self.m[n]
            out[f"adam/v/{n}"] = self.v[n]
        return out

    def load_state(self, arrays: dict, t: int) -> None:
        for n in self.params:
            self.m[n] = arrays[f"adam/m/{n}"].astype(self.m[n].dtype)
            self.v[n] = arrays[f"adam/v/{n}"].astype(self.v[n].dtype)
        self.t = t


def clip_gradients(grads: dict, max_norm: float) -> tuple:
    """Scale all gradients so their global L2 norm is at most ``max_norm``."""
    norm = math.sqrt(sum(float(np.vdot(g, g)) for g in grads.values()))
    if math.isfinite(max_norm) and norm > max_norm:
        scale = max_norm / norm
        return {k: g * scale for k, g in grads.items()}, norm
    return grads, norm


@dataclass
class Checkpoint:
    step: int
    metrics: dict
    path: str | None = None
    params: dict | None = None

    @property
    def bleu(self) -> float:
        return self.metrics["val_bleu"]

    def arrays(self) -> dict:
        if self.params is not None:
            return self.params
        return ckpt.load(self.path).arrays


@dataclass
class TrainResult:
    checkpoints: list
    losses: list = field(default_factory=list)
    log_rows: list = field(default_factory=list)


def select_best_checkpoint(checkpoints: list) -> Checkpoint:
    """Highest validation BLEU; ties go to the earliest step."""
    if not checkpoints:
        raise ValueError("no checkpoints to choose from")
    return min(checkpoints, key=lambda c: (-c.bleu, c.step))


def evaluate(model: Seq2Seq, data: list, render, batch_size: int = 64,
             beam: int = 1, alpha: float = 0.0) -> dict:
    """Validation loss, perplexity = exp(mean NLL) and BLEU."""
    total = 0.0
    tokens = 0
    hyps = []
    for start in range(0, len(data), batch_size):
        chunk = data[start:start + batch_size]
        src = pad([s for s, _ in chunk])
        tgt = pad([t for _, t in chunk])
        total += float(model.sequence_nll(src, tgt, reduce="sum").data)
        tokens += int((tgt != 0).sum())
        if beam == 1:
            hyps.extend(greedy_decode_batch(model, [s for s, _ in chunk]))
        else:
            for s, _ in chunk:
                cfg = BeamConfig(beam, alpha).for_source(len(s))
                hyps.append(beam_search(model, s, cfg).best.output)
    loss = total / tokens
    refs = [render(list(t[:-1])) for _, t in data]
    bleu = corpus_bleu([render(h) for h in hyps], refs).bleu
    return {"val_loss": loss, "val_ppl": math.exp(loss), "val_bleu": bleu}


def _fmt(x: float) -> str:
    return f"{x:.6f}"


def train(model: Seq2Seq, train_data: list, schedule: TrainSchedule, seed: int,
          valid_data: list | None = None, render=None, out_dir: str | None = None,
          resume: str | None = None) -> TrainResult:
    """Train ``model`` on encoded ``(source ids, target ids + EOS)`` pairs.

    Every ``checkpoint_every`` steps (and at the last step) the model is
    scored on ``valid_data`` and a checkpoint is recorded; with ``out_dir``
    checkpoints go to ``out_dir/checkpoints`` and a CSV log to
    ``out_dir/train_log.csv``.  Per-step dropout randomness is drawn from
    ``rng([seed, step])`` so a resumed run reproduces the original exactly.
    """
    if not train_data:
        raise ValueError("training corpus is empty")
    render = render or (lambda ids: [str(i) for i in ids])
    valid_data = valid_data or train_data[: min(len(train_data), 100)]
    params = model.parameters()
    opt = Adam(params, lr=schedule.learning_rate)
    stream = BatchStream(train_data, schedule.batch_size, seed)
    digest = model.config.digest()
    start = 0
    if resume is not None:
        state = ckpt.load(resume, expect_digest=digest)
        model.load_state_dict({n: state.arrays[n] for n in model.params})
        opt.load_state(state.arrays, state.meta["adam_t"])
        start = state.step

    log_path = None
    if out_dir is not None:
        os.makedirs(os.path.join(out_dir, "checkpoints"), exist_ok=True)
        log_path = os.path.join(out_dir, "train_log.csv")
        if resume is None or not os.path.exists(log_path):
            with open(log_path, "w", encoding="utf-8") as fh:
                fh.write(LOG_HEADER)

    result = TrainResult([])
    window: list = []
    for step in range(start + 1, schedule.max_steps + 1):
        src, tgt = stream.batch(step)
        rng = np.random.default_rng([seed, step])
        with Tape() as tape:
            loss = model.sequence_nll(src, tgt, training=True, rng=rng)
            value = float(loss.data)
            if not math.isfinite(value):
                raise TrainingDiverged(step, value)
            grads = tape.backward(loss, params)
        for p in params:
            p.zero_grad()
        grads, _ = clip_gradients(grads, schedule.clip_norm)
        opt.update(grads)
        result.losses.append(value)
        window.append(value)

        if step % schedule.checkpoint_every == 0 or step == schedule.max_steps:
            metrics = evaluate(model, valid_data, render, beam=schedule.valid_beam)
            metrics["train_loss"] = float(np.mean(window))
            window = []
            row = [step, metrics["train_loss"], metrics["val_loss"], metrics["val_ppl"], metrics["val_bleu"]]
            result.log_rows.append(row)
            log.info("step %d train %.4f val %.4f ppl %.3f bleu %.2f", *row)
            meta = {"config": model.config.to_dict(), "metrics": metrics, "adam_t": opt.t,
                    "seed": seed, "schedule": asdict(schedule)}
            if out_dir is not None:
                path = os.path.join(out_dir, "checkpoints", f"step_{step:08d}.ckpt")
                arrays = dict(model.state_dict())
                arrays.update(opt.state_arrays())
                ckpt.save(path, arrays, step, digest, meta)
                result.checkpoints.append(Checkpoint(step, metrics, path=path))
                with open(log_path, "a", encoding="utf-8") as fh:
                    fh.write(",".join([str(step)] + [_fmt(x) for x in row[1:]]) + "\n")
            else:
                snapshot = {n: a.copy() for n, a in model.state_dict().items()}
                result.checkpoints.append(Checkpoint(step, metrics, params=snapshot))
    return result


def load_model(path: str) -> tuple:
    """Rebuild a model from a checkpoint file; returns ``(model, CheckpointFile)``."""
    from .model import ModelConfig

    state = ckpt.load(path)
    config = ModelConfig.from_dict(state.meta["config"])
    if config.digest() != state.digest:
        raise ckpt.CheckpointError(f"{path}: config digest does not match stored config")
    model = Seq2Seq(config, seed=state.meta.get("seed", 0))
    model.load_state_dict({n: state.arrays[n] for n in model.params})
    return model, state
