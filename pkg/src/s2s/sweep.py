"""Replicated experiment runs and "mean ± std (max)" reporting."""
from __future__ import annotations

import csv
import io
import json
import logging
import math
import os
import statistics
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from . import config as cfgmod
from .beam import beam_search
from .bleu import corpus_bleu
from .bpe import Vocabulary
from .data import encode_pairs, filter_pairs, read_parallel, render_ids, symbol_names, synthetic_pairs
from .model import Seq2Seq, count_parameters
from .trainer import TrainingDiverged, select_best_checkpoint, train

log = logging.getLogger(__name__)

__all__ = ["RunResult", "AggregateResult", "aggregate", "count_parameters", "load_datasets",
           "run_replica", "run_experiment", "render_report", "write_report", "read_results"]


@dataclass
class RunResult:
    variant: str
    seed: int
    status: str
    bleu: float = float("nan")
    valid_bleu: float = float("nan")
    perplexity: float = float("nan")
    params: int = 0
    steps_to_best: int = 0
    wall_time: float = 0.0
    message: str = ""

    @property
    def ok(self) -> bool:
        return self.status == "ok"


@dataclass
class AggregateResult:
    """Summary over replicas; failed replicas are counted but excluded."""

    mean: float
    std: float
    max: float
    values: list
    total: int = 0
    params: int = 0

    @property
    def converged(self) -> int:
        return len(self.values)

    def format(self) -> str:
        if not self.values:
            return "n/a"
        return f"{self.mean:.2f} ± {self.std:.2f} ({self.max:.2f})"


def aggregate(values: list, total: int | None = None, params: int = 0) -> AggregateResult:
    """Mean, sample standard deviation (n-1; 0 for a single value) and max."""
    vals = [float(v) for v in values]
    total = len(vals) if total is None else total
    if not vals:
        return AggregateResult(float("nan"), float("nan"), float("nan"), [], total, params)
    std = statistics.stdev(vals) if len(vals) > 1 else 0.0
    return AggregateResult(statistics.fmean(vals), std, max(vals), vals, total, params)


# ---------------------------------------------------------------------------
# data


def load_datasets(run: cfgmod.RunConfig) -> tuple:
    """``(vocab, train, valid, test)`` with encoded pairs; test may be empty."""
    d = run.data
    if d.task is not None and not d.train_src:
        rng = np.random.default_rng(d.seed)
        vocab = Vocabulary(symbol_names(run.model.vocab_size - 4))
        sets = [synthetic_pairs(d.task, n, run.model.vocab_size, d.min_len, d.max_len, rng)
                for n in (d.train_size, d.valid_size, d.test_size)]
    else:
        train_pairs = filter_pairs(read_parallel(d.train_src, d.train_tgt), run.schedule.max_length)
        if d.vocab:
            vocab = Vocabulary.load(d.vocab)
        else:
            vocab = Vocabulary.from_corpus(" ".join(s + t) for s, t in train_pairs)
        valid = read_parallel(d.valid_src, d.valid_tgt) if d.valid_src else train_pairs[:100]
        test = read_parallel(d.test_src, d.test_tgt) if d.test_src else []
        sets = [train_pairs, valid, test]
    return (vocab,) + tuple(encode_pairs(s, vocab) for s in sets)


def _decode_bleu(model, data, run, render) -> float:
    hyps = []
    for src, _ in data:
        hyps.append(render(beam_search(model, src, run.beam.for_source(len(src))).best.output))
    refs = [render(list(t[:-1])) for _, t in data]
    return corpus_bleu(hyps, refs).bleu


def run_replica(label: str, raw: dict, seed: int, out_dir: str | None = None) -> RunResult:
    """Train one seed of one variant, pick the best checkpoint, score it."""
    start = time.time()
    run = cfgmod.build(raw)
    vocab, train_data, valid, test = load_datasets(run)
    run = cfgmod.build(raw, vocab_size=len(vocab))
    model = Seq2Seq(run.model, seed)
    render = render_ids(vocab)
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        vocab.save(os.path.join(out_dir, "vocab.txt"))
    params = count_parameters(run.model)
    try:
        result = train(model, train_data, run.schedule, seed, valid, render, out_dir)
    except TrainingDiverged as e:
        rr = RunResult(label, seed, "diverged", params=params, wall_time=time.time() - start,
                       message=str(e))
    else:
        best = select_best_checkpoint(result.checkpoints)
        model.load_state_dict({n: a for n, a in best.arrays().items() if n in model.params})
        bleu = _decode_bleu(model, test, run, render) if test else best.bleu
        rr = RunResult(label, seed, "ok", bleu=bleu, valid_bleu=best.bleu,
                       perplexity=result.checkpoints[-1].metrics["val_ppl"], params=params,
                       steps_to_best=best.step, wall_time=time.time() - start)
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "result.json"), "w", encoding="utf-8") as fh:
            json.dump(asdict(rr), fh, indent=2, sort_keys=True)
    return rr


def _replica_job(args):
    return run_replica(*args)


def run_experiment(raw: dict, out_dir: str, jobs: int = 1) -> list:
    """Run every variant x seed; returns ``[(label, AggregateResult, [RunResult])]``.

    Replicas are independent (own seed, own directory) and run on up to
    ``jobs`` worker processes.  ``out_dir`` receives a config snapshot,
    per-seed logs/checkpoints, ``results.csv``, ``runs.csv`` and ``report.md``.
    """
    rows = cfgmod.variants(raw)
    seeds = cfgmod.build(rows[0][1]).seeds
    for _, r in rows:
        cfgmod.build(r)  # fail fast on a bad variant before any training
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "config.cfg"), "w", encoding="utf-8") as fh:
        fh.write(cfgmod.dump(raw))
    tasks = [(label, r, seed, os.path.join(out_dir, _slug(label), f"seed_{seed}"))
             for label, r in rows for seed in seeds]
    if jobs <= 1:
        runs = [_replica_job(t) for t in tasks]
    else:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            runs = list(pool.map(_replica_job, tasks))
    results = _group(rows, runs)
    write_report(out_dir, raw.get("name", "experiment"), results)
    return results


def _group(rows: list, runs: list) -> list:
    results = []
    for label, _ in rows:
        mine = sorted((r for r in runs if r.variant == label), key=lambda r: r.seed)
        ok = [r.bleu for r in mine if r.ok]
        params = mine[0].params if mine else 0
        results.append((label, aggregate(ok, len(mine), params), mine))
    return results


def _slug(label: str) -> str:
    return "".join(ch if ch.isalnum() or ch in "-_.=" else "_" for ch in label)


def _params(n: int) -> str:
    if n >= 1_000_000:
        return f"{n / 1e6:.2f}M"
    if n >= 1_000:
        return f"{n / 1e3:.2f}K"
    return str(n)


def render_report(name: str, results: list) -> tuple:
    """Markdown table and CSV text, one row per variant."""
    md = [f"# {name}", "", "| Variant | BLEU | Params |", "|---|---|---|"]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["variant", "bleu_mean", "bleu_std", "bleu_max", "params", "converged", "replicas",
                "per_seed"])
    for label, agg, _ in results:
        cell = agg.format()
        if agg.converged < agg.total:
            cell += f" ({agg.converged}/{agg.total} converged)"
        md.append(f"| {label} | {cell} | {_params(agg.params)} |")
        nums = ["", "", ""] if not agg.values else [f"{agg.mean:.2f}", f"{agg.std:.2f}", f"{agg.max:.2f}"]
        w.writerow([label, *nums, agg.params, agg.converged, agg.total,
                    ";".join(f"{v:.2f}" for v in agg.values)])
    return "\n".join(md) + "\n", buf.getvalue()


def write_report(out_dir: str, name: str, results: list) -> None:
    md, table = render_report(name, results)
    with open(os.path.join(out_dir, "report.md"), "w", encoding="utf-8") as fh:
        fh.write(md)
    with open(os.path.join(out_dir, "results.csv"), "w", encoding="utf-8") as fh:
        fh.write(table)
    with open(os.path.join(out_dir, "runs.csv"), "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["variant", "seed", "status", "bleu", "valid_bleu", "perplexity", "params",
                    "steps_to_best"])
        for label, _, runs in results:
            for r in runs:
                w.writerow([label, r.seed, r.status, _num(r.bleu), _num(r.valid_bleu),
                            _num(r.perplexity, 4), r.params, r.steps_to_best])


def _num(x: float, digits: int = 2) -> str:
    return "" if math.isnan(x) else f"{x:.{digits}f}"


def read_results(out_dir: str) -> list:
    """Rebuild ``run_experiment``'s result list from an experiment directory."""
    raw = cfgmod.load(os.path.join(out_dir, "config.cfg"))
    rows = cfgmod.variants(raw)
    seeds = cfgmod.build(rows[0][1]).seeds
    runs = []
    for label, _ in rows:
        for seed in seeds:
            path = os.path.join(out_dir, _slug(label), f"seed_{seed}", "result.json")
            with open(path, encoding="utf-8") as fh:
                runs.append(RunResult(**json.load(fh)))
    return raw.get("name", "experiment"), _group(rows, runs)
