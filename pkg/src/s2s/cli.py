"""Command line entry point: ``s2s <subcommand> ...``.

Exit status is 0 on success, 1 on a usage error and 2 on a runtime failure
(for example diverged training).
"""
from __future__ import annotations

import argparse
import difflib
import json
import logging
import os
import sys

from . import config as cfgmod
from .beam import BeamConfig, beam_search, greedy_decode, nbest_lines
from .bleu import corpus_bleu
from .bpe import MergeTable, Vocabulary, apply_bpe_line, learn_bpe, word_counts
from .data import read_lines, render_ids
from .model import Seq2Seq
from .sweep import load_datasets, read_results, run_experiment, write_report
from .trainer import TrainingDiverged, load_model, select_best_checkpoint, train

USAGE, FAILURE = 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: error: {message}")


def _build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="s2s", description="Attention-based sequence-to-sequence NMT toolkit.")
    sub = p.add_subparsers(dest="command", metavar="command", parser_class=_Parser)
    sub.required = True

    s = sub.add_parser("bpe-learn", help="learn BPE merges and a vocabulary")
    s.add_argument("--input", nargs="+", required=True, help="tokenized text files (source and target)")
    s.add_argument("--merges", type=int, default=32000, help="number of merge operations (default 32000)")
    s.add_argument("--out", required=True, help="output directory for merges.txt and vocab.txt")

    s = sub.add_parser("bpe-apply", help="segment text with learned merges")
    s.add_argument("--merges", required=True, help="merge table file")
    s.add_argument("--input", nargs="+", required=True, help="tokenized text files")
    s.add_argument("--out", required=True, help="output directory; writes <name>.bpe per input")

    s = sub.add_parser("train", help="train one model")
    s.add_argument("--config", required=True, help="experiment config file")
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--seed", type=int, default=1, help="initialization seed (default 1)")
    s.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config key (repeatable)")
    s.add_argument("--resume", help="checkpoint to resume from")

    s = sub.add_parser("decode", help="translate a file with a trained checkpoint")
    s.add_argument("--checkpoint", required=True, help="checkpoint file")
    s.add_argument("--vocab", help="vocabulary file (default: vocab.txt next to the checkpoints dir)")
    s.add_argument("--input", required=True, help="source file, one sentence per line")
    mode = s.add_mutually_exclusive_group()
    mode.add_argument("--beam", type=int, default=10, help="beam width (default 10)")
    mode.add_argument("--greedy", action="store_true", help="greedy argmax decoding")
    s.add_argument("--alpha", type=float, default=0.6, help="length penalty alpha (default 0.6)")
    s.add_argument("--max-length", type=int, default=100, help="output length cap (default 100)")
    s.add_argument("--nbest", action="store_true", help="also write nbest.txt")
    s.add_argument("--out", help="output directory (default: hypotheses to stdout)")

    s = sub.add_parser("bleu", help="corpus BLEU of a hypothesis file against a reference file")
    s.add_argument("--hyp", required=True)
    s.add_argument("--ref", required=True)

    s = sub.add_parser("sweep", help="run a replicated experiment grid")
    s.add_argument("--config", required=True, help="experiment config file")
    s.add_argument("--out", required=True, help="experiment directory")
    s.add_argument("--jobs", type=int, default=1, help="replicas run concurrently (default 1)")

    s = sub.add_parser("report", help="re-render report.md/results.csv from an experiment directory")
    s.add_argument("--out", required=True, help="experiment directory")
    return p


def _suggest(parser: argparse.ArgumentParser, command: str | None, extras: list) -> str:
    options = []
    for action in parser._subparsers._group_actions:
        sp = action.choices.get(command) if command else None
        if sp is not None:
            options = [o for a in sp._actions for o in a.option_strings]
    msgs = []
    for arg in extras:
        flag = arg.split("=", 1)[0]
        hint = difflib.get_close_matches(flag, options, n=1) if flag.startswith("-") else []
        msgs.append(f"unrecognized argument {arg!r}" + (f" (did you mean {hint[0]}?)" if hint else ""))
    return "; ".join(msgs)


def _overrides(items: list) -> dict:
    out = {}
    for item in items:
        key, sep, value = item.partition("=")
        if not sep:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        cfgmod._check_key(key.strip())
        out[key.strip()] = value.strip()
    return out


def cmd_bpe_learn(a) -> int:
    lines = []
    for path in a.input:
        lines.extend(read_lines(path))
    counts = word_counts(lines)
    merges = learn_bpe(counts, a.merges)
    vocab = Vocabulary.from_merges(counts, merges)
    os.makedirs(a.out, exist_ok=True)
    merges.save(os.path.join(a.out, "merges.txt"))
    vocab.save(os.path.join(a.out, "vocab.txt"))
    print(f"learned {len(merges)} merges, vocabulary size {len(vocab)}")
    return 0


def cmd_bpe_apply(a) -> int:
    merges = MergeTable.load(a.merges)
    os.makedirs(a.out, exist_ok=True)
    cache: dict = {}
    for path in a.input:
        target = os.path.join(a.out, os.path.basename(path) + ".bpe")
        with open(target, "w", encoding="utf-8") as fh:
            for line in read_lines(path):
                fh.write(" ".join(apply_bpe_line(line, merges, cache)) + "\n")
    return 0


def cmd_train(a) -> int:
    raw = cfgmod.load(a.config)
    raw.update(_overrides(a.set))
    run = cfgmod.build(raw)
    vocab, train_data, valid, _ = load_datasets(run)
    run = cfgmod.build(raw, vocab_size=len(vocab))
    os.makedirs(a.out, exist_ok=True)
    with open(os.path.join(a.out, "config.cfg"), "w", encoding="utf-8") as fh:
        fh.write(cfgmod.dump(raw))
    vocab.save(os.path.join(a.out, "vocab.txt"))
    model = Seq2Seq(run.model, a.seed)
    result = train(model, train_data, run.schedule, a.seed, valid, render_ids(vocab), a.out, a.resume)
    if result.checkpoints:
        best = select_best_checkpoint(result.checkpoints)
        summary = {"best_step": best.step, "best_checkpoint": os.path.relpath(best.path, a.out),
                   **best.metrics}
        with open(os.path.join(a.out, "best.json"), "w", encoding="utf-8") as fh:
            json.dump(summary, fh, indent=2, sort_keys=True)
        print(f"best checkpoint: step {best.step}, validation BLEU {best.bleu:.2f}")
    return 0


def cmd_decode(a) -> int:
    if a.beam < 1 or a.max_length < 1 or a.alpha < 0:
        raise UsageError("--beam and --max-length must be >= 1 and --alpha >= 0")
    model, _ = load_model(a.checkpoint)
    vocab_path = a.vocab or os.path.join(os.path.dirname(os.path.dirname(os.path.abspath(a.checkpoint))),
                                         "vocab.txt")
    vocab = Vocabulary.load(vocab_path)
    render = render_ids(vocab)
    hyps, nbest = [], []
    for i, line in enumerate(read_lines(a.input)):
        src = vocab.encode(line.split())
        if not src:
            hyps.append("")
            continue
        cfg = BeamConfig(1 if a.greedy else a.beam, a.alpha, a.max_length).for_source(len(src))
        if a.greedy:
            out = greedy_decode(model, src, cfg.max_length)
        else:
            result = beam_search(model, src, cfg)
            out = result.best.output
            if a.nbest:
                nbest.extend(nbest_lines(i, result, render))
        hyps.append(" ".join(render(out)))
    text = "".join(h + "\n" for h in hyps)
    if a.out is None:
        sys.stdout.write(text)
    else:
        os.makedirs(a.out, exist_ok=True)
        with open(os.path.join(a.out, "hypotheses.txt"), "w", encoding="utf-8") as fh:
            fh.write(text)
        if a.nbest:
            with open(os.path.join(a.out, "nbest.txt"), "w", encoding="utf-8") as fh:
                fh.write("".join(n + "\n" for n in nbest))
    return 0


def cmd_bleu(a) -> int:
    print(corpus_bleu(read_lines(a.hyp), read_lines(a.ref)))
    return 0


def cmd_sweep(a) -> int:
    if a.jobs < 1:
        raise UsageError("--jobs must be >= 1")
    raw = cfgmod.load(a.config)
    results = run_experiment(raw, a.out, a.jobs)
    for label, agg, _ in results:
        print(f"{label}\t{agg.format()}\t{agg.converged}/{agg.total} converged")
    return 0


def cmd_report(a) -> int:
    name, results = read_results(a.out)
    write_report(a.out, name, results)
    with open(os.path.join(a.out, "report.md"), encoding="utf-8") as fh:
        sys.stdout.write(fh.read())
    return 0


COMMANDS = {
    "bpe-learn": cmd_bpe_learn, "bpe-apply": cmd_bpe_apply, "train": cmd_train,
    "decode": cmd_decode, "bleu": cmd_bleu, "sweep": cmd_sweep, "report": cmd_report,
}


def main(argv: list | None = None) -> int:
    logging.basicConfig(level=os.environ.get("S2S_LOGLEVEL", "WARNING"),
                        format="%(asctime)s %(name)s %(message)s")
    parser = _build_parser()
    try:
        args, extras = parser.parse_known_args(argv)
        if extras:
            raise UsageError(f"s2s {args.command}: error: " + _suggest(parser, args.command, extras))
        return COMMANDS[args.command](args)
    except UsageError as e:
        print(e, file=sys.stderr)
        return USAGE
    except SystemExit as e:  # --help
        return 0 if e.code in (0, None) else USAGE
    except cfgmod.ConfigError as e:
        print(f"s2s: config error: {e}", file=sys.stderr)
        return USAGE
    except TrainingDiverged as e:
        print(f"s2s: {e}", file=sys.stderr)
        return FAILURE
    except (OSError, ValueError, KeyError, RuntimeError) as e:
        print(f"s2s: error: {e}", file=sys.stderr)
        return FAILURE


if __name__ == "__main__":
    sys.exit(main())
