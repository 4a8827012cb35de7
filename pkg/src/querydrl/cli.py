"""Command-line entry point: synth, prepare, pretrain, train-estimator, finetune, evaluate, suggest."""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import fields
from pathlib import Path

from . import autodiff as ad
from . import generator as gen
from . import pipeline
from .checkpoint import CheckpointError
from .config import ConfigError, RunConfig, apply_overrides, format_config, load_config, write_run_manifest
from .corpus import (DataError, FeedbackIndex, SynthConfig, read_log, read_pairs, read_vocab, synthesize_logs,
                     write_log, write_pairs, write_vocab)
from .metrics import compare_reports, format_report
from .reinforce import format_stats
from .reward import RewardModel

EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4
EXIT_CHECKPOINT = 5

log = logging.getLogger("querydrl")


def _config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    overrides = {f.name: getattr(args, f.name) for f in fields(RunConfig) if getattr(args, f.name) is not None}
    return apply_overrides(cfg, overrides).resolved()


def _data(data_dir: Path):
    return (read_pairs(data_dir / "train.tsv"), read_pairs(data_dir / "valid.tsv"),
            read_pairs(data_dir / "test.tsv"), read_vocab(data_dir / "vocab.tsv"))


# --------------------------------------------------------------- commands

def cmd_synth(args, cfg: RunConfig) -> None:
    events = synthesize_logs(SynthConfig(n_users=cfg.synth_users), seed=cfg.seed)
    write_log(args.out, events)
    write_run_manifest(args.out, cfg, command="synth")
    log.info("wrote %d events to %s", len(events), args.out)


def cmd_prepare(args, cfg: RunConfig) -> None:
    data = pipeline.prepare_corpus(read_log(args.log), cfg.vocab_size, cfg.window_seconds, cfg.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for name, pairs in (("train", data.train), ("valid", data.valid), ("test", data.test)):
        write_pairs(out / f"{name}.tsv", pairs)
    write_vocab(out / "vocab.tsv", data.vocab)
    write_run_manifest(out / "prepare", cfg, inputs=[args.log], command="prepare")
    log.info("%d sessions, %d pairs (train %d, valid %d, test %d), vocab %d", data.n_sessions, len(data.pairs),
             len(data.train), len(data.valid), len(data.test), len(data.vocab))


def cmd_pretrain(args, cfg: RunConfig) -> None:
    train, valid, _, vocab = _data(Path(args.data))
    res = pipeline.pretrain_stage(train, valid, vocab, cfg)
    pipeline.save_generator(args.out, res.policy, res.optimizer, step=len(res.history),
                            meta={"best_valid_loss": res.best_valid_loss})
    write_run_manifest(args.out, cfg, inputs=[Path(args.data) / "train.tsv"], command="pretrain")
    log.info("best validation cross-entropy %.4f", res.best_valid_loss)


def cmd_train_estimator(args, cfg: RunConfig) -> None:
    train, valid, _, vocab = _data(Path(args.data))
    policy, _ = pipeline.load_generator(args.generator)
    examples, v_examples = pipeline.estimator_examples(policy, train, valid, vocab, cfg)
    res = pipeline.estimator_stage(examples, v_examples, vocab, cfg)
    pipeline.save_estimator(args.out, res.model, meta={"valid": res.best_valid})
    write_run_manifest(args.out, cfg, inputs=[args.generator], command="train-estimator")
    log.info("validation F1 %.4f accuracy %.4f at threshold %.2f", res.best_valid["f1"],
             res.best_valid["accuracy"], res.threshold)


def cmd_finetune(args, cfg: RunConfig) -> None:
    train, valid, _, vocab = _data(Path(args.data))
    policy, _ = pipeline.load_generator(args.generator)
    estimator, _ = pipeline.load_estimator(args.estimator)
    res = pipeline.finetune_stage(policy, estimator, train, valid, vocab, cfg)
    pipeline.save_generator(args.out, res.policy, step=len(res.stats),
                            meta={"best_epoch": res.best_epoch, "strategy": cfg.strategy})
    Path(f"{args.out}.stats.tsv").write_text(format_stats(res.stats), encoding="utf-8")
    write_run_manifest(args.out, cfg, inputs=[args.generator, args.estimator], command="finetune")
    log.info("best epoch %d", res.best_epoch)


def cmd_evaluate(args, cfg: RunConfig) -> None:
    _, _, test, vocab = _data(Path(args.data))
    pairs = test[:args.limit] if args.limit else test
    feedback = FeedbackIndex.from_pairs(test)
    reward_model = None
    if args.estimator:
        estimator, _ = pipeline.load_estimator(args.estimator)
        reward_model = RewardModel(FeedbackIndex.from_pairs(test), estimator, vocab, cfg.eta)
    policy, _ = pipeline.load_generator(args.generator)
    report = pipeline.evaluate_policy(policy, vocab, pairs, feedback, reward_model, cfg.t_max)
    text = format_report(report)
    if args.baseline:
        base, _ = pipeline.load_generator(args.baseline)
        base_report = pipeline.evaluate_policy(base, vocab, pairs, feedback, reward_model, cfg.t_max)
        text = compare_reports(base_report, report)
    Path(args.out).write_text(text, encoding="utf-8")
    write_run_manifest(args.out, cfg, inputs=[args.generator], command="evaluate")
    sys.stdout.write(text)


def suggest_six(policy, vocab, queries, t_max: int = 8, n: int = gen.N_SUGGESTIONS) -> list[list[str]]:
    """Exactly ``n`` suggestions per query.

    Queries whose beam yields fewer distinct strings are retried with wider
    beams; a still-short list is padded by repeating its last entry.
    """
    out = gen.suggest(policy, vocab, queries, n=n, t_max=t_max)
    for i, (q, ss) in enumerate(zip(queries, out)):
        width = n
        while len(ss) < n and width < 8 * n:
            width *= 2
            ss = gen.suggest(policy, vocab, [q], n=width, t_max=t_max)[0][:n]
        if not ss:
            raise DataError(f"no suggestion could be generated for {q!r}")
        out[i] = ss + [ss[-1]] * (n - len(ss))
    return out


def cmd_suggest(args, cfg: RunConfig) -> None:
    vocab = read_vocab(Path(args.data) / "vocab.tsv")
    policy, _ = pipeline.load_generator(args.generator)
    src = open(args.input, encoding="utf-8") if args.input else sys.stdin
    queries = [line.strip() for line in src if line.strip()]
    for q, ss in zip(queries, suggest_six(policy, vocab, queries, cfg.t_max)):
        sys.stdout.write(q + "\t" + "\t".join(ss) + "\n")


# ----------------------------------------------------------------- parser

def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key = value config file")
    g = p.add_argument_group("config overrides")
    for f in fields(RunConfig):
        g.add_argument(f"--{f.name.replace('_', '-')}", dest=f.name, default=None, metavar="V")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="querydrl", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic query log")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("prepare", help="sessions, pairs, split and vocabulary from a log")
    p.add_argument("--log", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("pretrain", help="supervised generator training")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("train-estimator", help="naturalness estimator training")
    p.add_argument("--data", required=True)
    p.add_argument("--generator", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train_estimator)

    p = sub.add_parser("finetune", help="policy-gradient fine-tuning")
    p.add_argument("--data", required=True)
    p.add_argument("--generator", required=True)
    p.add_argument("--estimator", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("evaluate", help="metric report on the test split")
    p.add_argument("--data", required=True)
    p.add_argument("--generator", required=True)
    p.add_argument("--baseline", help="emit a relative-delta comparison against this generator")
    p.add_argument("--estimator", help="also report mean composite reward")
    p.add_argument("--limit", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("suggest", help="six suggestions per input line")
    p.add_argument("--data", required=True)
    p.add_argument("--generator", required=True)
    p.add_argument("--input", help="query file (default: stdin)")
    p.set_defaults(func=cmd_suggest)

    for p in sub.choices.values():
        _add_config_flags(p)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s", stream=sys.stderr)
    try:
        cfg = _config(args)
        sys.stderr.write("".join(f"# {line}\n" for line in format_config(cfg).splitlines()))
        args.func(args, cfg)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except CheckpointError as e:
        print(f"checkpoint error: {e}", file=sys.stderr)
        return EXIT_CHECKPOINT
    except ad.NonFiniteError as e:
        print(f"numeric error: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, FileNotFoundError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    return 0


if __name__ == "__main__":
    sys.exit(main())
