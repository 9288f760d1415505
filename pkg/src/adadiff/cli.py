"""Command-line entry point: ``adadiff <subcommand> [--config PATH] [--seed N] [--out DIR]``.

Exit status is 0 on success, 2 on usage or configuration errors, 1 on runtime
failures.  Every run directory gets a ``run_manifest.txt`` of ``hash  path``
lines and is guarded by a lock file while the command runs.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from contextlib import contextmanager
from pathlib import Path

from . import adaptation as ad
from . import evaluation as ev
from .acoustic import _Item, make_batch
from .checkpoint import load_checkpoint, save_checkpoint
from .config import ConfigError, RunConfig, load_config, parse_config
from .corpus import Corpus, corpus_from_config, load_corpus, save_corpus, split
from .io import emit_pgm, save_container, write_csv, write_manifest

log = logging.getLogger("adadiff")

LOCK_NAME = ".adadiff.lock"


class UsageError(Exception):
    pass


@contextmanager
def run_dir(out: Path):
    """Create ``out``, hold an exclusive lock file in it, then write the manifest."""
    out.mkdir(parents=True, exist_ok=True)
    lock = out / LOCK_NAME
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise RuntimeError(f"{out} is locked by another run (remove {lock} if stale)") from None
    os.write(fd, str(os.getpid()).encode())
    os.close(fd)
    try:
        yield out
        write_manifest(out)
    finally:
        lock.unlink(missing_ok=True)


def _config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    if args.set:
        cfg = parse_config("\n".join(args.set), cfg)
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    return cfg


def _corpus(args, cfg: RunConfig) -> Corpus:
    return load_corpus(args.data) if getattr(args, "data", None) else corpus_from_config(cfg)


def _write_config(out: Path, cfg: RunConfig) -> None:
    (out / "config.txt").write_text(cfg.dump(), encoding="utf-8")


def _heldout_speaker(corpus: Corpus, requested: int | None) -> int:
    if requested is None:
        return corpus.heldout_speakers[0]
    if requested not in corpus.heldout_speakers:
        raise UsageError(f"speaker {requested} is not a held-out speaker {corpus.heldout_speakers}")
    return requested


# -- subcommands --------------------------------------------------------------------------

def cmd_gen_data(args, cfg):
    if args.seed is not None:
        cfg = cfg.replace(corpus_seed=args.seed)
    with run_dir(args.out) as out:
        save_corpus(corpus_from_config(cfg), out)
        _write_config(out, cfg)


def cmd_train(args, cfg):
    corpus = _corpus(args, cfg)
    with run_dir(args.out) as out:
        result = ad.pretrain(split(corpus)["train"], ad.TrainPlan.from_run(cfg), cfg, cfg.seed)
        save_checkpoint(result.model, out / "model.addm")
        write_csv(out / "loss.csv", result.history_rows(), ["step", "stage", "loss"])
        _write_config(out, cfg)


def cmd_adapt(args, cfg):
    model = load_checkpoint(args.checkpoint)
    run = model.config.replace(seed=cfg.seed, adapt_steps=cfg.adapt_steps, adapt_lr=cfg.adapt_lr,
                               adapt_utterances=cfg.adapt_utterances, finetune_set=cfg.finetune_set)
    fs = ad.FinetuneSet.parse(args.finetune_set or run.finetune_set)
    corpus = _corpus(args, run)
    spk = _heldout_speaker(corpus, args.speaker)
    with run_dir(args.out) as out:
        result = ad.adapt(model, corpus.select("adapt", spk), fs, ad.AdaptationConfig.from_run(run), run, run.seed)
        save_checkpoint(result.model, out / "adapted.addm")
        write_csv(out / "adapt_loss.csv", result.history_rows(), ["step", "stage", "loss"])
        counts = ad.accounting(result.model, spk)
        write_csv(out / "accounting.csv", [{"finetune_set": k, "trainable": v} for k, v in counts.items()],
                  ["finetune_set", "trainable"])
        _write_config(out, run)


def cmd_sample(args, cfg):
    model = load_checkpoint(args.checkpoint)
    corpus = _corpus(args, model.config)
    spk = args.speaker if args.speaker is not None else model.speakers[-1]
    if spk not in model.speakers:
        raise UsageError(f"checkpoint has no speaker {spk}; known: {model.speakers}")
    utts = [u for u in corpus.utterances if u.split == args.split]
    if not utts:
        raise UsageError(f"no utterances in split {args.split!r}")
    if args.limit:
        utts = utts[: args.limit]
    # transcripts of ``utts`` rendered in the chosen voice
    batch = make_batch([_Item(u.phonemes, u.durations, spk, None, u.id) for u in utts])
    with run_dir(args.out) as out:
        mels = model.synthesize(batch, cfg.seed)
        for i, u in enumerate(utts):
            mel = mels[i, :, : u.n_frames]
            save_container(out / f"{u.id}.addm", {"mel": mel}, {"id": u.id, "speaker": str(spk),
                                                                "seed": str(cfg.seed)})
            emit_pgm(mel, out / f"{u.id}.pgm")


def _metric_rows(rows, timing: bool) -> list[dict]:
    # wall-clock time would make reruns differ byte-wise, so it is opt-in
    out = [r.as_csv() for r in rows]
    if not timing:
        for r in out:
            r["runtime_s"] = 0.0
    return out


def cmd_eval(args, cfg):
    model = load_checkpoint(args.checkpoint)
    run = model.config.replace(seed=cfg.seed, adapt_steps=cfg.adapt_steps, adapt_lr=cfg.adapt_lr,
                               compare_seeds=cfg.compare_seeds, seed_batches=cfg.seed_batches)
    corpus = _corpus(args, run)
    probe = ev.train_probe(corpus, run, run.seed)
    seeds = [run.seed + i for i in range(run.compare_seeds)]
    with run_dir(args.out) as out:
        table = ev.compare_settings(model, corpus, probe, seeds, ad.AdaptationConfig.from_run(run), run,
                                    n_batches=run.seed_batches)
        write_csv(out / "metrics.csv", _metric_rows(table.rows, args.timing), ev.CSV_COLUMNS)
        summary = [{"setting": a.setting, "n": a.n, "mse_mean": a.mse_mean, "mse_std": a.mse_std,
                    "cosine_mean": a.cosine_mean, "cosine_std": a.cosine_std, "lsd_mean": a.lsd_mean}
                   for a in table.aggregate().values()]
        write_csv(out / "summary.csv", summary, list(summary[0]))
        votes = [{"batch": i, "seeds": " ".join(map(str, b)), "mse_order": v["mse"], "cosine_order": v["cosine"]}
                 for i, (b, v) in enumerate(zip(table.batches, table.batch_votes()))]
        write_csv(out / "ordering.csv", votes, ["batch", "seeds", "mse_order", "cosine_order"])
        _write_config(out, run)


def cmd_grid(args, cfg):
    corpus = _corpus(args, cfg)
    probe = ev.train_probe(corpus, cfg, cfg.seed)
    seeds = [cfg.seed + i for i in range(cfg.grid_seeds)]
    with run_dir(args.out) as out:
        grid = ev.run_grid(ev.default_cell_factory(cfg), corpus, probe, seeds, workers=args.workers)
        write_csv(out / "grid.csv", _metric_rows(grid.rows(), args.timing), ev.CSV_COLUMNS)
        write_csv(out / "grid_summary.csv", ev.grid_summary_rows(grid), ev.SUMMARY_COLUMNS)
        _write_config(out, cfg)


def cmd_count_params(args, cfg):
    report = ad.accounting_report(cfg)
    sys.stdout.write(report)
    if args.out:
        with run_dir(args.out) as out:
            (out / "accounting.tsv").write_text(report, encoding="utf-8")


def cmd_dump_config(args, cfg):
    text = cfg.dump()
    sys.stdout.write(text)
    if args.out:
        with run_dir(args.out) as out:
            (out / "config.txt").write_text(text, encoding="utf-8")


# -- parser -------------------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="adadiff", description="Adaptive diffusion acoustic model toolkit.")
    sub = p.add_subparsers(dest="command", parser_class=_Parser, required=True)

    def add(name, fn, help_, out_required=True):
        s = sub.add_parser(name, help=help_)
        s.add_argument("--config", type=Path, help="key = value config file")
        s.add_argument("--seed", type=int, help="seed for all randomness of this run")
        s.add_argument("--out", type=Path, required=out_required, help="run directory")
        s.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
        s.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
        s.set_defaults(func=fn)
        return s

    add("gen-data", cmd_gen_data, "write the synthetic corpus (--seed sets the corpus seed)")
    s = add("train", cmd_train, "two-stage pretraining")
    s.add_argument("--data", type=Path, help="corpus directory from gen-data (default: regenerate)")
    s = add("adapt", cmd_adapt, "adapt a checkpoint to one held-out speaker")
    s.add_argument("--checkpoint", type=Path, required=True)
    s.add_argument("--speaker", type=int)
    s.add_argument("--finetune-set", choices=[f.value for f in ad.FinetuneSet])
    s.add_argument("--data", type=Path)
    s = add("sample", cmd_sample, "synthesize mels (one .addm and one .pgm per utterance)")
    s.add_argument("--checkpoint", type=Path, required=True)
    s.add_argument("--speaker", type=int, help="voice to use (default: last speaker in the checkpoint)")
    s.add_argument("--split", default="test", choices=["train", "adapt", "test"])
    s.add_argument("--limit", type=int, default=0, help="at most this many utterances")
    s.add_argument("--data", type=Path)
    s = add("eval", cmd_eval, "compare finetune sets on held-out speakers (K=0 checkpoint)")
    s.add_argument("--checkpoint", type=Path, required=True)
    s.add_argument("--data", type=Path)
    s.add_argument("--timing", action="store_true", help="record wall-clock runtime_s (breaks byte-identical reruns)")
    s = add("grid", cmd_grid, "K x CLN grid")
    s.add_argument("--data", type=Path)
    s.add_argument("--workers", type=int, default=1)
    s.add_argument("--timing", action="store_true", help="record wall-clock runtime_s (breaks byte-identical reruns)")
    add("count-params", cmd_count_params, "parameter accounting table", out_required=False)
    add("dump-config", cmd_dump_config, "print every config default", out_required=False)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        cfg = _config(args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 2
    except (ConfigError, OSError) as exc:
        print(f"adadiff: {exc}", file=sys.stderr)
        return 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(name)s: %(message)s")
    try:
        args.func(args, cfg)
    except UsageError as exc:
        print(f"adadiff {args.command}: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # runtime failures map to exit 1
        print(f"adadiff {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
