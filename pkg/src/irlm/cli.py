"""Command-line entry point: ``irlm <command> [options]``.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

from .config import ConfigError, RunConfig, load_config
from .ennoise import maskable_positions
from .evaluation import (
    ROBUSTNESS_HEADER,
    SynonymTable,
    ablation_grid,
    curve_export,
    directional_finding,
    majority_baseline,
    make_probe_task,
    mlm_eval,
    probe_train_eval,
    read_labeled,
    robustness_eval,
    summarize_ablation,
    write_csv,
)
from .model import load_checkpoint
from .plotting import plot_ablation, plot_curves, plot_robustness
from .synthetic import SyntheticConfig, write_synthetic
from .text import Vocab, build_vocab, encode, read_corpus
from .trainer import train

log = logging.getLogger("irlm")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _global_flags() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", help="key = value configuration file")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="output directory")
    p.add_argument("--precision", choices=("single", "double"))
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override any config key")
    return p


def build_parser() -> argparse.ArgumentParser:
    parent = _global_flags()
    parser = _Parser(prog="irlm", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("build-vocab", parents=[parent], help="build a vocabulary file from a corpus")
    p.add_argument("--corpus")
    p.add_argument("--output", help="vocabulary file (default: OUT/vocab.txt)")

    p = sub.add_parser("pretrain", parents=[parent], help="pre-train an encoder")
    p.add_argument("--corpus")
    p.add_argument("--vocab")
    p.add_argument("--heldout")
    p.add_argument("--baseline", action="store_true", help="force both regularizer weights to 0")
    p.add_argument("--resume", help="checkpoint to continue from")

    p = sub.add_parser("evaluate", parents=[parent], help="MLM and probe metrics for a checkpoint")
    p.add_argument("--checkpoint")
    p.add_argument("--vocab")
    p.add_argument("--heldout")
    p.add_argument("--probe-data")

    p = sub.add_parser("ablate", parents=[parent], help="run the ablation grid")
    p.add_argument("--corpus")
    p.add_argument("--vocab")
    p.add_argument("--heldout")
    p.add_argument("--probe-data")
    p.add_argument("--seeds", help="comma-separated seeds")

    p = sub.add_parser("robustness", parents=[parent], help="synonym-swap robustness of one or more checkpoints")
    p.add_argument("--checkpoint", action="append", default=[], metavar="[NAME=]PATH")
    p.add_argument("--vocab")
    p.add_argument("--probe-data")
    p.add_argument("--synonyms")

    p = sub.add_parser("curves", parents=[parent], help="align metrics files into one long-format CSV")
    p.add_argument("--metrics", action="append", default=[], metavar="[NAME=]PATH")
    p.add_argument("--metric", action="append", default=None, help="column(s) to export (default: all)")
    p.add_argument("--step-grid", help="comma-separated steps to keep")
    p.add_argument("--no-plot", action="store_true")

    p = sub.add_parser("make-synthetic", parents=[parent], help="write the synthetic corpus, probe set and synonym table")
    p.add_argument("--n-corpus", type=int, default=SyntheticConfig.n_corpus)
    p.add_argument("--n-heldout", type=int, default=SyntheticConfig.n_heldout)
    p.add_argument("--n-probe-per-class", type=int, default=SyntheticConfig.n_probe_per_class)
    return parser


def _resolve(args) -> RunConfig:
    overrides = {"seed": args.seed, "out": args.out, "precision": args.precision}
    for key in ("corpus", "vocab", "heldout", "probe_data", "synonyms", "seeds", "step_grid"):
        overrides[key] = getattr(args, key, None)
    if getattr(args, "baseline", False):
        overrides["weight_ecp"] = 0.0
        overrides["weight_dpp"] = 0.0
    if getattr(args, "checkpoint", None):
        ck = args.checkpoint
        overrides["checkpoint"] = ",".join(ck) if isinstance(ck, list) else ck
    if getattr(args, "metrics", None):
        overrides["metrics"] = ",".join(args.metrics)
    return load_config(args.config, overrides, args.set)


def _echo(cfg: RunConfig, out: Path, command: str) -> None:
    out.mkdir(parents=True, exist_ok=True)
    threads = {k: os.environ.get(k, "") for k in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS")}
    header = f"# irlm {command}\n" + "".join(f"# env {k}={v}\n" for k, v in threads.items())
    (out / "config.resolved.txt").write_text(header + cfg.dump(), encoding="utf-8")


def _require(cfg: RunConfig, *keys: str) -> None:
    missing = [k for k in keys if not getattr(cfg, k)]
    if missing:
        raise UsageError("missing required setting(s): " + ", ".join(missing))


def _require_file(path: str, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"{what} not found: {p}")
    return p


def _sequences(path: str, vocab: Vocab, max_len: int) -> list[list[int]]:
    seqs = [encode(t, vocab, max_len) for t in read_corpus(_require_file(path, "corpus"))]
    kept = [s for s in seqs if maskable_positions(s)]
    if len(kept) < len(seqs):
        log.warning("dropped %d sequences with no maskable tokens", len(seqs) - len(kept))
    return kept


def _load_vocab(cfg: RunConfig, out: Path) -> Vocab:
    if cfg.vocab:
        return Vocab.load(_require_file(cfg.vocab, "vocabulary"))
    _require(cfg, "corpus")
    vocab = build_vocab(_require_file(cfg.corpus, "corpus"), cfg.min_frequency, cfg.max_vocab_size)
    vocab.save(out / "vocab.txt")
    return vocab


def cmd_build_vocab(args, cfg: RunConfig) -> int:
    _require(cfg, "corpus")
    out = Path(cfg.out)
    _echo(cfg, out, "build-vocab")
    vocab = build_vocab(_require_file(cfg.corpus, "corpus"), cfg.min_frequency, cfg.max_vocab_size)
    target = Path(args.output) if args.output else out / "vocab.txt"
    target.parent.mkdir(parents=True, exist_ok=True)
    vocab.save(target)
    print(f"vocab size: {len(vocab)} -> {target}")
    return 0


def cmd_pretrain(args, cfg: RunConfig) -> int:
    _require(cfg, "corpus")
    out = Path(cfg.out)
    _echo(cfg, out, "pretrain")
    vocab = _load_vocab(cfg, out)
    seqs = _sequences(cfg.corpus, vocab, cfg.max_len)
    evaluator = None
    if cfg.heldout and cfg.eval_interval > 0:
        held = _sequences(cfg.heldout, vocab, cfg.max_len)
        ecfg = cfg.ennoise_config()
        evaluator = lambda m: mlm_eval(m, held, ecfg, cfg.eval_seed)  # noqa: E731
    resume = _require_file(args.resume, "checkpoint") if args.resume else None
    result = train(cfg.train_config(), cfg.model_config(len(vocab)), seqs, out, resume_from=resume, evaluator=evaluator)
    last = result.history[-1] if result.history else None
    if last is not None:
        print(f"step {last.step}: l_total {last.l_total:.4f} (dae {last.l_dae:.4f}, ecp {last.l_ecp:.4f}, dpp {last.l_dpp:.4f})")
    print(f"checkpoint: {result.checkpoint}")
    print(f"metrics: {result.metrics_path}")
    return 0


def cmd_evaluate(args, cfg: RunConfig) -> int:
    _require(cfg, "checkpoint", "vocab")
    out = Path(cfg.out)
    _echo(cfg, out, "evaluate")
    model, _, _ = load_checkpoint(_require_file(cfg.checkpoint, "checkpoint"))
    vocab = Vocab.load(_require_file(cfg.vocab, "vocabulary"))
    row = {"checkpoint": cfg.checkpoint}
    if cfg.heldout:
        m = mlm_eval(model, _sequences(cfg.heldout, vocab, model.config.max_len), cfg.ennoise_config(), cfg.eval_seed)
        row.update(mlm_loss=m["mlm_loss"], mlm_acc=m["mlm_acc"])
    if cfg.probe_data:
        task = make_probe_task(read_labeled(_require_file(cfg.probe_data, "probe data")), cfg.seed)
        probe = probe_train_eval(model, task, vocab, cfg.probe_config())
        row.update(probe_acc=probe.accuracy, probe_best_epoch=probe.best_epoch, majority_baseline=majority_baseline(task))
    write_csv(out / "evaluate.csv", list(row), [row])
    for k, v in row.items():
        print(f"{k}: {v}")
    return 0


def cmd_ablate(args, cfg: RunConfig) -> int:
    _require(cfg, "corpus", "heldout", "probe_data")
    out = Path(cfg.out)
    _echo(cfg, out, "ablate")
    vocab = _load_vocab(cfg, out)
    seqs = _sequences(cfg.corpus, vocab, cfg.max_len)
    held = _sequences(cfg.heldout, vocab, cfg.max_len)
    task = make_probe_task(read_labeled(_require_file(cfg.probe_data, "probe data")), cfg.seed)
    rows = ablation_grid(
        seqs, held, task, vocab, cfg.train_config(), cfg.model_config(len(vocab)), cfg.seed_list(), out,
        cfg.probe_config(), n_jobs=cfg.n_jobs, eval_seed=cfg.eval_seed,
    )
    summary = summarize_ablation(rows)
    finding = directional_finding(summary)
    plot_ablation(rows, out / "ablation.png")
    curves = {f"{r['variant']}_seed{r['seed']}": out / f"{r['variant']}_seed{r['seed']}" / "metrics.csv" for r in rows}
    curve_rows = curve_export(curves, out / "curves.csv", metrics=["l_total", "l_dae"])
    plot_curves(curve_rows, out / "curves.png")
    lines = [f"{len(rows)} rows -> {out / 'ablation.csv'}"]
    lines += [f"{s['variant']:>9}: probe {s['mean_probe_acc']:.4f} +- {s['std_probe_acc']:.4f}, mlm_loss {s['mean_mlm_loss']:.4f}" for s in summary]
    lines.append(f"full IR >= each single-term ablation (mean probe acc): {finding['holds']} {finding}")
    (out / "ablation_finding.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    print("\n".join(lines))
    return 0


def cmd_robustness(args, cfg: RunConfig) -> int:
    _require(cfg, "checkpoint", "vocab", "probe_data", "synonyms")
    out = Path(cfg.out)
    _echo(cfg, out, "robustness")
    vocab = Vocab.load(_require_file(cfg.vocab, "vocabulary"))
    task = make_probe_task(read_labeled(_require_file(cfg.probe_data, "probe data")), cfg.seed)
    table = SynonymTable.load(_require_file(cfg.synonyms, "synonym table"))
    reports = []
    for name, path in cfg.named_paths(cfg.checkpoint).items():
        model, _, _ = load_checkpoint(_require_file(path, "checkpoint"))
        rep = robustness_eval(model, task, table, vocab, cfg.probe_config(), cfg.swap_fraction, cfg.seed, name)
        reports.append(rep.row())
        print(f"{name}: original {rep.original:.4f} swapped {rep.transformed:.4f} delta {rep.delta:+.4f} "
              f"(altered {rep.altered_fraction:.2%}, sound {rep.sound_fraction:.2%}, n={rep.n_examples})")
    write_csv(out / "robustness.csv", ROBUSTNESS_HEADER, reports)
    plot_robustness(reports, out / "robustness.png")
    return 0


def cmd_curves(args, cfg: RunConfig) -> int:
    _require(cfg, "metrics")
    out = Path(cfg.out)
    _echo(cfg, out, "curves")
    files = {name: _require_file(path, "metrics file") for name, path in cfg.named_paths(cfg.metrics).items()}
    grid = [int(s) for s in cfg.step_grid.split(",") if s.strip()] or None
    rows = curve_export(files, out / "curves.csv", metrics=args.metric, step_grid=grid)
    if not args.no_plot:
        plot_curves(rows, out / "curves.png")
    print(f"{len(rows)} rows -> {out / 'curves.csv'}")
    return 0


def cmd_make_synthetic(args, cfg: RunConfig) -> int:
    out = Path(cfg.out)
    syn = SyntheticConfig(seed=cfg.seed, n_corpus=args.n_corpus, n_heldout=args.n_heldout, n_probe_per_class=args.n_probe_per_class)
    for name, path in write_synthetic(out, syn).items():
        print(f"{name}: {path}")
    return 0


COMMANDS = {
    "build-vocab": cmd_build_vocab,
    "pretrain": cmd_pretrain,
    "evaluate": cmd_evaluate,
    "ablate": cmd_ablate,
    "robustness": cmd_robustness,
    "curves": cmd_curves,
    "make-synthetic": cmd_make_synthetic,
}


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = _resolve(args)
    except ConfigError as exc:
        print(f"irlm {args.command}: {exc}", file=sys.stderr)
        return 1
    try:
        return COMMANDS[args.command](args, cfg)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"irlm {args.command}: {exc}", file=sys.stderr)
        return 1
    except (OSError, ValueError, FloatingPointError) as exc:
        print(f"irlm {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
