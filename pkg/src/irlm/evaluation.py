"""Desk-scale evaluation: MLM metrics, linear probe, synonym robustness, ablations, curves."""

from __future__ import annotations

import csv
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np

from . import tensor as T
from .ennoise import EnnoiseConfig, ennoise, maskable_positions
from .model import Model, ModelConfig, forward, mlm_logits, predict_masked
from .optim import AdamState, adam_step
from .tensor import Tensor, no_grad
from .text import Vocab, encode, pad_batch
from .trainer import TrainConfig, train

log = logging.getLogger(__name__)

EVAL_STREAM = 3


# -- masked-LM metrics --------------------------------------------------------

def mlm_eval(model: Model, sequences: Sequence[Sequence[int]], config: EnnoiseConfig, seed: int = 1234, batch_size: int = 64) -> dict:
    """Pooled masked-token loss and top-1 accuracy under a fixed masking seed."""
    usable = [(i, s) for i, s in enumerate(sequences) if maskable_positions(s)]
    if not usable:
        raise ValueError("mlm_eval: no evaluable sequences")
    V = model.config.vocab_size
    total_nll, correct, count = 0.0, 0, 0
    with no_grad():
        for start in range(0, len(usable), batch_size):
            chunk = usable[start : start + batch_size]
            insts = [ennoise(s, config, np.random.default_rng([seed, 0, EVAL_STREAM, i]), V) for i, s in chunk]
            b = pad_batch([x.corrupted for x in insts])
            logits = mlm_logits(model, forward(model, b.ids, b.attention_mask, False)).data
            for row, inst in enumerate(insts):
                sel = logits[row, inst.masked_positions]
                shifted = sel - sel.max(axis=1, keepdims=True)
                logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
                total_nll -= float(logp[np.arange(len(inst.labels)), inst.labels].sum())
                preds = predict_masked(logits[row], inst.masked_positions)
                correct += sum(int(p == t) for p, t in zip(preds, inst.labels))
                count += len(inst.labels)
    return {"mlm_loss": total_nll / count, "mlm_acc": correct / count, "n_masked": count}


# -- probe task ---------------------------------------------------------------

@dataclass
class ProbeTask:
    texts: list[str]
    labels: list[int]
    n_classes: int
    train_idx: list[int]
    val_idx: list[int]
    test_idx: list[int]

    def __post_init__(self):
        splits = (self.train_idx, self.val_idx, self.test_idx)
        seen = [i for s in splits for i in s]
        if sorted(seen) != list(range(len(self.texts))):
            raise ValueError("probe splits must be disjoint and cover the dataset")
        for name, idx in zip(("train", "validation", "test"), splits):
            missing = set(range(self.n_classes)) - {self.labels[i] for i in idx}
            if missing:
                raise ValueError(f"class(es) {sorted(missing)} missing from the {name} split")

    def examples(self, split: str) -> list[tuple[int, str]]:
        idx = {"train": self.train_idx, "val": self.val_idx, "test": self.test_idx}[split]
        return [(self.labels[i], self.texts[i]) for i in idx]


def read_labeled(path) -> list[tuple[int, str]]:
    """UTF-8 TSV with columns label, text."""
    rows = []
    for n, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        label, sep, text = line.partition("\t")
        if not sep:
            raise ValueError(f"{path}:{n}: expected 'label<TAB>text'")
        rows.append((int(label), text))
    return rows


def make_probe_task(examples: Sequence[tuple[int, str]], seed: int = 0, fractions=(0.6, 0.2, 0.2)) -> ProbeTask:
    """Stratified train/validation/test split."""
    labels = [lab for lab, _ in examples]
    n_classes = max(labels) + 1
    rng = np.random.default_rng([seed, 11])
    train_idx, val_idx, test_idx = [], [], []
    for c in range(n_classes):
        idx = [i for i, lab in enumerate(labels) if lab == c]
        idx = [idx[j] for j in rng.permutation(len(idx))]
        n_train = int(round(fractions[0] * len(idx)))
        n_val = int(round(fractions[1] * len(idx)))
        train_idx += idx[:n_train]
        val_idx += idx[n_train : n_train + n_val]
        test_idx += idx[n_train + n_val :]
    return ProbeTask([t for _, t in examples], labels, n_classes, sorted(train_idx), sorted(val_idx), sorted(test_idx))


@dataclass(frozen=True)
class ProbeConfig:
    mode: str = "frozen"  # or "finetune"
    epochs: int = 30
    lr: float = 1e-2
    batch_size: int = 32
    seed: int = 0
    max_len: int = 32

    def __post_init__(self):
        if self.mode not in ("frozen", "finetune"):
            raise ValueError(f"probe mode must be 'frozen' or 'finetune', got {self.mode!r}")


@dataclass
class ProbeResult:
    accuracy: float
    val_accuracy: float
    best_epoch: int
    model: Model = field(repr=False)
    weight: np.ndarray = field(repr=False)
    bias: np.ndarray = field(repr=False)
    vocab: Vocab = field(repr=False)
    max_len: int = 32

    def predict(self, texts: Sequence[str]) -> np.ndarray:
        feats = cls_features(self.model, [encode(t, self.vocab, self.max_len) for t in texts])
        return np.argmax(feats @ self.weight + self.bias, axis=1)

    def accuracy_on(self, examples: Sequence[tuple[int, str]]) -> float:
        if not examples:
            raise ValueError("accuracy_on: empty example set")
        labels = np.array([lab for lab, _ in examples])
        return float(np.mean(self.predict([t for _, t in examples]) == labels))


def cls_features(model: Model, sequences: Sequence[Sequence[int]], batch_size: int = 128) -> np.ndarray:
    out = []
    with no_grad():
        for i in range(0, len(sequences), batch_size):
            b = pad_batch(sequences[i : i + batch_size])
            out.append(forward(model, b.ids, b.attention_mask, False).values.data[:, 0, :])
    return np.concatenate(out, axis=0) if out else np.zeros((0, model.config.d_model))


def log_prior(labels: Sequence[int], n_classes: int) -> np.ndarray:
    counts = np.bincount(np.asarray(labels), minlength=n_classes).astype(np.float64)
    return np.log(np.maximum(counts, 1e-12) / counts.sum())


def majority_baseline(task: ProbeTask) -> float:
    """Test accuracy of always predicting the most frequent training class (lowest id on ties)."""
    counts = np.bincount([task.labels[i] for i in task.train_idx], minlength=task.n_classes)
    majority = int(np.argmax(counts))
    return float(np.mean([task.labels[i] == majority for i in task.test_idx]))


def zero_classifier(model: Model, task: ProbeTask, vocab: Vocab, max_len: int = 32) -> ProbeResult:
    """Zero weights, log-prior bias: the majority-class predictor expressed as a probe."""
    w = np.zeros((model.config.d_model, task.n_classes))
    b = log_prior([task.labels[i] for i in task.train_idx], task.n_classes)
    res = ProbeResult(0.0, 0.0, 0, model, w, b, vocab, max_len)
    res.accuracy = res.accuracy_on(task.examples("test"))
    return res


def _copy_model(model: Model) -> Model:
    return Model(model.config, {n: Tensor(p.data.copy(), requires_grad=True, name=n) for n, p in model.params.items()})


def probe_train_eval(model: Model, task: ProbeTask, vocab: Vocab, config: ProbeConfig = ProbeConfig()) -> ProbeResult:
    """Train a linear classifier on the [CLS] state; report test accuracy at the best validation epoch.

    ``frozen`` leaves the encoder untouched. ``finetune`` trains a private
    copy of the encoder together with the classifier.
    """
    train_lab = [task.labels[i] for i in task.train_idx]
    missing = set(range(task.n_classes)) - set(train_lab)
    if missing:
        raise ValueError(f"class(es) {sorted(missing)} missing from the probe training split")
    encoder = model if config.mode == "frozen" else _copy_model(model)
    dtype = model.config.dtype
    enc = lambda idx: [encode(task.texts[i], vocab, config.max_len) for i in idx]  # noqa: E731
    train_seqs, y_train = enc(task.train_idx), np.array(train_lab)
    val_ex, test_ex = task.examples("val"), task.examples("test")

    weight = Tensor(np.zeros((model.config.d_model, task.n_classes), dtype=dtype), requires_grad=True, name="probe.weight")
    bias = Tensor(log_prior(train_lab, task.n_classes).astype(dtype), requires_grad=True, name="probe.bias")
    head = {"probe.weight": weight, "probe.bias": bias}
    trainable = dict(head) if config.mode == "frozen" else {**encoder.params, **head}
    opt = AdamState(lr=config.lr, weight_decay=0.0)
    rng = np.random.default_rng([config.seed, 13])
    frozen_feats = cls_features(encoder, train_seqs) if config.mode == "frozen" else None

    best = (-1.0, 0, 0.0, None)
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(len(train_seqs))
        for start in range(0, len(order), config.batch_size):
            idx = order[start : start + config.batch_size]
            T.get_tape().clear()
            for p in trainable.values():
                p.grad = None
            if frozen_feats is not None:
                feats = Tensor(frozen_feats[idx])
            else:
                b = pad_batch([train_seqs[i] for i in idx])
                h = forward(encoder, b.ids, b.attention_mask, True, rng)
                feats = h.values[:, 0, :]
            loss = T.cross_entropy(feats @ weight + bias, y_train[idx])
            T.backward(loss)
            for p in trainable.values():
                if p.grad is None:
                    p.grad = np.zeros_like(p.data)
            adam_step(trainable, opt)
        snapshot = ProbeResult(0.0, 0.0, epoch, encoder, weight.data.copy(), bias.data.copy(), vocab, config.max_len)
        val_acc = snapshot.accuracy_on(val_ex)
        if val_acc > best[0]:
            snapshot.val_accuracy = val_acc
            snapshot.accuracy = snapshot.accuracy_on(test_ex)
            if config.mode == "finetune":
                snapshot.model = _copy_model(encoder)
            best = (val_acc, epoch, snapshot.accuracy, snapshot)
    return best[3]


# -- synonym robustness -------------------------------------------------------

class SynonymTable(dict):
    """word -> admissible single-token replacements."""

    def __init__(self, entries: Mapping[str, Sequence[str]] = ()):
        super().__init__()
        for word, syns in dict(entries).items():
            syns = list(syns)
            for tok in [word, *syns]:
                if not tok or len(tok.split()) != 1:
                    raise ValueError(f"synonym table entries must be single whitespace tokens, got {tok!r}")
            if word in syns:
                raise ValueError(f"synonym table maps {word!r} to itself")
            if syns:
                self[word] = syns

    @classmethod
    def load(cls, path) -> "SynonymTable":
        entries = {}
        for n, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
            if not line.strip():
                continue
            word, sep, rest = line.partition("\t")
            if not sep:
                raise ValueError(f"{path}:{n}: expected 'word<TAB>syn1,syn2,...'")
            entries[word.strip()] = [s.strip() for s in rest.split(",") if s.strip()]
        return cls(entries)

    def save(self, path) -> None:
        Path(path).write_text("".join(f"{w}\t{','.join(s)}\n" for w, s in self.items()), encoding="utf-8")


def synonym_swap(dataset: Sequence[tuple[int, str]], table: Mapping[str, Sequence[str]], rng: np.random.Generator, swap_fraction: float = 1.0) -> list[tuple[int, str]]:
    """Replace each table word with a uniformly chosen synonym with probability ``swap_fraction``.

    Labels are kept; examples where nothing was replaced are returned verbatim.
    """
    out = []
    for label, text in dataset:
        tokens = text.split()
        changed = False
        for i, tok in enumerate(tokens):
            syns = table.get(tok.lower())
            if syns and rng.random() < swap_fraction:
                tokens[i] = syns[int(rng.integers(len(syns)))]
                changed = True
        out.append((label, " ".join(tokens) if changed else text))
    return out


def swap_is_sound(original: str, transformed: str, table: Mapping[str, Sequence[str]]) -> bool:
    """True when every token-level difference is a substitution listed in ``table``."""
    a, b = original.split(), transformed.split()
    if len(a) != len(b):
        return False
    return all(x == y or y in table.get(x.lower(), ()) for x, y in zip(a, b))


@dataclass
class RobustnessReport:
    name: str
    transform: str
    n_examples: int
    original: float
    transformed: float
    altered_fraction: float
    sound_fraction: float

    @property
    def delta(self) -> float:
        return self.transformed - self.original

    def row(self) -> dict:
        return {
            "name": self.name, "transform": self.transform, "n_examples": self.n_examples,
            "original": self.original, "transformed": self.transformed, "delta": self.delta,
            "altered_fraction": self.altered_fraction, "sound_fraction": self.sound_fraction,
        }


ROBUSTNESS_HEADER = ["name", "transform", "n_examples", "original", "transformed", "delta", "altered_fraction", "sound_fraction"]


def robustness_eval(
    model: Model,
    task: ProbeTask,
    table: Mapping[str, Sequence[str]],
    vocab: Vocab,
    config: ProbeConfig = ProbeConfig(),
    swap_fraction: float = 1.0,
    seed: int = 0,
    name: str = "model",
    probe: Optional[ProbeResult] = None,
) -> RobustnessReport:
    """Probe accuracy on the original test split versus its synonym-swapped copy."""
    probe = probe or probe_train_eval(model, task, vocab, config)
    test = task.examples("test")
    swapped = synonym_swap(test, table, np.random.default_rng([seed, 17]), swap_fraction)
    altered = sum(a[1] != b[1] for a, b in zip(test, swapped))
    sound = sum(swap_is_sound(a[1], b[1], table) for a, b in zip(test, swapped))
    return RobustnessReport(
        name=name,
        transform="synonym_swap",
        n_examples=len(test),
        original=probe.accuracy_on(test),
        transformed=probe.accuracy_on(swapped),
        altered_fraction=altered / len(test),
        sound_fraction=sound / len(test),
    )


# -- ablation grid ------------------------------------------------------------

VARIANTS = ("ir", "no_ecp", "no_dpp", "baseline")
ABLATION_HEADER = ["variant", "seed", "mlm_loss", "mlm_acc", "probe_acc"]


def variant_config(base: TrainConfig, variant: str, seed: int) -> TrainConfig:
    reg = base.regularizer
    weights = {
        "ir": (reg.weight_ecp, reg.weight_dpp),
        "no_ecp": (0.0, reg.weight_dpp),
        "no_dpp": (reg.weight_ecp, 0.0),
        "baseline": (0.0, 0.0),
    }[variant]
    reg = replace(reg, weight_ecp=weights[0], weight_dpp=weights[1])
    return replace(base, seed=seed, regularizer=reg, ennoise=replace(base.ennoise, seed=seed))


@dataclass
class _Cell:
    variant: str
    seed: int
    train_config: TrainConfig
    model_config: ModelConfig
    sequences: list
    heldout: list
    task: ProbeTask
    vocab: Vocab
    probe_config: ProbeConfig
    out_dir: Path
    eval_seed: int


def _run_cell(cell: _Cell) -> dict:
    run_dir = cell.out_dir / f"{cell.variant}_seed{cell.seed}"
    mc = replace(cell.model_config, seed=cell.seed)
    result = train(cell.train_config, mc, cell.sequences, run_dir)
    m = mlm_eval(result.model, cell.heldout, cell.train_config.ennoise, cell.eval_seed)
    probe = probe_train_eval(result.model, cell.task, cell.vocab, replace(cell.probe_config, seed=cell.seed))
    log.info("%s seed %d: mlm_loss %.4f mlm_acc %.4f probe_acc %.4f", cell.variant, cell.seed, m["mlm_loss"], m["mlm_acc"], probe.accuracy)
    return {
        "variant": cell.variant, "seed": cell.seed, "mlm_loss": m["mlm_loss"],
        "mlm_acc": m["mlm_acc"], "probe_acc": probe.accuracy, "checkpoint": str(result.checkpoint),
    }


def write_csv(path, header: Sequence[str], rows: Sequence[Mapping]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([repr(r[k]) if isinstance(r[k], float) else r[k] for k in header])


def ablation_grid(
    sequences: Sequence[Sequence[int]],
    heldout: Sequence[Sequence[int]],
    task: ProbeTask,
    vocab: Vocab,
    base: TrainConfig,
    model_config: ModelConfig,
    seeds: Sequence[int],
    out_dir,
    probe_config: ProbeConfig = ProbeConfig(),
    variants: Sequence[str] = VARIANTS,
    n_jobs: int = 1,
    eval_seed: int = 1234,
) -> list[dict]:
    """Train and evaluate every (variant, seed) cell; writes ablation.csv and ablation_summary.csv."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cells = [
        _Cell(v, s, variant_config(base, v, s), model_config, list(sequences), list(heldout), task, vocab, probe_config, out, eval_seed)
        for s in seeds
        for v in variants
    ]
    if n_jobs > 1:
        with ProcessPoolExecutor(max_workers=n_jobs) as pool:
            rows = list(pool.map(_run_cell, cells))
    else:
        rows = [_run_cell(c) for c in cells]
    write_csv(out / "ablation.csv", ABLATION_HEADER, rows)
    write_csv(out / "ablation_summary.csv", SUMMARY_HEADER, summarize_ablation(rows))
    return rows


SUMMARY_HEADER = ["variant", "n_seeds", "mean_mlm_loss", "mean_mlm_acc", "mean_probe_acc", "std_probe_acc"]


def summarize_ablation(rows: Sequence[Mapping]) -> list[dict]:
    out = []
    for v in dict.fromkeys(r["variant"] for r in rows):
        sel = [r for r in rows if r["variant"] == v]
        probe = np.array([float(r["probe_acc"]) for r in sel])
        out.append({
            "variant": v, "n_seeds": len(sel),
            "mean_mlm_loss": float(np.mean([float(r["mlm_loss"]) for r in sel])),
            "mean_mlm_acc": float(np.mean([float(r["mlm_acc"]) for r in sel])),
            "mean_probe_acc": float(probe.mean()),
            "std_probe_acc": float(probe.std(ddof=1)) if len(sel) > 1 else 0.0,
        })
    return out


def directional_finding(summary: Sequence[Mapping]) -> dict:
    """Whether the full objective's mean probe accuracy is at least each single-term ablation's."""
    means = {r["variant"]: float(r["mean_probe_acc"]) for r in summary}
    verdict = {f"ir_ge_{v}": means["ir"] >= means[v] for v in ("no_ecp", "no_dpp") if v in means and "ir" in means}
    verdict["holds"] = bool(verdict) and all(verdict.values())
    return verdict


# -- curves -------------------------------------------------------------------

CURVE_HEADER = ["run", "step", "metric", "value"]


def curve_export(
    metrics_files: Mapping[str, str | Path],
    out_csv,
    metrics: Optional[Sequence[str]] = None,
    step_grid: Optional[Sequence[int]] = None,
) -> list[dict]:
    """Long-format (run, step, metric, value) table over the steps every run shares.

    Values are copied from the source files as text. Steps missing from any
    run are dropped with a warning.
    """
    tables = {}
    for run, path in metrics_files.items():
        with open(path, newline="") as fh:
            tables[run] = {int(r["step"]): r for r in csv.DictReader(fh)}
    step_sets = [set(t) for t in tables.values()]
    common = set.intersection(*step_sets) if step_sets else set()
    if any(s != common for s in step_sets):
        log.warning("curve_export: runs have different step grids; keeping the %d shared steps", len(common))
    if step_grid is not None:
        missing = set(step_grid) - common
        if missing:
            log.warning("curve_export: %d requested steps are not shared by all runs", len(missing))
        common &= set(step_grid)
    if not common:
        log.warning("curve_export: no common steps; writing an empty table")
    if metrics is None:
        first = next(iter(tables.values()), {})
        sample = next(iter(first.values()), {})
        metrics = [k for k in sample if k not in ("step", "wall_time_s")]
    rows = [
        {"run": run, "step": step, "metric": m, "value": tables[run][step][m]}
        for run in tables
        for step in sorted(common)
        for m in metrics
    ]
    with open(out_csv, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CURVE_HEADER)
        w.writerows([r[k] for k in CURVE_HEADER] for r in rows)
    return rows
