"""Pre-training loop: ennoise, denoise, fill back, regularize, step."""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .ennoise import EnnoiseConfig, EnnoisedInstance, ennoise, maskable_positions, sequence_rng
from .model import Model, ModelConfig, forward, init_model, load_checkpoint, mlm_logits, predict_masked, save_checkpoint
from .optim import AdamState, adam_step, clip_grad_norm
from .regularizer import LossBreakdown, RegularizerConfig, dpp, ecp, fill_back, regularized_loss
from .tensor import backward, cross_entropy, get_tape, no_grad
from .text import Batch, make_batches, pad_batch

log = logging.getLogger(__name__)

METRICS_HEADER = ["step", "l_dae", "l_ecp", "l_dpp", "l_total", "lr", "wall_time_s"]
EVAL_HEADER = ["step", "mlm_loss", "mlm_acc"]
DROPOUT_STREAM, SHUFFLE_STREAM = 1, 2


@dataclass(frozen=True)
class TrainConfig:
    total_steps: int = 2000
    batch_size: int = 16
    learning_rate: float = 1e-3
    warmup_fraction: float = 0.1
    seed: int = 0
    checkpoint_interval: int = 0  # 0: only the final checkpoint
    eval_interval: int = 0
    weight_decay: float = 0.01
    clip_norm: float = 1.0
    precision: str = "double"
    mlm_only: bool = False  # plain MLM trainer, no extra forwards
    regularizer: RegularizerConfig = field(default_factory=RegularizerConfig)
    ennoise: EnnoiseConfig = field(default_factory=EnnoiseConfig)

    def __post_init__(self):
        if self.total_steps < 1:
            raise ValueError("total_steps must be >= 1")
        if not 0.0 <= self.warmup_fraction < 1.0:
            raise ValueError("warmup_fraction must lie in [0, 1)")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")

    @property
    def warmup_steps(self) -> int:
        return int(self.warmup_fraction * self.total_steps)


def lr_at(step: int, config: TrainConfig) -> float:
    """Linear ramp from 0 to the peak over the warmup, then linear decay to 0 at ``total_steps``."""
    n, w, peak = config.total_steps, config.warmup_steps, config.learning_rate
    if not 0 <= step <= n:
        raise ValueError(f"step {step} outside [0, {n}]")
    if step < w:
        return peak * step / w
    return peak * (n - step) / (n - w)


def ennoise_batch(batch: Batch, config: EnnoiseConfig, seed: int, step: int, vocab_size: int) -> list[EnnoisedInstance]:
    """One independent RNG stream per sequence, keyed by corpus index when the batch carries it."""
    mask_step = step if config.dynamic else 0
    keys = batch.indices if batch.indices is not None else range(len(batch))
    return [
        ennoise(seq, config, sequence_rng(seed, mask_step, int(k)), vocab_size)
        for seq, k in zip(batch.sequences(), keys)
    ]


def _mlm_targets(instances: Sequence[EnnoisedInstance], width: int) -> tuple[np.ndarray, np.ndarray]:
    targets = np.zeros((len(instances), width), dtype=np.int64)
    selected = np.zeros((len(instances), width), dtype=bool)
    for i, inst in enumerate(instances):
        targets[i, inst.masked_positions] = inst.labels
        selected[i, inst.masked_positions] = True
    return targets, selected


def instance_losses(
    model: Model,
    instances: Sequence[EnnoisedInstance],
    reg: RegularizerConfig,
    train_mode: bool = True,
    rng: Optional[np.random.Generator] = None,
) -> LossBreakdown:
    """Build the full regularized objective for a batch of ennoised instances.

    The corrupted forward follows ``train_mode``; the original and filled
    forwards always run without dropout, and the original one is not
    recorded at all when ``reg.detach_original`` is set.
    """
    corrupted = pad_batch([x.corrupted for x in instances])
    h = forward(model, corrupted.ids, corrupted.attention_mask, train_mode, rng, "corrupted")
    logits = mlm_logits(model, h)
    targets, selected = _mlm_targets(instances, corrupted.ids.shape[1])
    l_dae = cross_entropy(logits, targets, selected)

    filled = [
        fill_back(x.corrupted, x.masked_positions, predict_masked(logits.data[i], x.masked_positions)).ids
        for i, x in enumerate(instances)
    ]
    original = pad_batch([x.original for x in instances])
    filled_b = pad_batch(filled)
    if reg.detach_original:
        with no_grad():
            h_hat = forward(model, original.ids, original.attention_mask, False, None, "original")
    else:
        h_hat = forward(model, original.ids, original.attention_mask, False, None, "original")
    if reg.detach_filled:
        with no_grad():
            h_tilde = forward(model, filled_b.ids, filled_b.attention_mask, False, None, "filled")
    else:
        h_tilde = forward(model, filled_b.ids, filled_b.attention_mask, False, None, "filled")

    positions = selected if reg.positions == "masked" else corrupted.attention_mask
    l_ecp = ecp(h, h_hat, positions, reg)
    l_dpp = dpp(h_tilde, h_hat, positions, reg)
    return regularized_loss(l_dae, l_ecp, l_dpp, reg)


def mlm_losses(model: Model, instances: Sequence[EnnoisedInstance], train_mode: bool = True, rng=None) -> LossBreakdown:
    """Plain MLM objective: one forward, no penalties."""
    corrupted = pad_batch([x.corrupted for x in instances])
    h = forward(model, corrupted.ids, corrupted.attention_mask, train_mode, rng, "corrupted")
    targets, selected = _mlm_targets(instances, corrupted.ids.shape[1])
    l_dae = cross_entropy(mlm_logits(model, h), targets, selected)
    v = l_dae.item()
    return LossBreakdown(l_dae=v, l_ecp=0.0, l_dpp=0.0, l_total=v, loss=l_dae)


def new_optimizer(model: Model, config: TrainConfig) -> AdamState:
    return AdamState(lr=config.learning_rate, weight_decay=config.weight_decay, no_decay=model.no_decay_names())


def train_step(model: Model, batch: Batch, config: TrainConfig, step: int, adam: AdamState) -> LossBreakdown:
    """One optimizer update; ``step`` is 1-based and keys every RNG stream used."""
    get_tape().clear()
    model.zero_grad()
    instances = ennoise_batch(batch, config.ennoise, config.seed, step, model.config.vocab_size)
    drop_rng = np.random.default_rng([config.seed, step, DROPOUT_STREAM, 0])
    try:
        if config.mlm_only:
            bd = mlm_losses(model, instances, True, drop_rng)
        else:
            bd = instance_losses(model, instances, config.regularizer, True, drop_rng)
    except FloatingPointError as exc:
        get_tape().clear()
        raise FloatingPointError(f"non-finite loss at step {step}: {exc}") from None
    if not all(math.isfinite(v) for v in (bd.l_dae, bd.l_ecp, bd.l_dpp, bd.l_total)):
        get_tape().clear()
        raise FloatingPointError(f"non-finite loss at step {step}: {bd}")
    backward(bd.loss)
    clip_grad_norm(model.params, config.clip_norm)
    lr = lr_at(step, config)
    adam_step(model.params, adam, lr)
    bd.step = step
    bd.learning_rate = lr
    bd.loss = None
    return bd


class BatchSchedule:
    """Deterministic step -> batch map: each epoch is a fresh seeded shuffle."""

    def __init__(self, sequences: Sequence[Sequence[int]], batch_size: int, seed: int):
        if not len(sequences):
            raise ValueError("training corpus is empty")
        self.sequences = sequences
        self.batch_size = batch_size
        self.seed = seed
        self.per_epoch = math.ceil(len(sequences) / batch_size)
        self._epoch = -1
        self._batches: list[Batch] = []

    def __call__(self, step: int) -> Batch:
        epoch, index = divmod(step - 1, self.per_epoch)
        if epoch != self._epoch:
            rng = np.random.default_rng([self.seed, epoch, SHUFFLE_STREAM, 0])
            self._batches = make_batches(self.sequences, self.batch_size, rng)
            self._epoch = epoch
        return self._batches[index]


@dataclass
class TrainResult:
    model: Model
    checkpoint: Path
    metrics_path: Path
    history: list[LossBreakdown]


def _fmt(v) -> str:
    return repr(float(v)) if isinstance(v, float) else str(v)


def _prepare_metrics(path: Path, header: list[str], keep_through: int) -> None:
    """Start a fresh metrics file, or trim an existing one to rows at or before ``keep_through``."""
    rows = []
    if keep_through > 0 and path.exists():
        with open(path, newline="") as fh:
            rows = [r for r in csv.reader(fh)][1:]
        rows = [r for r in rows if r and int(r[0]) <= keep_through]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def checkpoint_name(step: int) -> str:
    return f"step_{step:06d}.irlm"


def train(
    config: TrainConfig,
    model_config: ModelConfig,
    sequences: Sequence[Sequence[int]],
    out_dir,
    resume_from=None,
    evaluator: Optional[Callable[[Model], dict]] = None,
    stop_after: Optional[int] = None,
) -> TrainResult:
    """Run ``config.total_steps`` updates, writing per-step metrics and checkpoints under ``out_dir``.

    ``resume_from`` continues from a saved checkpoint; since every random
    stream is keyed by (seed, step) the continuation matches an
    uninterrupted run exactly. ``stop_after`` ends the run early, as if it
    had been interrupted right after that step's checkpoint.
    """
    out = Path(out_dir)
    ckpt_dir = out / "checkpoints"
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    metrics_path = out / "metrics.csv"
    eval_path = out / "eval.csv"

    if resume_from is not None:
        model, adam, state = load_checkpoint(resume_from)
        if adam is None or state is None:
            raise ValueError(f"{resume_from} holds no optimizer/training state; cannot resume")
        start = int(state["step"])
        wall_offset = float(state.get("wall_time", 0.0))
        log.info("resuming from %s at step %d", resume_from, start)
    else:
        model = init_model(replace(model_config, precision=config.precision), np.random.default_rng(model_config.seed))
        adam = new_optimizer(model, config)
        start, wall_offset = 0, 0.0
    _prepare_metrics(metrics_path, METRICS_HEADER, start)
    if evaluator is not None and config.eval_interval > 0:
        _prepare_metrics(eval_path, EVAL_HEADER, start)

    usable = [s for s in sequences if maskable_positions(s)]
    if len(usable) < len(sequences):
        log.warning("skipping %d sequences with no maskable token", len(sequences) - len(usable))
    schedule = BatchSchedule(usable, config.batch_size, config.seed)
    history: list[LossBreakdown] = []
    last = start
    end = config.total_steps if stop_after is None else min(stop_after, config.total_steps)
    t0 = time.perf_counter()
    with open(metrics_path, "a", newline="") as mfh:
        writer = csv.writer(mfh, lineterminator="\n")
        for step in range(start + 1, end + 1):
            bd = train_step(model, schedule(step), config, step, adam)
            bd.wall_time = wall_offset + time.perf_counter() - t0
            row = bd.row()
            writer.writerow([_fmt(row[k]) for k in METRICS_HEADER])
            history.append(bd)
            last = step
            if evaluator is not None and config.eval_interval > 0 and step % config.eval_interval == 0:
                metrics = evaluator(model)
                with open(eval_path, "a", newline="") as efh:
                    csv.writer(efh, lineterminator="\n").writerow(
                        [step, _fmt(metrics["mlm_loss"]), _fmt(metrics["mlm_acc"])]
                    )
            due = config.checkpoint_interval > 0 and step % config.checkpoint_interval == 0
            if due or step == end:
                mfh.flush()
                state = {"step": step, "seed": config.seed, "wall_time": bd.wall_time}
                save_checkpoint(ckpt_dir / checkpoint_name(step), model, adam, state)
    final = ckpt_dir / checkpoint_name(last)
    if last == start and resume_from is not None:
        final = Path(resume_from)
    return TrainResult(model, final, metrics_path, history)


def read_metrics(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))
