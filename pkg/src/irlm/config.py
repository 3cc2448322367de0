"""Flat ``key = value`` run configuration shared by every CLI command."""

from __future__ import annotations

import dataclasses
import typing
from dataclasses import dataclass, fields
from pathlib import Path

from .ennoise import EnnoiseConfig
from .evaluation import ProbeConfig
from .model import ModelConfig
from .regularizer import RegularizerConfig
from .trainer import TrainConfig


class ConfigError(ValueError):
    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("invalid configuration:\n" + "\n".join(f"  - {p}" for p in self.problems))


@dataclass
class RunConfig:
    # model
    n_layers: int = 2
    n_heads: int = 2
    d_model: int = 32
    d_ff: int = 64
    max_len: int = 32
    dropout_rate: float = 0.1
    # training
    total_steps: int = 2000
    batch_size: int = 16
    learning_rate: float = 1e-3
    warmup_fraction: float = 0.1
    seed: int = 0
    checkpoint_interval: int = 500
    eval_interval: int = 0
    weight_decay: float = 0.01
    clip_norm: float = 1.0
    precision: str = "double"
    # regularizer
    weight_ecp: float = 1.0
    weight_dpp: float = 1.0
    detach_original: bool = True
    detach_filled: bool = False
    eps_kl: float = 1e-8
    distance: str = "kl"
    swap_kl: bool = False
    positions: str = "all"
    # ennoising
    mask_ratio: float = 0.15
    p_mask: float = 0.8
    p_random: float = 0.1
    p_keep: float = 0.1
    dynamic_masking: bool = True
    # vocabulary
    min_frequency: int = 1
    max_vocab_size: int = 8192
    # evaluation
    eval_seed: int = 1234
    probe_mode: str = "frozen"
    probe_epochs: int = 30
    probe_lr: float = 1e-2
    probe_batch_size: int = 32
    swap_fraction: float = 1.0
    seeds: str = "0,1,2"
    n_jobs: int = 1
    # paths
    corpus: str = ""
    heldout: str = ""
    vocab: str = ""
    probe_data: str = ""
    synonyms: str = ""
    checkpoint: str = ""
    metrics: str = ""  # comma-separated name=path pairs
    step_grid: str = ""  # comma-separated steps
    out: str = "runs/default"

    # -- derived configs -------------------------------------------------
    def model_config(self, vocab_size: int) -> ModelConfig:
        return ModelConfig(
            n_layers=self.n_layers, n_heads=self.n_heads, d_model=self.d_model, d_ff=self.d_ff,
            vocab_size=vocab_size, max_len=self.max_len, dropout_rate=self.dropout_rate,
            seed=self.seed, precision=self.precision,
        )

    def regularizer_config(self) -> RegularizerConfig:
        return RegularizerConfig(
            weight_ecp=self.weight_ecp, weight_dpp=self.weight_dpp, detach_original=self.detach_original,
            detach_filled=self.detach_filled, eps_kl=self.eps_kl, distance=self.distance,
            swap_kl=self.swap_kl, positions=self.positions,
        )

    def ennoise_config(self) -> EnnoiseConfig:
        return EnnoiseConfig(
            mask_ratio=self.mask_ratio, p_mask=self.p_mask, p_random=self.p_random,
            p_keep=self.p_keep, seed=self.seed, dynamic=self.dynamic_masking,
        )

    def _train_fields(self) -> dict:
        return dict(
            total_steps=self.total_steps, batch_size=self.batch_size, learning_rate=self.learning_rate,
            warmup_fraction=self.warmup_fraction, seed=self.seed, checkpoint_interval=self.checkpoint_interval,
            eval_interval=self.eval_interval, weight_decay=self.weight_decay, clip_norm=self.clip_norm,
            precision=self.precision,
        )

    def train_config(self) -> TrainConfig:
        return TrainConfig(**self._train_fields(), regularizer=self.regularizer_config(), ennoise=self.ennoise_config())

    def probe_config(self) -> ProbeConfig:
        return ProbeConfig(
            mode=self.probe_mode, epochs=self.probe_epochs, lr=self.probe_lr,
            batch_size=self.probe_batch_size, seed=self.seed, max_len=self.max_len,
        )

    def seed_list(self) -> list[int]:
        return [int(s) for s in self.seeds.split(",") if s.strip()]

    def named_paths(self, value: str) -> dict[str, str]:
        out = {}
        for item in filter(None, (s.strip() for s in value.split(","))):
            name, sep, path = item.partition("=")
            if not sep:
                name, path = Path(item).parent.name or Path(item).stem, item
            out[name] = path
        return out

    def validate(self) -> None:
        """Raise :class:`ConfigError` listing every problem at once."""
        problems = []
        checks = [
            lambda: self.model_config(vocab_size=max(self.max_vocab_size, 6)).validate(),
            self.regularizer_config,
            self.ennoise_config,
            lambda: TrainConfig(**self._train_fields()),
            self.probe_config,
        ]
        for check in checks:
            try:
                check()
            except ValueError as exc:
                problems.append(str(exc))
        try:
            self.seed_list()
        except ValueError:
            problems.append(f"seeds must be a comma-separated list of integers, got {self.seeds!r}")
        if self.step_grid:
            try:
                [int(s) for s in self.step_grid.split(",") if s.strip()]
            except ValueError:
                problems.append(f"step_grid must be a comma-separated list of integers, got {self.step_grid!r}")
        if problems:
            raise ConfigError(problems)

    def dump(self) -> str:
        return "".join(f"{f.name} = {_render(getattr(self, f.name))}\n" for f in fields(self))


def _render(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v) if isinstance(v, float) else str(v)


_TYPES = typing.get_type_hints(RunConfig)


def _coerce(key: str, raw: str):
    kind = _TYPES[key]
    raw = raw.strip()
    if kind is bool:
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"{key}: expected a boolean, got {raw!r}")
    try:
        return kind(raw)
    except ValueError:
        raise ValueError(f"{key}: expected {kind.__name__}, got {raw!r}") from None


def parse_assignments(lines, origin: str) -> tuple[dict, list[str]]:
    values, problems = {}, []
    for n, line in enumerate(lines, 1):
        text = line.split("#", 1)[0].strip()
        if not text:
            continue
        key, sep, raw = text.partition("=")
        key = key.strip()
        if not sep:
            problems.append(f"{origin}:{n}: expected 'key = value', got {line.strip()!r}")
        elif key not in _TYPES:
            problems.append(f"{origin}:{n}: unknown key {key!r}")
        else:
            try:
                values[key] = _coerce(key, raw)
            except ValueError as exc:
                problems.append(f"{origin}:{n}: {exc}")
    return values, problems


def load_config(path=None, overrides: dict | None = None, assignments=()) -> RunConfig:
    """Built-in defaults, then the config file, then command-line values."""
    values, problems = {}, []
    if path:
        p = Path(path)
        if not p.exists():
            raise ConfigError([f"config file not found: {p}"])
        v, errs = parse_assignments(p.read_text(encoding="utf-8").splitlines(), str(p))
        values.update(v)
        problems += errs
    v, errs = parse_assignments(list(assignments), "--set")
    values.update(v)
    problems += errs
    for key, val in (overrides or {}).items():
        if val is not None:
            values[key] = val
    if problems:
        raise ConfigError(problems)
    cfg = dataclasses.replace(RunConfig(), **values)
    cfg.validate()
    return cfg
