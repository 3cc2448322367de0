"""Pre-norm transformer encoder with a tied MLM head."""

from __future__ import annotations

import json
import os
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from . import tensor as T
from .optim import AdamState
from .tensor import ShapeError, Tensor
from .text import N_SPECIAL

PROVENANCES = ("corrupted", "original", "filled")


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 2
    n_heads: int = 2
    d_model: int = 32
    d_ff: int = 64
    vocab_size: int = 8192
    max_len: int = 128
    dropout_rate: float = 0.1
    seed: int = 0
    precision: str = "double"

    def validate(self) -> None:
        problems = []
        for name in ("n_layers", "n_heads", "d_model", "d_ff", "vocab_size", "max_len"):
            if getattr(self, name) < 1:
                problems.append(f"{name} must be >= 1 (got {getattr(self, name)})")
        if self.n_heads >= 1 and self.d_model % self.n_heads:
            problems.append(f"d_model ({self.d_model}) must be divisible by n_heads ({self.n_heads})")
        if not 0.0 <= self.dropout_rate < 1.0:
            problems.append(f"dropout_rate must lie in [0, 1) (got {self.dropout_rate})")
        if self.max_len < 2:
            problems.append("max_len must be >= 2")
        try:
            T._as_dtype(self.precision)
        except ValueError as exc:
            problems.append(str(exc))
        if problems:
            raise ValueError("invalid ModelConfig: " + "; ".join(problems))

    @property
    def dtype(self):
        return T._as_dtype(self.precision)


@dataclass
class HiddenStates:
    """Last-layer outputs for a padded batch, tagged with the input that produced them."""

    values: Tensor  # (batch, length, d_model)
    attention_mask: np.ndarray
    provenance: str

    def __post_init__(self):
        if self.provenance not in PROVENANCES:
            raise ValueError(f"provenance must be one of {PROVENANCES}, got {self.provenance!r}")

    def rows(self, i: int) -> np.ndarray:
        """Hidden matrix of sequence ``i`` restricted to its true length."""
        n = int(self.attention_mask[i].sum())
        return self.values.data[i, :n]


class Model:
    def __init__(self, config: ModelConfig, params: dict[str, Tensor]):
        self.config = config
        self.params = params

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def num_parameters(self) -> int:
        return sum(p.size for p in self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def no_decay_names(self) -> frozenset:
        return frozenset(n for n in self.params if n.endswith((".bias", ".gain")) or n == "mlm_bias")


def param_shapes(config: ModelConfig) -> dict[str, tuple]:
    d, f = config.d_model, config.d_ff
    shapes = {"tok_emb": (config.vocab_size, d), "pos_emb": (config.max_len, d)}
    for i in range(config.n_layers):
        p = f"layers.{i}."
        shapes.update({
            p + "ln1.gain": (d,), p + "ln1.bias": (d,),
            p + "qkv.weight": (d, 3 * d), p + "qkv.bias": (3 * d,),
            p + "out.weight": (d, d), p + "out.bias": (d,),
            p + "ln2.gain": (d,), p + "ln2.bias": (d,),
            p + "ff1.weight": (d, f), p + "ff1.bias": (f,),
            p + "ff2.weight": (f, d), p + "ff2.bias": (d,),
        })
    shapes.update({"ln_f.gain": (d,), "ln_f.bias": (d,), "mlm_bias": (config.vocab_size,)})
    return shapes


def init_model(config: ModelConfig, rng: Optional[np.random.Generator] = None) -> Model:
    """Weights ~ N(0, 0.02^2), biases zero, norm gains one."""
    config.validate()
    rng = rng if rng is not None else np.random.default_rng(config.seed)
    dtype = config.dtype
    params = {}
    for name, shape in param_shapes(config).items():
        if name.endswith(".gain"):
            data = np.ones(shape)
        elif name.endswith(".bias") or name == "mlm_bias":
            data = np.zeros(shape)
        else:
            data = rng.normal(0.0, 0.02, size=shape)
        params[name] = Tensor(data.astype(dtype), requires_grad=True, name=name)
    return Model(config, params)


def _attention(model: Model, x: Tensor, prefix: str, key_bias: np.ndarray, attn_log: Optional[list]) -> Tensor:
    B, L, D = x.shape
    H = model.config.n_heads
    dh = D // H
    p = model.params
    qkv = x @ p[prefix + "qkv.weight"] + p[prefix + "qkv.bias"]
    qkv = qkv.reshape(B, L, 3, H, dh).transpose(2, 0, 3, 1, 4)  # (3, B, H, L, dh)
    q, k, v = qkv[0], qkv[1], qkv[2]
    scores = (q @ T.swapaxes(k, -1, -2)) * (1.0 / np.sqrt(dh)) + key_bias
    probs = T.softmax(scores, axis=-1)
    if attn_log is not None:
        attn_log.append(probs.data)
    ctx = (probs @ v).transpose(0, 2, 1, 3).reshape(B, L, D)
    return ctx @ p[prefix + "out.weight"] + p[prefix + "out.bias"]


def forward(
    model: Model,
    ids: np.ndarray,
    attention_mask: np.ndarray,
    train_mode: bool = False,
    rng: Optional[np.random.Generator] = None,
    provenance: str = "corrupted",
    attn_log: Optional[list] = None,
) -> HiddenStates:
    """Encode a padded id matrix. Dropout runs only when ``train_mode`` and an ``rng`` is given."""
    cfg = model.config
    ids = np.asarray(ids, dtype=np.int64)
    attention_mask = np.asarray(attention_mask)
    if ids.ndim != 2:
        raise ShapeError(f"forward expects a (batch, length) id matrix, got shape {ids.shape}")
    B, L = ids.shape
    if L > cfg.max_len:
        raise ShapeError(f"sequence length {L} exceeds max_len {cfg.max_len}")
    if ids.size and (ids.min() < 0 or ids.max() >= cfg.vocab_size):
        raise ShapeError(f"token ids must lie in [0, {cfg.vocab_size})")
    rate = cfg.dropout_rate if train_mode else 0.0
    drng = rng if train_mode else None
    p = model.params

    x = T.embedding(p["tok_emb"], ids) + p["pos_emb"][:L]
    x = T.dropout(x, rate, drng)
    key_bias = np.where(attention_mask.astype(bool), 0.0, -np.inf).astype(cfg.dtype)[:, None, None, :]
    for i in range(cfg.n_layers):
        pre = f"layers.{i}."
        a = T.layer_norm(x, p[pre + "ln1.gain"], p[pre + "ln1.bias"])
        x = x + T.dropout(_attention(model, a, pre, key_bias, attn_log), rate, drng)
        f = T.layer_norm(x, p[pre + "ln2.gain"], p[pre + "ln2.bias"])
        hdn = T.gelu(f @ p[pre + "ff1.weight"] + p[pre + "ff1.bias"])
        x = x + T.dropout(hdn @ p[pre + "ff2.weight"] + p[pre + "ff2.bias"], rate, drng)
    x = T.layer_norm(x, p["ln_f.gain"], p["ln_f.bias"])
    return HiddenStates(x, attention_mask, provenance)


def mlm_logits(model: Model, hidden: HiddenStates) -> Tensor:
    h = hidden.values
    if h.shape[-1] != model.config.d_model:
        raise ShapeError(f"hidden width {h.shape[-1]} != d_model {model.config.d_model}")
    return h @ model.params["tok_emb"].T + model.params["mlm_bias"]


def predict_masked(logits, masked_positions, exclude_special: bool = True) -> list[int]:
    """Argmax token at each masked position of one sequence; ties go to the lowest id.

    ``logits`` is the ``(length, V)`` logit matrix of that sequence. Special
    ids are skipped by default since no label is ever special.
    """
    data = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    rows = np.array(data[list(masked_positions)], dtype=np.float64).reshape(len(masked_positions), -1)
    if exclude_special and rows.shape[1] > N_SPECIAL:
        rows[:, :N_SPECIAL] = -np.inf
    return [int(i) for i in np.argmax(rows, axis=1)]


# -- checkpoints --------------------------------------------------------------

MAGIC = b"IRLM0001"
FORMAT_VERSION = 1
_DTYPE_CODES = {np.dtype("<f4"): 0, np.dtype("<f8"): 1, np.dtype("<i8"): 2}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}


def _write_array(fh, name: str, arr: np.ndarray) -> None:
    arr = np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<"))
    raw_name = name.encode("utf-8")
    fh.write(struct.pack("<I", len(raw_name)))
    fh.write(raw_name)
    fh.write(struct.pack("<BI", _DTYPE_CODES[arr.dtype], arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
    fh.write(arr.tobytes())


def _read_exact(fh, n: int) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise ValueError("checkpoint truncated")
    return buf


def _read_array(fh) -> tuple[str, np.ndarray]:
    (n,) = struct.unpack("<I", _read_exact(fh, 4))
    name = _read_exact(fh, n).decode("utf-8")
    code, rank = struct.unpack("<BI", _read_exact(fh, 5))
    shape = struct.unpack(f"<{rank}Q", _read_exact(fh, 8 * rank))
    dtype = _CODE_DTYPES[code]
    count = int(np.prod(shape)) if rank else 1
    arr = np.frombuffer(_read_exact(fh, count * dtype.itemsize), dtype=dtype).reshape(shape)
    return name, arr.astype(dtype.newbyteorder("="))


def _write_json(fh, obj) -> None:
    raw = json.dumps(obj, sort_keys=True).encode("utf-8")
    fh.write(struct.pack("<I", len(raw)))
    fh.write(raw)


def _read_json(fh):
    (n,) = struct.unpack("<I", _read_exact(fh, 4))
    return json.loads(_read_exact(fh, n).decode("utf-8"))


def save_checkpoint(path, model: Model, adam: Optional[AdamState] = None, train_state: Optional[dict] = None) -> None:
    """Write atomically: a crash mid-write leaves any previous file at ``path`` intact."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", FORMAT_VERSION))
        _write_json(fh, asdict(model.config))
        fh.write(struct.pack("<I", len(model.params)))
        for name, p in model.params.items():
            _write_array(fh, name, p.data)
        fh.write(struct.pack("<B", int(adam is not None)))
        if adam is not None:
            _write_json(fh, {
                "lr": adam.lr, "beta1": adam.beta1, "beta2": adam.beta2, "eps": adam.eps,
                "weight_decay": adam.weight_decay, "step": adam.step, "no_decay": sorted(adam.no_decay),
            })
            fh.write(struct.pack("<I", len(adam.m)))
            for name in adam.m:
                _write_array(fh, name, adam.m[name])
                _write_array(fh, name, adam.v[name])
        fh.write(struct.pack("<B", int(train_state is not None)))
        if train_state is not None:
            _write_json(fh, train_state)
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)


def load_checkpoint(path) -> tuple[Model, Optional[AdamState], Optional[dict]]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    with open(path, "rb") as fh:
        if fh.read(len(MAGIC)) != MAGIC:
            raise ValueError(f"{path}: not an IRLM checkpoint")
        (version,) = struct.unpack("<I", _read_exact(fh, 4))
        if version != FORMAT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        config = ModelConfig(**_read_json(fh))
        (n,) = struct.unpack("<I", _read_exact(fh, 4))
        params = {}
        for _ in range(n):
            name, arr = _read_array(fh)
            params[name] = Tensor(arr.copy(), requires_grad=True, name=name)
        adam = None
        if struct.unpack("<B", _read_exact(fh, 1))[0]:
            hyper = _read_json(fh)
            hyper["no_decay"] = frozenset(hyper["no_decay"])
            adam = AdamState(**hyper)
            (k,) = struct.unpack("<I", _read_exact(fh, 4))
            for _ in range(k):
                name, m = _read_array(fh)
                _, v = _read_array(fh)
                adam.m[name], adam.v[name] = m.copy(), v.copy()
        train_state = _read_json(fh) if struct.unpack("<B", _read_exact(fh, 1))[0] else None
    return Model(config, params), adam, train_state
