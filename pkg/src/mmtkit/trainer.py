"""Adam training with validation-based checkpoint selection.

Two regimes share one loop: a text-only phase that feeds all-zero
visual matrices, and a multimodal phase that looks region features up
in a feature store.  Because parameter shapes do not depend on the
phase, the text-only best checkpoint loads directly as the starting
point for fine-tuning.

Per epoch the example order is reshuffled with a seeded generator,
stably sorted by source length so batches hold similar lengths, cut
into batches, and the batch order shuffled again.  The checkpoint with
the lowest validation perplexity (exp of mean token cross-entropy)
wins; ties keep the earlier epoch.  All randomness derives from the
config seed, so a rerun reproduces the loss trajectory and the final
checkpoint bytes exactly.
"""

from __future__ import annotations

import math
import struct
import time
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .model import ModelConfig, forward_loss, make_batch, param_shapes, zero_grads

MODES = ("pretrain", "finetune", "scratch")

CKPT_MAGIC = b"MMCK"
CKPT_VERSION = 1


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 40
    max_epochs: int = 25
    max_len: int = 50
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    dropout: float = 0.3
    seed: int = 1
    mode: str = "scratch"
    clip_norm: float | None = None

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.max_epochs < 1 or self.max_len < 1:
            raise ValueError("max_epochs and max_len must be >= 1")
        if not 0.0 < self.beta1 < 1.0 or not 0.0 < self.beta2 < 1.0:
            raise ValueError("beta1 and beta2 must lie in (0, 1)")
        if self.lr < 0.0 or self.eps <= 0.0:
            raise ValueError("lr must be >= 0 and eps > 0")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.clip_norm is not None and self.clip_norm <= 0.0:
            raise ValueError("clip_norm must be positive when set")

    def to_kv(self) -> dict[str, str]:
        kv = {
            "batch_size": str(self.batch_size),
            "max_epochs": str(self.max_epochs),
            "max_len": str(self.max_len),
            "lr": repr(self.lr),
            "beta1": repr(self.beta1),
            "beta2": repr(self.beta2),
            "eps": repr(self.eps),
            "dropout": repr(self.dropout),
            "seed": str(self.seed),
            "mode": self.mode,
        }
        if self.clip_norm is not None:
            kv["clip_norm"] = repr(self.clip_norm)
        return kv

    @classmethod
    def from_kv(cls, kv: dict[str, str]) -> "TrainConfig":
        return cls(
            batch_size=int(kv["batch_size"]),
            max_epochs=int(kv["max_epochs"]),
            max_len=int(kv["max_len"]),
            lr=float(kv["lr"]),
            beta1=float(kv["beta1"]),
            beta2=float(kv["beta2"]),
            eps=float(kv["eps"]),
            dropout=float(kv["dropout"]),
            seed=int(kv["seed"]),
            mode=kv["mode"],
            clip_norm=float(kv["clip_norm"]) if "clip_norm" in kv else None,
        )


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0

    @classmethod
    def fresh(cls, params: dict[str, Tensor]) -> "AdamState":
        return cls(m={k: np.zeros_like(p.data) for k, p in params.items()},
                   v={k: np.zeros_like(p.data) for k, p in params.items()})


def adam_step(params: dict[str, Tensor], state: AdamState, cfg: TrainConfig) -> None:
    """One update over all parameters; missing grads count as zero."""
    for name, p in params.items():
        g = p.grad
        if g is not None and not np.isfinite(g).all():
            raise FloatingPointError(f"non-finite gradient for parameter {name!r}")
    state.t += 1
    b1, b2 = cfg.beta1, cfg.beta2
    bc1 = 1.0 - b1 ** state.t
    bc2 = 1.0 - b2 ** state.t
    for name, p in params.items():
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        m = state.m[name] = b1 * state.m[name] + (1.0 - b1) * g
        v = state.v[name] = b2 * state.v[name] + (1.0 - b2) * (g * g)
        if cfg.lr == 0.0:
            # subtracting a signed zero could still flip -0.0 entries
            continue
        update = cfg.lr * (m / bc1) / (np.sqrt(v / bc2) + cfg.eps)
        p.data = (p.data - update).astype(p.data.dtype, copy=False)


def clip_gradients(params: dict[str, Tensor], max_norm: float) -> float:
    """Scale grads so the global L2 norm is at most max_norm; returns the norm."""
    total = 0.0
    for p in params.values():
        if p.grad is not None:
            total += float(np.sum(np.asarray(p.grad, dtype=np.float64) ** 2))
    norm = math.sqrt(total)
    if norm > max_norm:
        scale = max_norm / norm
        for p in params.values():
            if p.grad is not None:
                p.grad = (p.grad * scale).astype(p.grad.dtype, copy=False)
    return norm


@dataclass
class EncodedExample:
    """Id-mapped sentence pair, optionally keyed into a feature store."""

    src: list[int]
    tgt: list[int]
    feature_key: str | None = None


@dataclass
class Checkpoint:
    params: dict[str, np.ndarray]
    model_cfg: ModelConfig
    train_cfg: TrainConfig
    epoch: int
    valid_ppl: float


class CheckpointError(ValueError):
    """Checkpoint file cannot be used."""


class BadMagicError(CheckpointError):
    pass


class BadVersionError(CheckpointError):
    pass


class TruncatedError(CheckpointError):
    pass


class ShapeMismatchError(CheckpointError):
    pass


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    lines = [f"model.{k}={v}" for k, v in ckpt.model_cfg.to_kv().items()]
    lines += [f"train.{k}={v}" for k, v in ckpt.train_cfg.to_kv().items()]
    lines += [f"epoch={ckpt.epoch}", f"valid_ppl={ckpt.valid_ppl!r}"]
    config_blob = "\n".join(lines).encode("utf-8")
    with open(path, "wb") as fp:
        fp.write(CKPT_MAGIC)
        fp.write(struct.pack("<I", CKPT_VERSION))
        fp.write(struct.pack("<I", len(config_blob)))
        fp.write(config_blob)
        fp.write(struct.pack("<I", len(ckpt.params)))
        for name, arr in ckpt.params.items():
            raw = name.encode("utf-8")
            fp.write(struct.pack("<H", len(raw)))
            fp.write(raw)
            a = np.asarray(arr, dtype="<f4")
            fp.write(struct.pack("<B", a.ndim))
            fp.write(struct.pack(f"<{a.ndim}I", *a.shape))
            fp.write(a.tobytes(order="C"))


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fp:
        blob = fp.read()
    if blob[:4] != CKPT_MAGIC:
        raise BadMagicError(f"{path}: bad magic {blob[:4]!r}, expected {CKPT_MAGIC!r}")
    if len(blob) < 12:
        raise TruncatedError(f"{path}: truncated header")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != CKPT_VERSION:
        raise BadVersionError(f"{path}: unsupported version {version}")
    (config_len,) = struct.unpack_from("<I", blob, 8)
    offset = 12
    if offset + config_len + 4 > len(blob):
        raise TruncatedError(f"{path}: truncated config block")
    kv = {}
    for line in blob[offset : offset + config_len].decode("utf-8").splitlines():
        if line.strip():
            key, _, value = line.partition("=")
            kv[key] = value
    offset += config_len
    (n_params,) = struct.unpack_from("<I", blob, offset)
    offset += 4

    try:
        model_cfg = ModelConfig.from_kv(
            {k[len("model."):]: v for k, v in kv.items() if k.startswith("model.")})
        train_cfg = TrainConfig.from_kv(
            {k[len("train."):]: v for k, v in kv.items() if k.startswith("train.")})
        epoch = int(kv["epoch"])
        valid_ppl = float(kv["valid_ppl"])
    except (KeyError, ValueError) as exc:
        raise CheckpointError(f"{path}: bad config block ({exc})") from None

    params: dict[str, np.ndarray] = {}
    for _ in range(n_params):
        if offset + 2 > len(blob):
            raise TruncatedError(f"{path}: truncated at parameter {len(params)}")
        (name_len,) = struct.unpack_from("<H", blob, offset)
        offset += 2
        if offset + name_len + 1 > len(blob):
            raise TruncatedError(f"{path}: truncated at parameter {len(params)}")
        name = blob[offset : offset + name_len].decode("utf-8")
        offset += name_len
        (ndim,) = struct.unpack_from("<B", blob, offset)
        offset += 1
        if offset + 4 * ndim > len(blob):
            raise TruncatedError(f"{path}: truncated dims for {name!r}")
        dims = struct.unpack_from(f"<{ndim}I", blob, offset)
        offset += 4 * ndim
        count = int(np.prod(dims, dtype=np.int64)) if ndim else 1
        if offset + 4 * count > len(blob):
            raise TruncatedError(f"{path}: truncated payload for {name!r}")
        arr = np.frombuffer(blob, dtype="<f4", count=count, offset=offset).reshape(dims)
        offset += 4 * count
        params[name] = arr
    if offset != len(blob):
        raise CheckpointError(f"{path}: {len(blob) - offset} trailing bytes")

    expected = param_shapes(model_cfg)
    for name, shape in expected.items():
        if name not in params:
            raise ShapeMismatchError(f"{path}: missing parameter {name!r}")
        if params[name].shape != shape:
            raise ShapeMismatchError(
                f"{path}: parameter {name!r} has shape {params[name].shape}, "
                f"config implies {shape}")
    for name in params:
        if name not in expected:
            raise ShapeMismatchError(f"{path}: unexpected parameter {name!r}")
    return Checkpoint(params, model_cfg, train_cfg, epoch, valid_ppl)


def params_from_checkpoint(ckpt: Checkpoint) -> dict[str, Tensor]:
    return {name: Tensor(np.array(arr, dtype=np.float32), requires_grad=True)
            for name, arr in ckpt.params.items()}


def snapshot_params(params: dict[str, Tensor]) -> dict[str, np.ndarray]:
    return {name: np.array(p.data, copy=True) for name, p in params.items()}


@dataclass
class EpochStats:
    epoch: int
    train_loss: float
    valid_ppl: float
    time_s: float


def format_epoch(stats: EpochStats) -> str:
    return (f"epoch={stats.epoch} train_loss={stats.train_loss:.6f} "
            f"valid_ppl={stats.valid_ppl:.6f} time_s={stats.time_s:.2f}")


def _visuals_for(examples: list[EncodedExample], store) -> list[np.ndarray] | None:
    if store is None:
        return None
    out = []
    for ex in examples:
        if ex.feature_key is None:
            raise ValueError("multimodal mode but an example carries no feature key")
        if ex.feature_key not in store:
            raise ValueError(f"no features stored for id {ex.feature_key!r}")
        out.append(store[ex.feature_key])
    return out


def _length_drop(examples: list[EncodedExample], max_len: int) -> tuple[list[EncodedExample], int]:
    kept = [ex for ex in examples if len(ex.src) <= max_len and len(ex.tgt) <= max_len]
    return kept, len(examples) - len(kept)


def _batches(examples: list[EncodedExample], batch_size: int,
             rng: np.random.Generator | None) -> list[list[EncodedExample]]:
    order = np.arange(len(examples))
    if rng is not None:
        order = rng.permutation(len(examples))
    lengths = np.array([len(examples[i].src) for i in order])
    order = order[np.argsort(lengths, kind="stable")]
    chunks = [order[i : i + batch_size] for i in range(0, len(order), batch_size)]
    if rng is not None and len(chunks) > 1:
        chunk_order = rng.permutation(len(chunks))
        chunks = [chunks[i] for i in chunk_order]
    return [[examples[i] for i in chunk] for chunk in chunks]


def evaluate_ppl(params, model_cfg: ModelConfig, examples: list[EncodedExample],
                 store=None, batch_size: int = 40) -> float:
    """exp(mean token cross-entropy) in eval mode, deterministic order."""
    if not examples:
        raise ValueError("empty data")
    total_nll = 0.0
    total_tokens = 0.0
    for group in _batches(examples, batch_size, rng=None):
        batch = make_batch([(ex.src, ex.tgt) for ex in group], model_cfg,
                           _visuals_for(group, store))
        loss = forward_loss(params, model_cfg, batch, train=False)
        tokens = float(batch.tgt_mask.sum())
        total_nll += float(loss.data) * tokens
        total_tokens += tokens
    return math.exp(total_nll / total_tokens)


def train(train_cfg: TrainConfig, model_cfg: ModelConfig, params: dict[str, Tensor],
          train_data: list[EncodedExample], valid_data: list[EncodedExample],
          store=None, valid_store=None, log=None) -> tuple[Checkpoint, list[EpochStats]]:
    """Optimize params in place; returns (best checkpoint, per-epoch stats).

    `store` must be None in pretrain mode and a feature store in the
    multimodal modes; the text-only phase feeds zero visual matrices.
    Validation looks features up in `valid_store` when given (feature
    keys are per-split row indices), else in `store`.
    """
    if train_cfg.mode == "pretrain":
        if store is not None or valid_store is not None:
            raise ValueError("pretrain mode is text-only; drop the feature store")
    elif store is None:
        raise ValueError(f"{train_cfg.mode} mode needs a feature store")
    if valid_store is None:
        valid_store = store

    train_data, n_dropped = _length_drop(train_data, train_cfg.max_len)
    valid_data, _ = _length_drop(valid_data, train_cfg.max_len)
    if not train_data or not valid_data:
        raise ValueError("empty data")
    if log and n_dropped:
        log(f"dropped {n_dropped} training pairs over length {train_cfg.max_len}")

    rng_shuffle = ad.make_rng(train_cfg.seed, stream=1)
    rng_dropout = ad.make_rng(train_cfg.seed, stream=2)
    state = AdamState.fresh(params)
    best: Checkpoint | None = None
    history: list[EpochStats] = []

    for epoch in range(1, train_cfg.max_epochs + 1):
        started = time.monotonic()
        total_nll = 0.0
        total_tokens = 0.0
        for group in _batches(train_data, train_cfg.batch_size, rng_shuffle):
            batch = make_batch([(ex.src, ex.tgt) for ex in group], model_cfg,
                               _visuals_for(group, store))
            zero_grads(params)
            with Tape() as tape:
                loss = forward_loss(params, model_cfg, batch, train=True, rng=rng_dropout)
                tape.backward(loss)
            if train_cfg.clip_norm is not None:
                clip_gradients(params, train_cfg.clip_norm)
            adam_step(params, state, train_cfg)
            tokens = float(batch.tgt_mask.sum())
            total_nll += float(loss.data) * tokens
            total_tokens += tokens

        valid_ppl = evaluate_ppl(params, model_cfg, valid_data, valid_store,
                                 train_cfg.batch_size)
        stats = EpochStats(epoch, total_nll / total_tokens, valid_ppl,
                           time.monotonic() - started)
        history.append(stats)
        if log:
            log(format_epoch(stats))
        if best is None or valid_ppl < best.valid_ppl:
            best = Checkpoint(snapshot_params(params), model_cfg, train_cfg,
                              epoch, valid_ppl)
    return best, history
