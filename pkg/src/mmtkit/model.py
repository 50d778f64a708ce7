"""Bidirectional recurrent encoder with a doubly-attentive decoder.

The encoder runs stacked forward/backward GRUs over source embeddings
and concatenates the two directions into per-position annotations.  At
each target step the decoder attends twice with the same additive
mechanism: once over those annotations, once over the L spatial region
vectors of the image crop.  The GRU input is [embedding; text context;
visual context]; logits come from an affine layer over [top state; both
contexts; embedding].

Batches are carried time-major, shape (steps, batch, width), because the
autodiff layer only broadcasts over leading dims: per-step tensors of
shape (batch, width) combine with stacked (steps, batch, width) tensors
without any reshuffling.  Text-only training feeds an all-zero visual
matrix, so parameter shapes are identical across phases and a text-only
checkpoint loads directly into multimodal fine-tuning.

Dropout is applied to embeddings, between stacked recurrent layers, and
to the pre-output feature vector.  Parameters initialize uniform in
(-0.1, 0.1) from a seeded generator.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

NEG_INF = -1e9

GATE_NAMES = ("Wz", "Wr", "Wh", "Uz", "Ur", "Uh", "bz", "br", "bh")


@dataclass(frozen=True)
class ModelConfig:
    src_vocab: int
    tgt_vocab: int
    emb_size: int = 500
    hidden_size: int = 500
    n_layers: int = 2
    n_regions: int = 49
    visual_dim: int = 512
    dropout: float = 0.3

    def __post_init__(self):
        for name in ("src_vocab", "tgt_vocab", "emb_size", "hidden_size",
                     "n_layers", "n_regions", "visual_dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must be in [0, 1), got {self.dropout}")

    def to_kv(self) -> dict[str, str]:
        return {
            "src_vocab": str(self.src_vocab),
            "tgt_vocab": str(self.tgt_vocab),
            "emb_size": str(self.emb_size),
            "hidden_size": str(self.hidden_size),
            "n_layers": str(self.n_layers),
            "n_regions": str(self.n_regions),
            "visual_dim": str(self.visual_dim),
            "dropout": str(self.dropout),
        }

    @classmethod
    def from_kv(cls, kv: dict[str, str]) -> "ModelConfig":
        ints = {k: int(kv[k]) for k in ("src_vocab", "tgt_vocab", "emb_size",
                                        "hidden_size", "n_layers", "n_regions",
                                        "visual_dim")}
        return cls(dropout=float(kv["dropout"]), **ints)


def _gru_shapes(prefix: str, in_size: int, hidden: int) -> dict[str, tuple[int, ...]]:
    shapes = {}
    for gate in ("z", "r", "h"):
        shapes[f"{prefix}_W{gate}"] = (in_size, hidden)
        shapes[f"{prefix}_U{gate}"] = (hidden, hidden)
        shapes[f"{prefix}_b{gate}"] = (hidden,)
    return shapes


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Name -> shape for every trainable array, in a fixed order."""
    h, e = cfg.hidden_size, cfg.emb_size
    att = h
    shapes: dict[str, tuple[int, ...]] = {
        "src_emb": (cfg.src_vocab, e),
        "tgt_emb": (cfg.tgt_vocab, e),
    }
    for layer in range(cfg.n_layers):
        in_size = e if layer == 0 else 2 * h
        for direction in ("fwd", "bwd"):
            shapes.update(_gru_shapes(f"enc_{layer}_{direction}", in_size, h))
    for layer in range(cfg.n_layers):
        shapes[f"dec_init_{layer}_W"] = (2 * h, h)
        shapes[f"dec_init_{layer}_b"] = (h,)
    for layer in range(cfg.n_layers):
        in_size = e + 2 * h + cfg.visual_dim if layer == 0 else h
        shapes.update(_gru_shapes(f"dec_{layer}", in_size, h))
    for prefix, key_dim in (("att_txt", 2 * h), ("att_img", cfg.visual_dim)):
        shapes[f"{prefix}_Wq"] = (h, att)
        shapes[f"{prefix}_Wk"] = (key_dim, att)
        shapes[f"{prefix}_b"] = (att,)
        shapes[f"{prefix}_v"] = (att, 1)
    shapes["out_W"] = (h + 2 * h + cfg.visual_dim + e, cfg.tgt_vocab)
    shapes["out_b"] = (cfg.tgt_vocab,)
    return shapes


def init_params(cfg: ModelConfig, seed: int, dtype=np.float32) -> dict[str, Tensor]:
    rng = ad.make_rng(seed, stream=0)
    params = {}
    for name, shape in param_shapes(cfg).items():
        data = rng.uniform(-0.1, 0.1, size=shape).astype(dtype)
        params[name] = Tensor(data, requires_grad=True)
    return params


def zero_grads(params: dict[str, Tensor]) -> None:
    for p in params.values():
        p.zero_grad()


def _gru_step(params, prefix: str, x: Tensor, h: Tensor) -> Tensor:
    z = ad.sigmoid(ad.add(ad.add(ad.matmul(x, params[f"{prefix}_Wz"]),
                                 ad.matmul(h, params[f"{prefix}_Uz"])),
                          params[f"{prefix}_bz"]))
    r = ad.sigmoid(ad.add(ad.add(ad.matmul(x, params[f"{prefix}_Wr"]),
                                 ad.matmul(h, params[f"{prefix}_Ur"])),
                          params[f"{prefix}_br"]))
    cand = ad.tanh(ad.add(ad.add(ad.matmul(x, params[f"{prefix}_Wh"]),
                                 ad.matmul(ad.mul(r, h), params[f"{prefix}_Uh"])),
                          params[f"{prefix}_bh"]))
    return ad.add(ad.mul(ad.sub(1.0, z), h), ad.mul(z, cand))


def _masked(h_new: Tensor, h_prev: Tensor, keep: Tensor, drop: Tensor) -> Tensor:
    # keep/drop are full-shape (batch, hidden) 0/1 constants; padded rows carry
    # the previous state through unchanged.
    return ad.add(ad.mul(keep, h_new), ad.mul(drop, h_prev))


@dataclass
class EncoderAnnotations:
    """Per-position concat(fwd, bwd) states plus each direction's final state."""

    annotations: Tensor          # (src_len, batch, 2 * hidden)
    final_fwd: Tensor            # (batch, hidden)
    final_bwd: Tensor            # (batch, hidden)
    src_mask: np.ndarray         # (src_len, batch) 0/1 float


def encode(params, cfg: ModelConfig, src_ids: np.ndarray,
           src_mask: np.ndarray | None = None, train: bool = False,
           rng: np.random.Generator | None = None) -> EncoderAnnotations:
    """Run the stacked bidirectional encoder over an id matrix.

    `src_ids` is (src_len, batch) int; `src_mask` marks real tokens with
    1.0 and right-padding with 0.0 (all-ones when omitted).
    """
    src_ids = np.asarray(src_ids, dtype=np.int64)
    if src_ids.ndim != 2 or src_ids.shape[0] < 1:
        raise ValueError(f"src_ids must be (src_len, batch) with src_len >= 1, got {src_ids.shape}")
    steps, batch = src_ids.shape
    if src_mask is None:
        src_mask = np.ones((steps, batch), dtype=np.float32)
    dtype = params["src_emb"].dtype
    h = cfg.hidden_size

    keep = [Tensor(np.broadcast_to(src_mask[t][:, None], (batch, h)).astype(dtype))
            for t in range(steps)]
    drop_m = [Tensor(1.0 - k.data) for k in keep]

    inputs = [ad.dropout(ad.embedding_lookup(params["src_emb"], src_ids[t]),
                         cfg.dropout, train, rng)
              for t in range(steps)]

    final_fwd = final_bwd = None
    fwd = bwd = None
    for layer in range(cfg.n_layers):
        if layer > 0:
            inputs = [ad.dropout(ad.concat([fwd[t], bwd[t]], axis=1),
                                 cfg.dropout, train, rng)
                      for t in range(steps)]
        zero = Tensor(np.zeros((batch, h), dtype=dtype))
        fwd = [None] * steps
        state = zero
        for t in range(steps):
            state = _masked(_gru_step(params, f"enc_{layer}_fwd", inputs[t], state),
                            state, keep[t], drop_m[t])
            fwd[t] = state
        final_fwd = state
        bwd = [None] * steps
        state = zero
        for t in reversed(range(steps)):
            state = _masked(_gru_step(params, f"enc_{layer}_bwd", inputs[t], state),
                            state, keep[t], drop_m[t])
            bwd[t] = state
        final_bwd = state

    rows = [ad.reshape(ad.concat([fwd[t], bwd[t]], axis=1), (1, batch, 2 * h))
            for t in range(steps)]
    annotations = ad.concat(rows, axis=0) if steps > 1 else rows[0]
    return EncoderAnnotations(annotations, final_fwd, final_bwd, src_mask)


@dataclass
class AttentionContext:
    """Key-side work shared by every decoder step."""

    keys_tm: Tensor              # (positions, batch, key_dim)
    keys_bt: Tensor              # (batch, positions, key_dim)
    proj: Tensor                 # (positions, batch, att_dim), bias folded in
    score_mask: Tensor | None    # (positions, batch) additive 0 / NEG_INF


def prepare_attention(params, prefix: str, keys_tm: Tensor,
                      mask: np.ndarray | None = None) -> AttentionContext:
    proj = ad.add(ad.matmul(keys_tm, params[f"{prefix}_Wk"]), params[f"{prefix}_b"])
    score_mask = None
    if mask is not None and not mask.all():
        score_mask = Tensor(((1.0 - mask) * NEG_INF).astype(keys_tm.dtype))
    return AttentionContext(keys_tm, ad.transpose(keys_tm, (1, 0, 2)), proj, score_mask)


def attend_step(params, prefix: str, ctx: AttentionContext,
                query: Tensor) -> tuple[Tensor, Tensor]:
    positions, batch, key_dim = ctx.keys_tm.shape
    u = ad.tanh(ad.add(ctx.proj, ad.matmul(query, params[f"{prefix}_Wq"])))
    scores = ad.reshape(ad.matmul(u, params[f"{prefix}_v"]), (positions, batch))
    if ctx.score_mask is not None:
        scores = ad.add(scores, ctx.score_mask)
    weights = ad.softmax(ad.transpose(scores, (1, 0)))
    context = ad.reshape(
        ad.matmul(ad.reshape(weights, (batch, 1, positions)), ctx.keys_bt),
        (batch, key_dim))
    return context, weights


def attend(params, prefix: str, query: Tensor, keys_tm: Tensor,
           mask: np.ndarray | None = None) -> tuple[Tensor, Tensor]:
    """Additive attention: context vector and weights for one query.

    Convenience wrapper over prepare_attention + attend_step; loops
    should build the context once instead.
    """
    return attend_step(params, prefix, prepare_attention(params, prefix, keys_tm, mask), query)


@dataclass
class DecoderContext:
    """Everything fixed across the steps of one decode: encoder output,
    visual keys, and the per-attention cached projections."""

    txt: AttentionContext
    img: AttentionContext


def prepare_decoder(params, cfg: ModelConfig, enc: EncoderAnnotations,
                    visual: np.ndarray) -> DecoderContext:
    """`visual` is (batch, n_regions, visual_dim); zero for text-only."""
    visual = np.asarray(visual, dtype=params["src_emb"].dtype)
    batch = enc.src_mask.shape[1]
    expected = (batch, cfg.n_regions, cfg.visual_dim)
    if visual.shape != expected:
        raise ValueError(f"visual features shape {visual.shape}, expected {expected}")
    visual_tm = Tensor(np.ascontiguousarray(visual.transpose(1, 0, 2)))
    return DecoderContext(
        txt=prepare_attention(params, "att_txt", enc.annotations, enc.src_mask),
        img=prepare_attention(params, "att_img", visual_tm),
    )


def init_decoder_state(params, cfg: ModelConfig, enc: EncoderAnnotations) -> list[Tensor]:
    summary = ad.concat([enc.final_fwd, enc.final_bwd], axis=1)
    return [ad.tanh(ad.add(ad.matmul(summary, params[f"dec_init_{layer}_W"]),
                           params[f"dec_init_{layer}_b"]))
            for layer in range(cfg.n_layers)]


def decode_step(params, cfg: ModelConfig, prev_ids: np.ndarray,
                state: list[Tensor], dec_ctx: DecoderContext,
                train: bool = False, rng: np.random.Generator | None = None,
                ) -> tuple[Tensor, list[Tensor], Tensor, Tensor]:
    """One target step: returns (logits, new state, text weights, visual weights).

    The previous top-layer state is the attention query; both contexts
    feed the first GRU layer and the output layer.
    """
    emb = ad.dropout(ad.embedding_lookup(params["tgt_emb"], np.asarray(prev_ids, dtype=np.int64)),
                     cfg.dropout, train, rng)
    query = state[-1]
    txt_ctx, txt_w = attend_step(params, "att_txt", dec_ctx.txt, query)
    img_ctx, img_w = attend_step(params, "att_img", dec_ctx.img, query)

    new_state = []
    x = ad.concat([emb, txt_ctx, img_ctx], axis=1)
    for layer in range(cfg.n_layers):
        if layer > 0:
            x = ad.dropout(new_state[-1], cfg.dropout, train, rng)
        new_state.append(_gru_step(params, f"dec_{layer}", x, state[layer]))

    feat = ad.dropout(ad.concat([new_state[-1], txt_ctx, img_ctx, emb], axis=1),
                      cfg.dropout, train, rng)
    logits = ad.add(ad.matmul(feat, params["out_W"]), params["out_b"])
    return logits, new_state, txt_w, img_w


@dataclass
class Batch:
    """Padded id matrices for one training batch, time-major throughout.

    Target framing is teacher forcing: `tgt_in` rows start with <s>,
    `tgt_out` rows end with </s>, both right-padded with <pad> and
    `tgt_mask` zero over the padding.
    """

    src: np.ndarray              # (src_len, batch) int64
    src_mask: np.ndarray         # (src_len, batch) float32
    tgt_in: np.ndarray           # (tgt_len, batch) int64
    tgt_out: np.ndarray          # (tgt_len, batch) int64
    tgt_mask: np.ndarray         # (tgt_len, batch) float32
    visual: np.ndarray           # (batch, n_regions, visual_dim) float32

    @property
    def size(self) -> int:
        return self.src.shape[1]


def make_batch(pairs: list[tuple[list[int], list[int]]], cfg: ModelConfig,
               visuals: list[np.ndarray] | None = None,
               pad_id: int = 0, bos_id: int = 2, eos_id: int = 3) -> Batch:
    """Assemble right-padded matrices from (src ids, tgt ids) pairs.

    `visuals` is one (n_regions, visual_dim) matrix per pair, or None
    for the text-only phase (zero matrices).
    """
    if not pairs:
        raise ValueError("empty batch")
    batch = len(pairs)
    src_len = max(len(s) for s, _ in pairs)
    tgt_len = max(len(t) for _, t in pairs) + 1
    src = np.full((src_len, batch), pad_id, dtype=np.int64)
    src_mask = np.zeros((src_len, batch), dtype=np.float32)
    tgt_in = np.full((tgt_len, batch), pad_id, dtype=np.int64)
    tgt_out = np.full((tgt_len, batch), pad_id, dtype=np.int64)
    tgt_mask = np.zeros((tgt_len, batch), dtype=np.float32)
    for j, (s, t) in enumerate(pairs):
        if not s or not t:
            raise ValueError(f"batch pair {j} has an empty side")
        src[: len(s), j] = s
        src_mask[: len(s), j] = 1.0
        tgt_in[0, j] = bos_id
        tgt_in[1 : len(t) + 1, j] = t
        tgt_out[: len(t), j] = t
        tgt_out[len(t), j] = eos_id
        tgt_mask[: len(t) + 1, j] = 1.0
    if visuals is None:
        visual = np.zeros((batch, cfg.n_regions, cfg.visual_dim), dtype=np.float32)
    else:
        if len(visuals) != batch:
            raise ValueError(f"{len(visuals)} visual matrices for {batch} pairs")
        visual = np.stack([np.asarray(v, dtype=np.float32) for v in visuals])
    return Batch(src, src_mask, tgt_in, tgt_out, tgt_mask, visual)


def forward_loss(params, cfg: ModelConfig, batch: Batch, train: bool = False,
                 rng: np.random.Generator | None = None) -> Tensor:
    """Mean token cross-entropy over the batch's non-pad target positions."""
    if batch.size < 1:
        raise ValueError("empty batch")
    enc = encode(params, cfg, batch.src, batch.src_mask, train, rng)
    dec_ctx = prepare_decoder(params, cfg, enc, batch.visual)
    state = init_decoder_state(params, cfg, enc)
    tgt_len, n = batch.tgt_in.shape
    step_logits = []
    for t in range(tgt_len):
        logits, state, _, _ = decode_step(params, cfg, batch.tgt_in[t], state,
                                          dec_ctx, train, rng)
        step_logits.append(ad.reshape(logits, (1, n, cfg.tgt_vocab)))
    stacked = ad.concat(step_logits, axis=0) if tgt_len > 1 else step_logits[0]
    flat = ad.reshape(stacked, (tgt_len * n, cfg.tgt_vocab))
    return ad.cross_entropy(flat, batch.tgt_out.reshape(-1), batch.tgt_mask.reshape(-1))
