"""Beam-search decoding and two-model hypothesis selection.

The beam core is written against a minimal stepper interface (`start`
and `step`) so it can be driven by hand-built toy distributions as well
as the real network.  Each iteration expands every live hypothesis over
the full vocabulary, keeps the top `beam_width` extensions by summed
log-probability, and moves extensions ending in </s> to a completed
pool.  Hypotheses still alive at the length limit get </s> forced, with
its log-probability included.  Scores are raw log-likelihoods with no
length normalization by default; ranking ties break deterministically
by parent index then token id.

Selection across two models follows: drop every hypothesis containing
<unk>, then take the best log-likelihood from the merged n-best lists;
if that filter empties the pool, fall back to the overall best.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Protocol, Sequence

import numpy as np

from . import subword
from .autodiff import Tensor
from .corpus import normalize_text
from .model import ModelConfig, decode_step, encode, init_decoder_state, prepare_decoder
from .subword import BpeModel, Vocabulary, apply_bpe, decode_bpe


@dataclass
class Hypothesis:
    """Surface token ids (no <s>, no </s>) and their summed log-probability."""

    tokens: list[int]
    log_likelihood: float
    finished: bool


class Stepper(Protocol):
    def start(self): ...

    def step(self, state, prev_id: int) -> tuple[np.ndarray, object]:
        """Returns (log-probabilities over the vocabulary, next state)."""


@dataclass
class _Live:
    score: float
    tokens: tuple[int, ...]
    state: object


def beam_search_core(stepper: Stepper, beam_width: int = 5, max_len: int = 50,
                     bos_id: int = subword.BOS_ID, eos_id: int = subword.EOS_ID,
                     ) -> list[Hypothesis]:
    """N-best decode of one sequence; result sorted by log-likelihood."""
    if beam_width < 1:
        raise ValueError(f"beam_width must be >= 1, got {beam_width}")
    if max_len < 1:
        raise ValueError(f"max_len must be >= 1, got {max_len}")
    live = [_Live(0.0, (), stepper.start())]
    completed: list[Hypothesis] = []
    for _ in range(max_len):
        candidates: list[tuple[float, int, int]] = []
        stepped = []
        for idx, hyp in enumerate(live):
            prev = hyp.tokens[-1] if hyp.tokens else bos_id
            logp, new_state = stepper.step(hyp.state, prev)
            stepped.append(new_state)
            score = hyp.score
            for tok, lp in enumerate(logp):
                candidates.append((score + float(lp), idx, tok))
        candidates.sort(key=lambda c: (-c[0], c[1], c[2]))
        next_live = []
        for score, idx, tok in candidates[:beam_width]:
            if tok == eos_id:
                completed.append(Hypothesis(list(live[idx].tokens), score, True))
            else:
                next_live.append(_Live(score, live[idx].tokens + (tok,), stepped[idx]))
        live = next_live
        if not live:
            break
    for hyp in live:
        prev = hyp.tokens[-1] if hyp.tokens else bos_id
        logp, _ = stepper.step(hyp.state, prev)
        completed.append(Hypothesis(list(hyp.tokens), hyp.score + float(logp[eos_id]), True))
    completed.sort(key=lambda h: -h.log_likelihood)
    return completed[:beam_width]


def score_sequence(stepper: Stepper, tokens: Sequence[int],
                   bos_id: int = subword.BOS_ID, eos_id: int = subword.EOS_ID) -> float:
    """Fresh-forward log-likelihood of tokens followed by </s>."""
    state = stepper.start()
    prev = bos_id
    total = 0.0
    for tok in list(tokens) + [eos_id]:
        logp, state = stepper.step(state, prev)
        total += float(logp[tok])
        prev = tok
    return total


class ModelStepper:
    """Drives the network for one source sentence, batch size 1."""

    def __init__(self, params: dict[str, Tensor], cfg: ModelConfig,
                 src_ids: Sequence[int], visual: np.ndarray | None = None):
        if not src_ids:
            raise ValueError("empty source")
        self.params = params
        self.cfg = cfg
        column = np.asarray(src_ids, dtype=np.int64).reshape(-1, 1)
        enc = encode(params, cfg, column)
        if visual is None:
            visual = np.zeros((cfg.n_regions, cfg.visual_dim), dtype=np.float32)
        self.dec_ctx = prepare_decoder(params, cfg, enc, visual[None, :, :])
        self._initial = init_decoder_state(params, cfg, enc)

    def start(self):
        return self._initial

    def step(self, state, prev_id: int):
        logits, new_state, _, _ = decode_step(
            self.params, self.cfg, np.array([prev_id]), state, self.dec_ctx)
        z = logits.data[0].astype(np.float64)
        z = z - z.max()
        logp = z - np.log(np.exp(z).sum())
        return logp, new_state


def beam_search(params: dict[str, Tensor], cfg: ModelConfig, src_ids: Sequence[int],
                visual: np.ndarray | None = None, beam_width: int = 5,
                max_len: int = 50) -> list[Hypothesis]:
    """N-best translations of one id sequence under one model."""
    stepper = ModelStepper(params, cfg, src_ids, visual)
    return beam_search_core(stepper, beam_width, max_len)


def select_hypothesis(nbest_a: Sequence[Hypothesis], nbest_b: Sequence[Hypothesis],
                      unk_id: int = subword.UNK_ID,
                      score: Callable[[Hypothesis], float] | None = None) -> Hypothesis:
    """Best hypothesis across two n-best lists, <unk>-bearing ones filtered.

    Falls back to the unfiltered best when every candidate contains
    <unk>.  Ties prefer the first list.
    """
    pool = list(nbest_a) + list(nbest_b)
    if not pool:
        raise ValueError("both n-best lists are empty")
    if score is None:
        score = lambda h: h.log_likelihood
    clean = [h for h in pool if unk_id not in h.tokens]
    return max(clean or pool, key=score)


def translate_corpus(models: Sequence[tuple[dict[str, Tensor], ModelConfig]],
                     bpe_model: BpeModel, src_vocab: Vocabulary, tgt_vocab: Vocabulary,
                     src_lines: Sequence[str], store=None,
                     feature_keys: Sequence[str] | None = None,
                     beam_width: int = 5, max_len: int = 50,
                     length_normalize: bool = False,
                     ) -> tuple[list[str], list[tuple[int, str, float]]]:
    """Translate lines under one or two models; returns (lines, sidecar).

    Sidecar entries are (line index, chosen model A/B, log-likelihood).
    A line that normalizes to nothing passes through as an empty line.
    Multimodal decoding needs `store` plus one feature key per line;
    without a store the visual input is zero.
    """
    if not 1 <= len(models) <= 2:
        raise ValueError(f"need one or two models, got {len(models)}")
    for i, (_, cfg) in enumerate(models):
        if cfg.src_vocab != len(src_vocab.id_to_token):
            raise ValueError(
                f"model {i} expects source vocabulary of {cfg.src_vocab}, "
                f"file has {len(src_vocab.id_to_token)}")
        if cfg.tgt_vocab != len(tgt_vocab.id_to_token):
            raise ValueError(
                f"model {i} expects target vocabulary of {cfg.tgt_vocab}, "
                f"file has {len(tgt_vocab.id_to_token)}")
    if store is not None:
        if feature_keys is None or len(feature_keys) != len(src_lines):
            raise ValueError("multimodal translation needs one feature key per line")

    rank: Callable[[Hypothesis], float] | None = None
    if length_normalize:
        rank = lambda h: h.log_likelihood / max(len(h.tokens), 1)

    out_lines: list[str] = []
    sidecar: list[tuple[int, str, float]] = []
    for i, line in enumerate(src_lines):
        tokens = normalize_text(line)
        subwords = apply_bpe(bpe_model, tokens)
        ids = src_vocab.encode(subwords)
        if not ids:
            out_lines.append("")
            sidecar.append((i, "A", 0.0))
            continue
        visual = None
        if store is not None:
            key = feature_keys[i]
            if key not in store:
                raise ValueError(f"no features stored for id {key!r}")
            visual = store[key]
        nbests = [beam_search(params, cfg, ids, visual, beam_width, max_len)
                  for params, cfg in models]
        nbest_a = nbests[0]
        nbest_b = nbests[1] if len(nbests) == 2 else []
        chosen = select_hypothesis(nbest_a, nbest_b, subword.UNK_ID, rank)
        label = "A" if any(chosen is h for h in nbest_a) else "B"
        surface = decode_bpe(tgt_vocab.decode(chosen.tokens))
        out_lines.append(" ".join(surface))
        sidecar.append((i, label, chosen.log_likelihood))
    return out_lines, sidecar


def format_sidecar(entries: Sequence[tuple[int, str, float]]) -> str:
    return "\n".join(f"{i}\t{label}\t{ll:.6f}" for i, label, ll in entries)
