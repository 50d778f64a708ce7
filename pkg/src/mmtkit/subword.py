"""Joint byte-pair encoding and per-side vocabularies.

Merges are learned greedily on the combined source+target token stream:
each word is a symbol sequence whose final character carries an
end-of-word marker, and the most frequent adjacent symbol pair is merged
until the merge budget is exhausted or no pair occurs twice.  Ties break
lexicographically on (left, right) so learning is byte-deterministic.

Applied output uses the "@@" continuation suffix on non-final subword
units; decoding strips the markers and re-joins the pieces.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Sequence

WORD_END = "</w>"
CONT_MARKER = "@@"

PAD, UNK, BOS, EOS = "<pad>", "<unk>", "<s>", "</s>"
RESERVED = (PAD, UNK, BOS, EOS)
PAD_ID, UNK_ID, BOS_ID, EOS_ID = 0, 1, 2, 3

MODEL_HEADER = "#mmt-bpe v1"


@dataclass(frozen=True)
class MergeRule:
    left: str
    right: str
    rank: int


@dataclass
class BpeModel:
    merges: list[MergeRule]
    n_merges: int

    def __post_init__(self):
        if len(self.merges) > self.n_merges:
            raise ValueError("more merges than the learning budget")
        seen = set()
        for i, rule in enumerate(self.merges):
            if rule.rank != i:
                raise ValueError("merge ranks must be contiguous from 0")
            if (rule.left, rule.right) in seen:
                raise ValueError(f"duplicate merge pair {rule.left!r} {rule.right!r}")
            seen.add((rule.left, rule.right))

    def rank_of(self) -> dict[tuple[str, str], int]:
        return {(r.left, r.right): r.rank for r in self.merges}


def _word_symbols(word: str) -> tuple[str, ...]:
    """A word as its character sequence with the final char marked word-final."""
    chars = list(word)
    chars[-1] = chars[-1] + WORD_END
    return tuple(chars)


def learn_bpe(corpora: Iterable[Sequence[str]], n_merges: int) -> BpeModel:
    """Learn merge rules by greedy most-frequent-pair counting.

    `corpora` is any stream of token lists (typically source and target
    sentences concatenated).  Stops at `n_merges` or when the best pair
    occurs fewer than 2 times.
    """
    if n_merges < 0:
        raise ValueError("n_merges must be nonnegative")
    word_freq = Counter()
    for tokens in corpora:
        word_freq.update(tokens)

    words = {w: _word_symbols(w) for w in word_freq}

    merges: list[MergeRule] = []
    for rank in range(n_merges):
        pair_freq = Counter()
        for w, sym in words.items():
            f = word_freq[w]
            for a, b in zip(sym, sym[1:]):
                pair_freq[(a, b)] += f
        if not pair_freq:
            break
        best = min(pair_freq.items(), key=lambda kv: (-kv[1], kv[0]))
        (left, right), freq = best
        if freq < 2:
            break
        merges.append(MergeRule(left=left, right=right, rank=rank))
        merged = left + right
        for w, sym in words.items():
            if left not in sym:
                continue
            out = []
            i = 0
            while i < len(sym):
                if i + 1 < len(sym) and sym[i] == left and sym[i + 1] == right:
                    out.append(merged)
                    i += 2
                else:
                    out.append(sym[i])
                    i += 1
            words[w] = tuple(out)
    return BpeModel(merges=merges, n_merges=n_merges)


def _encode_word(word: str, rank: dict[tuple[str, str], int]) -> list[str]:
    sym = list(_word_symbols(word))
    while len(sym) > 1:
        pairs = [(a, b) for a, b in zip(sym, sym[1:])]
        ranked = [(rank[p], i) for i, p in enumerate(pairs) if p in rank]
        if not ranked:
            break
        best_rank = min(r for r, _ in ranked)
        out = []
        i = 0
        while i < len(sym):
            if (
                i + 1 < len(sym)
                and rank.get((sym[i], sym[i + 1])) == best_rank
            ):
                out.append(sym[i] + sym[i + 1])
                i += 2
            else:
                out.append(sym[i])
                i += 1
        sym = out
    # Strip the end-of-word marker and add continuation suffixes.
    if sym[-1].endswith(WORD_END):
        sym[-1] = sym[-1][: -len(WORD_END)]
    pieces = [s + CONT_MARKER for s in sym[:-1]]
    pieces.append(sym[-1])
    return pieces


class _WordCache(dict):
    def __init__(self, rank):
        super().__init__()
        self._rank = rank

    def __missing__(self, word):
        pieces = _encode_word(word, self._rank)
        self[word] = pieces
        return pieces


def bpe_encoder(model: BpeModel):
    """A callable token-list encoder with per-word memoization."""
    cache = _WordCache(model.rank_of())
    def encode(tokens: Sequence[str]) -> list[str]:
        out: list[str] = []
        for tok in tokens:
            out.extend(cache[tok])
        return out
    return encode


def apply_bpe(model: BpeModel, tokens: Sequence[str]) -> list[str]:
    """Segment normalized tokens into subword units.

    Merges apply in rank order within each word; non-final units carry
    the "@@" suffix.  Merging the lowest-ranked pair present repeatedly
    is equivalent, since a merge can only create pairs of higher rank.
    """
    return bpe_encoder(model)(tokens)


def decode_bpe(subwords: Sequence[str]) -> list[str]:
    """Re-join "@@"-suffixed runs; inverse of apply_bpe on its image."""
    out: list[str] = []
    buf = ""
    for piece in subwords:
        if piece.endswith(CONT_MARKER):
            buf += piece[: -len(CONT_MARKER)]
        else:
            out.append(buf + piece)
            buf = ""
    if buf:
        # Trailing continuation with no final piece; emit what we have.
        out.append(buf)
    return out


def save_bpe_model(path, model: BpeModel) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fp:
        fp.write(MODEL_HEADER + "\n")
        for rule in model.merges:
            fp.write(f"{rule.left} {rule.right}\n")


def load_bpe_model(path) -> BpeModel:
    with open(path, encoding="utf-8") as fp:
        header = fp.readline().rstrip("\n")
        if header != MODEL_HEADER:
            raise ValueError(f"{path}: bad BPE model header {header!r}")
        merges = []
        for rank, line in enumerate(fp):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split(" ")
            if len(parts) != 2:
                raise ValueError(f"{path}: malformed merge line {rank + 2}: {line!r}")
            merges.append(MergeRule(left=parts[0], right=parts[1], rank=rank))
    return BpeModel(merges=merges, n_merges=len(merges))


@dataclass
class Vocabulary:
    """Token<->id maps with the four reserved ids fixed at 0..3."""

    token_to_id: dict[str, int] = field(default_factory=dict)
    id_to_token: list[str] = field(default_factory=list)

    @classmethod
    def from_tokens(cls, tokens: list[str]) -> "Vocabulary":
        vocab = cls()
        vocab.id_to_token = list(RESERVED) + tokens
        vocab.token_to_id = {t: i for i, t in enumerate(vocab.id_to_token)}
        if len(vocab.token_to_id) != len(vocab.id_to_token):
            raise ValueError("duplicate tokens in vocabulary")
        return vocab

    def __len__(self) -> int:
        return len(self.id_to_token)

    def id_of(self, token: str) -> int:
        return self.token_to_id.get(token, UNK_ID)

    def encode(self, tokens: Sequence[str]) -> list[int]:
        return [self.token_to_id.get(t, UNK_ID) for t in tokens]

    def decode(self, ids: Sequence[int]) -> list[str]:
        return [self.id_to_token[i] for i in ids]


def build_vocab(encoded_corpus: Iterable[Sequence[str]]) -> Vocabulary:
    """Vocabulary over one side of an already BPE-encoded corpus.

    Non-reserved ids are assigned by descending frequency, ties broken
    lexicographically.
    """
    freq = Counter()
    for sent in encoded_corpus:
        freq.update(sent)
    for tok in RESERVED:
        freq.pop(tok, None)
    ordered = sorted(freq.items(), key=lambda kv: (-kv[1], kv[0]))
    return Vocabulary.from_tokens([t for t, _ in ordered])


def save_vocab(path, vocab: Vocabulary) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fp:
        for i, tok in enumerate(vocab.id_to_token):
            fp.write(f"{tok}\t{i}\n")


def load_vocab(path) -> Vocabulary:
    vocab = Vocabulary()
    with open(path, encoding="utf-8") as fp:
        for lineno, line in enumerate(fp, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise ValueError(f"{path}: malformed vocab line {lineno}: {line!r}")
            tok, idx = parts[0], int(parts[1])
            if idx != len(vocab.id_to_token):
                raise ValueError(f"{path}: vocab ids must be contiguous, line {lineno}")
            vocab.id_to_token.append(tok)
            vocab.token_to_id[tok] = idx
    if vocab.id_to_token[: len(RESERVED)] != list(RESERVED):
        raise ValueError(f"{path}: reserved tokens missing or out of order")
    return vocab
