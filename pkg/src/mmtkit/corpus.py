"""Corpus ingestion and text normalization.

Handles the two corpus layouts the pipeline consumes:

- multimodal TSV: 7 tab-separated columns per line
  (image_id, x, y, w, h, english, hindi), no header;
- parallel text: either a 2-column TSV or two aligned plain-text files.

Text normalization is lowercase + punctuation splitting + whitespace
tokenization, applied identically at training and evaluation time.
"""

from __future__ import annotations

import unicodedata
from dataclasses import dataclass
from typing import Iterable, Sequence


class CorpusFormatError(ValueError):
    """A corpus file violates its declared layout."""


@dataclass(frozen=True)
class RegionBox:
    """Rectangular image region in pixel coordinates (left, top, width, height)."""

    x: int
    y: int
    w: int
    h: int

    def __post_init__(self):
        if self.w < 1 or self.h < 1:
            raise ValueError(f"region must have positive size, got w={self.w} h={self.h}")
        if self.x < 0 or self.y < 0:
            raise ValueError(f"region origin must be nonnegative, got x={self.x} y={self.y}")


@dataclass(frozen=True)
class RawExample:
    """One multimodal corpus row: an image region and its bilingual description."""

    image_id: str
    region: RegionBox
    src_text: str
    tgt_text: str


@dataclass(frozen=True)
class ParallelExample:
    """One text-only sentence pair."""

    src_text: str
    tgt_text: str


@dataclass(frozen=True)
class SplitStats:
    n_sentences: int
    avg_src_len: float
    avg_tgt_len: float


def _is_punct(ch: str) -> bool:
    return unicodedata.category(ch).startswith("P")


def normalize_text(s: str) -> list[str]:
    """Lowercase, split punctuation into standalone tokens, and tokenize.

    Every Unicode punctuation character (category P*) becomes its own
    token; everything else splits on whitespace.  Idempotent: normalizing
    a re-joined result changes nothing.
    """
    out: list[str] = []
    buf: list[str] = []
    for ch in s.lower():
        if ch.isspace():
            if buf:
                out.append("".join(buf))
                buf = []
        elif _is_punct(ch):
            if buf:
                out.append("".join(buf))
                buf = []
            out.append(ch)
        else:
            buf.append(ch)
    if buf:
        out.append("".join(buf))
    return out


def normalize_line(s: str) -> str:
    """Normalized text as a single space-joined string."""
    return " ".join(normalize_text(s))


def load_multimodal_tsv(path) -> list[RawExample]:
    """Load a 7-column multimodal TSV, normalizing both text columns.

    Line order is preserved.  Malformed lines (wrong field count,
    non-integer coordinates, non-positive region size, empty text after
    normalization) raise CorpusFormatError naming the 1-based line number.
    """
    examples: list[RawExample] = []
    with open(path, encoding="utf-8") as fp:
        for lineno, line in enumerate(fp, start=1):
            line = line.rstrip("\n")
            fields = line.split("\t")
            if len(fields) != 7:
                raise CorpusFormatError(
                    f"{path}: line {lineno}: expected 7 tab-separated fields, got {len(fields)}"
                )
            image_id, xs, ys, ws, hs, src, tgt = fields
            try:
                x, y, w, h = int(xs), int(ys), int(ws), int(hs)
            except ValueError:
                raise CorpusFormatError(
                    f"{path}: line {lineno}: non-integer region coordinates"
                ) from None
            if w <= 0 or h <= 0:
                raise CorpusFormatError(
                    f"{path}: line {lineno}: region must have positive size (w={w}, h={h})"
                )
            # Real Visual Genome boxes occasionally start off-image; shift the
            # origin to 0 and shrink accordingly rather than rejecting the row.
            if x < 0:
                w, x = w + x, 0
            if y < 0:
                h, y = h + y, 0
            if w <= 0 or h <= 0:
                raise CorpusFormatError(
                    f"{path}: line {lineno}: region lies entirely off-image"
                )
            if not image_id:
                raise CorpusFormatError(f"{path}: line {lineno}: empty image id")
            src_norm = normalize_line(src)
            tgt_norm = normalize_line(tgt)
            if not src_norm or not tgt_norm:
                raise CorpusFormatError(
                    f"{path}: line {lineno}: text empty after normalization"
                )
            examples.append(
                RawExample(
                    image_id=image_id,
                    region=RegionBox(x=x, y=y, w=w, h=h),
                    src_text=src_norm,
                    tgt_text=tgt_norm,
                )
            )
    return examples


def save_multimodal_tsv(path, examples: Iterable[RawExample]) -> None:
    """Serialize examples back to the 7-column TSV layout (LF endings)."""
    with open(path, "w", encoding="utf-8", newline="\n") as fp:
        for ex in examples:
            r = ex.region
            fp.write(
                f"{ex.image_id}\t{r.x}\t{r.y}\t{r.w}\t{r.h}\t{ex.src_text}\t{ex.tgt_text}\n"
            )


def load_parallel(src_path, tgt_path=None) -> tuple[list[ParallelExample], int]:
    """Load a parallel corpus; returns (examples, n_dropped).

    With one path: a 2-column TSV (source TAB target).  With two paths:
    aligned plain-text files, one sentence per line.  Pairs where either
    side normalizes to empty are dropped and counted, not fatal.
    """
    pairs: list[tuple[str, str]] = []
    if tgt_path is None:
        with open(src_path, encoding="utf-8") as fp:
            for lineno, line in enumerate(fp, start=1):
                line = line.rstrip("\n")
                fields = line.split("\t")
                if len(fields) != 2:
                    raise CorpusFormatError(
                        f"{src_path}: line {lineno}: expected 2 tab-separated fields, "
                        f"got {len(fields)}"
                    )
                pairs.append((fields[0], fields[1]))
    else:
        with open(src_path, encoding="utf-8") as fs, open(tgt_path, encoding="utf-8") as ft:
            src_lines = fs.read().split("\n")
            tgt_lines = ft.read().split("\n")
        if src_lines and src_lines[-1] == "":
            src_lines.pop()
        if tgt_lines and tgt_lines[-1] == "":
            tgt_lines.pop()
        if len(src_lines) != len(tgt_lines):
            raise CorpusFormatError(
                f"parallel files differ in length: {len(src_lines)} vs {len(tgt_lines)}"
            )
        pairs = list(zip(src_lines, tgt_lines))

    examples: list[ParallelExample] = []
    dropped = 0
    for src, tgt in pairs:
        src_norm = normalize_line(src)
        tgt_norm = normalize_line(tgt)
        if not src_norm or not tgt_norm:
            dropped += 1
            continue
        examples.append(ParallelExample(src_text=src_norm, tgt_text=tgt_norm))
    return examples, dropped


def clamp_region(region: RegionBox, img_w: int, img_h: int) -> RegionBox:
    """Intersect a region with the image rectangle.

    A box already inside is returned unchanged; a box with zero overlap
    is an error.
    """
    if img_w < 1 or img_h < 1:
        raise ValueError(f"image size must be positive, got {img_w}x{img_h}")
    x0 = max(region.x, 0)
    y0 = max(region.y, 0)
    x1 = min(region.x + region.w, img_w)
    y1 = min(region.y + region.h, img_h)
    if x1 - x0 < 1 or y1 - y0 < 1:
        raise ValueError(
            f"region {region} has no overlap with {img_w}x{img_h} image"
        )
    if (x0, y0, x1 - x0, y1 - y0) == (region.x, region.y, region.w, region.h):
        return region
    return RegionBox(x=x0, y=y0, w=x1 - x0, h=y1 - y0)


def length_filter(examples: Sequence, max_len: int = 50) -> list:
    """Keep examples whose source and target token counts are both <= max_len.

    Counts whitespace tokens of the normalized text; boundary inclusive.
    """
    kept = []
    for ex in examples:
        if len(ex.src_text.split()) <= max_len and len(ex.tgt_text.split()) <= max_len:
            kept.append(ex)
    return kept


def compute_stats(examples: Sequence) -> SplitStats:
    """Sentence count and mean whitespace-token lengths of a split."""
    n = len(examples)
    if n == 0:
        return SplitStats(n_sentences=0, avg_src_len=0.0, avg_tgt_len=0.0)
    src_total = sum(len(ex.src_text.split()) for ex in examples)
    tgt_total = sum(len(ex.tgt_text.split()) for ex in examples)
    return SplitStats(
        n_sentences=n,
        avg_src_len=src_total / n,
        avg_tgt_len=tgt_total / n,
    )


def format_stats_table(stats: SplitStats, name: str = "split") -> str:
    lines = [
        f"{'Split':<12} {'Sentences':>10} {'Avg src len':>12} {'Avg tgt len':>12}",
        f"{name:<12} {stats.n_sentences:>10} {stats.avg_src_len:>12.2f} "
        f"{stats.avg_tgt_len:>12.2f}",
    ]
    return "\n".join(lines)


def format_stats_kv(stats: SplitStats) -> str:
    return (
        f"n_sentences={stats.n_sentences}\n"
        f"avg_src_len={stats.avg_src_len:.6f}\n"
        f"avg_tgt_len={stats.avg_tgt_len:.6f}"
    )
