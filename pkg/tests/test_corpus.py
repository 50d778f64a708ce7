import pytest
from hypothesis import given
from hypothesis import strategies as st

from mmtkit.corpus import (
    CorpusFormatError,
    ParallelExample,
    RawExample,
    RegionBox,
    clamp_region,
    compute_stats,
    format_stats_kv,
    length_filter,
    load_multimodal_tsv,
    load_parallel,
    normalize_line,
    normalize_text,
    save_multimodal_tsv,
)


def test_normalize_splits_punctuation_and_lowercases():
    assert normalize_text("Hello, World!") == ["hello", ",", "world", "!"]
    assert normalize_text("don't") == ["don", "'", "t"]
    assert normalize_text("  a\t b ") == ["a", "b"]


def test_normalize_handles_devanagari_danda():
    assert normalize_text("यह एक घर है।") == ["यह", "एक", "घर", "है", "।"]


def test_normalize_empty_and_punct_only():
    assert normalize_text("") == []
    assert normalize_text("   ") == []
    assert normalize_text("!?") == ["!", "?"]


@given(st.text(max_size=80))
def test_normalize_is_idempotent(s):
    once = normalize_text(s)
    assert normalize_text(" ".join(once)) == once


@given(st.text(max_size=80))
def test_normalized_tokens_have_no_spaces_or_uppercase(s):
    for tok in normalize_text(s):
        assert tok == tok.lower()
        assert not any(ch.isspace() for ch in tok)


def test_normalize_line_joins_with_single_spaces():
    assert normalize_line("A  man, walking.") == "a man , walking ."


def _write(path, text):
    path.write_text(text, encoding="utf-8")
    return path


def test_tsv_round_trip_is_stable(tmp_path):
    rows = (
        "12345\t10\t20\t100\t50\tA red car.\tएक लाल कार।\n"
        "12345\t0\t0\t5\t5\ttrees near water\tपानी के पास पेड़\n"
        "9\t3\t4\t1\t1\tSky!\tआकाश!\n"
    )
    p = _write(tmp_path / "a.tsv", rows)
    ex = load_multimodal_tsv(p)
    assert len(ex) == 3
    assert ex[0].image_id == "12345"
    assert ex[0].region == RegionBox(10, 20, 100, 50)
    assert ex[0].src_text == "a red car ."
    assert ex[0].tgt_text == "एक लाल कार ।"

    q = tmp_path / "b.tsv"
    save_multimodal_tsv(q, ex)
    assert load_multimodal_tsv(q) == ex
    r = tmp_path / "c.tsv"
    save_multimodal_tsv(r, load_multimodal_tsv(q))
    assert r.read_bytes() == q.read_bytes()


def test_tsv_preserves_row_order(tmp_path):
    rows = "".join(f"img{i}\t0\t0\t4\t4\tword {i}\tशब्द {i}\n" for i in range(20))
    ex = load_multimodal_tsv(_write(tmp_path / "o.tsv", rows))
    assert [e.image_id for e in ex] == [f"img{i}" for i in range(20)]


@pytest.mark.parametrize(
    "row,hint",
    [
        ("a\t1\t2\t3\t4\tonly six fields", "7 tab-separated"),
        ("a\t1\t2\t3\t4\tsrc\ttgt\textra", "7 tab-separated"),
        ("a\tx\t2\t3\t4\tsrc\ttgt", "non-integer"),
        ("a\t1\t2\t0\t4\tsrc\ttgt", "positive size"),
        ("a\t1\t2\t3\t-4\tsrc\ttgt", "positive size"),
        ("\t1\t2\t3\t4\tsrc\ttgt", "image id"),
        ("a\t1\t2\t3\t4\t \ttgt", "empty after normalization"),
        ("a\t1\t2\t3\t4\tsrc\t  ", "empty after normalization"),
    ],
)
def test_malformed_tsv_rows_are_fatal_with_line_number(tmp_path, row, hint):
    p = _write(tmp_path / "bad.tsv", "ok\t0\t0\t2\t2\tgood\tठीक\n" + row + "\n")
    with pytest.raises(CorpusFormatError, match="line 2") as ei:
        load_multimodal_tsv(p)
    assert hint in str(ei.value)


def test_negative_origin_is_shifted_not_rejected(tmp_path):
    p = _write(tmp_path / "n.tsv", "a\t-5\t-2\t20\t10\tsrc\tतगत\n")
    (ex,) = load_multimodal_tsv(p)
    assert ex.region == RegionBox(0, 0, 15, 8)


def test_region_entirely_off_image_is_fatal(tmp_path):
    p = _write(tmp_path / "off.tsv", "a\t-30\t0\t20\t10\tsrc\tतगत\n")
    with pytest.raises(CorpusFormatError, match="off-image"):
        load_multimodal_tsv(p)


def test_parallel_two_column_tsv(tmp_path):
    p = _write(tmp_path / "p.tsv", "A dog.\tएक कुत्ता।\n...\t...\nbird\tचिड़िया\n")
    ex, dropped = load_parallel(p)
    assert dropped == 0
    assert len(ex) == 3
    assert ex[0] == ParallelExample("a dog .", "एक कुत्ता ।")


def test_parallel_two_file_mode_drops_empty_pairs(tmp_path):
    src = _write(tmp_path / "s.en", "A dog.\n\nbird\n")
    tgt = _write(tmp_path / "t.hi", "एक कुत्ता।\nकुछ\nचिड़िया\n")
    ex, dropped = load_parallel(src, tgt)
    assert dropped == 1
    assert [e.src_text for e in ex] == ["a dog .", "bird"]


def test_parallel_length_mismatch_is_fatal(tmp_path):
    src = _write(tmp_path / "s.en", "a\nb\n")
    tgt = _write(tmp_path / "t.hi", "x\n")
    with pytest.raises(CorpusFormatError, match="differ in length"):
        load_parallel(src, tgt)


def test_parallel_rejects_wrong_column_count(tmp_path):
    p = _write(tmp_path / "p.tsv", "no tab here\n")
    with pytest.raises(CorpusFormatError, match="line 1"):
        load_parallel(p)


def test_clamp_region_identity_for_inner_box():
    box = RegionBox(5, 5, 10, 10)
    assert clamp_region(box, 100, 100) is box


def test_clamp_region_clips_overflow():
    assert clamp_region(RegionBox(90, 95, 20, 20), 100, 100) == RegionBox(90, 95, 10, 5)


def test_clamp_region_no_overlap_is_error():
    with pytest.raises(ValueError, match="no overlap"):
        clamp_region(RegionBox(200, 0, 10, 10), 100, 100)


@given(
    st.integers(0, 300), st.integers(0, 300),
    st.integers(1, 300), st.integers(1, 300),
    st.integers(50, 400), st.integers(50, 400),
)
def test_clamped_region_always_fits_image(x, y, w, h, iw, ih):
    box = RegionBox(x, y, w, h)
    try:
        out = clamp_region(box, iw, ih)
    except ValueError:
        assert x >= iw or y >= ih
        return
    assert 0 <= out.x and 0 <= out.y
    assert out.x + out.w <= iw and out.y + out.h <= ih
    assert out.w >= 1 and out.h >= 1


def test_length_filter_boundary_is_inclusive():
    short = ParallelExample("a b c", "x y")
    exact = ParallelExample("a b c d e", "x y z w v")
    over = ParallelExample("a b c d e f", "x")
    assert length_filter([short, exact, over], max_len=5) == [short, exact]


def test_compute_stats_hand_arithmetic():
    ex = [
        ParallelExample("a b", "x y z w"),
        ParallelExample("a b c", "x"),
    ]
    st_ = compute_stats(ex)
    assert st_.n_sentences == 2
    assert st_.avg_src_len == 2.5
    assert st_.avg_tgt_len == 2.5


def test_compute_stats_empty_split():
    st_ = compute_stats([])
    assert (st_.n_sentences, st_.avg_src_len, st_.avg_tgt_len) == (0, 0.0, 0.0)


def test_stats_kv_format():
    out = format_stats_kv(compute_stats([ParallelExample("a b", "x")]))
    assert out.splitlines() == [
        "n_sentences=1",
        "avg_src_len=2.000000",
        "avg_tgt_len=1.000000",
    ]


def test_region_box_rejects_degenerate_construction():
    with pytest.raises(ValueError):
        RegionBox(0, 0, 0, 5)
    with pytest.raises(ValueError):
        RegionBox(-1, 0, 5, 5)
