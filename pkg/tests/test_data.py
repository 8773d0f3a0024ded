import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image

from uwdiff.data import (ConfigError, CorpusError, DatasetSplit, ImagePair, batch_iter,
                         corpus_fingerprint, load_corpus, read_image, save_image, split_corpus,
                         stack, write_pairs)
from uwdiff.synthetic import make_pairs


def _pair(i, v=0.5, side=4):
    a = np.full((side, side, 3), v, np.float32)
    return ImagePair(a, a, f"p{i:03d}")


def _write_png(path, arr):
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(arr).save(path)


def test_image_pair_validation():
    ok = np.zeros((4, 4, 3), np.float32)
    with pytest.raises(ValueError):
        ImagePair(ok, np.zeros((4, 5, 3), np.float32), "x")
    with pytest.raises(ValueError):
        ImagePair(ok + 1.5, ok, "x")
    with pytest.raises(ValueError):
        ImagePair(ok * np.nan, ok, "x")
    p = ImagePair(ok, ok, "x")
    with pytest.raises(ValueError):
        p.raw[0, 0, 0] = 1.0  # read-only


def test_load_corpus_three_pairs(tmp_path):
    rng = np.random.default_rng(0)
    for i in range(3):
        _write_png(tmp_path / "raw" / f"{i}.png", rng.integers(0, 255, (40, 30, 3), dtype=np.uint8))
        _write_png(tmp_path / "reference" / f"{i}.png", rng.integers(0, 255, (40, 30, 3), dtype=np.uint8))
    (tmp_path / "raw" / "notes.txt").write_text("ignored")
    pairs = load_corpus(tmp_path, side=64)
    assert [p.id for p in pairs] == ["0", "1", "2"]
    assert all(p.raw.shape == (64, 64, 3) for p in pairs)
    assert load_corpus(tmp_path, side=64, workers=2)[1].id == "1"


def test_load_corpus_jpeg_and_rgba(tmp_path):
    rgba = np.zeros((8, 8, 4), np.uint8)
    rgba[..., 3] = 255
    _write_png(tmp_path / "raw" / "a.png", rgba)
    (tmp_path / "reference").mkdir()
    Image.fromarray(np.zeros((8, 8, 3), np.uint8)).save(tmp_path / "reference" / "a.jpg")
    (pair,) = load_corpus(tmp_path, side=8)
    assert pair.raw.shape == (8, 8, 3)


def test_all_black_pair(tmp_path):
    black = np.zeros((16, 16, 3), np.uint8)
    _write_png(tmp_path / "raw" / "k.png", black)
    _write_png(tmp_path / "reference" / "k.png", black)
    (pair,) = load_corpus(tmp_path, side=16)
    assert not pair.raw.any() and not pair.reference.any()


def test_orphan_is_named(tmp_path):
    img = np.zeros((4, 4, 3), np.uint8)
    _write_png(tmp_path / "raw" / "a.png", img)
    _write_png(tmp_path / "raw" / "lonely.png", img)
    _write_png(tmp_path / "reference" / "a.png", img)
    with pytest.raises(CorpusError, match="lonely"):
        load_corpus(tmp_path, side=4)


def test_missing_dir_and_unreadable(tmp_path):
    with pytest.raises(CorpusError):
        load_corpus(tmp_path)
    (tmp_path / "raw").mkdir()
    (tmp_path / "reference").mkdir()
    (tmp_path / "raw" / "bad.png").write_bytes(b"not a png")
    (tmp_path / "reference" / "bad.png").write_bytes(b"not a png")
    with pytest.raises(CorpusError, match="bad.png"):
        load_corpus(tmp_path, side=4)


def test_save_roundtrip_is_exact(tmp_path):
    img = np.random.default_rng(0).integers(0, 256, (12, 12, 3)).astype(np.float32) / 255
    save_image(img, tmp_path / "x.png")
    assert np.array_equal(read_image(tmp_path / "x.png", 12), img)
    assert not list(tmp_path.glob(".*tmp"))


def test_split_arithmetic_and_determinism():
    pairs = [_pair(i) for i in range(10)]
    s = split_corpus(pairs, 0.2, 7)
    assert (len(s.train), len(s.val)) == (8, 2)
    assert split_corpus(pairs, 0.2, 7) == s
    assert {p.id for p in s.train}.isdisjoint(p.id for p in s.val)


def test_split_uieb_protocol():
    pairs = [_pair(i, side=1) for i in range(890)]
    s = split_corpus(pairs, 90 / 890, 0)
    assert (len(s.train), len(s.val)) == (800, 90)


def test_split_errors():
    with pytest.raises(ConfigError):
        split_corpus([_pair(0), _pair(1)], 1.0, 0)
    with pytest.raises(ConfigError):
        split_corpus([_pair(0)], 0.5, 0)
    with pytest.raises(ValueError):
        DatasetSplit((_pair(0),), (_pair(0),), 0)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 40), st.integers(1, 9), st.integers(0, 1000))
def test_batches_cover_once(n, bs, seed):
    pairs = [_pair(i, side=1) for i in range(n)]
    batches = list(batch_iter(pairs, bs, shuffle_seed=seed))
    ids = [p.id for b in batches for p in b]
    assert sorted(ids) == sorted(p.id for p in pairs)
    assert all(len(b) == bs for b in batches[:-1])
    assert ids == [p.id for b in batch_iter(pairs, bs, shuffle_seed=seed) for p in b]


def test_batch_size_invalid():
    with pytest.raises(ConfigError):
        list(batch_iter([_pair(0)], 0))


def test_stack_layout():
    raw, ref = stack(make_pairs(3, 8, seed=1))
    assert raw.shape == ref.shape == (3, 3, 8, 8)
    assert raw.flags["C_CONTIGUOUS"]


def test_write_pairs_roundtrip_and_fingerprint(tmp_path):
    pairs = make_pairs(3, 16, seed=2)
    write_pairs(pairs, tmp_path)
    loaded = load_corpus(tmp_path, side=16)
    assert corpus_fingerprint(loaded) == corpus_fingerprint(load_corpus(tmp_path, side=16))
    assert corpus_fingerprint(loaded) != corpus_fingerprint(loaded[:2])
