import json
from collections import Counter

import numpy as np
import pytest
from scipy.ndimage import label as connected

from p3seg.data import (MARGIN, ConfigError, Corpus, CorpusManifest, FormatError, batch_at,
                        batch_iterator, generate_corpus, generate_sample, load_image,
                        load_label, load_sample, read_pgm, save_sample, write_pgm, Sample)


def tree_bytes(root):
    return {p.relative_to(root).as_posix(): p.read_bytes()
            for p in sorted(root.rglob("*")) if p.is_file()}


def test_split_counts(tmp_path):
    m = generate_corpus(tmp_path, seed=1, N=200, H=32, W=32, test_count=4)
    assert (m.N, m.N_s) == (200, 10)
    assert len(m.labeled) == 10 and len(m.unlabeled) == 190
    ids = m.labeled + m.unlabeled + m.test
    assert len(set(ids)) == len(ids)
    assert len(m.labeled) < len(m.unlabeled)
    # unlabeled samples carry no label file
    assert not (tmp_path / "labels" / f"{m.unlabeled[0]}.pgm").exists()
    assert (tmp_path / "labels" / f"{m.labeled[0]}.pgm").exists()
    assert CorpusManifest.from_json((tmp_path / "manifest.json").read_text()) == m


def test_same_seed_byte_identical(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    generate_corpus(a, seed=3, N=20, H=32, W=32, labeled_fraction=0.2, test_count=3)
    generate_corpus(b, seed=3, N=20, H=32, W=32, labeled_fraction=0.2, test_count=3)
    assert tree_bytes(a) == tree_bytes(b)
    c = tmp_path / "c"
    generate_corpus(c, seed=4, N=20, H=32, W=32, labeled_fraction=0.2, test_count=3)
    assert tree_bytes(a) != tree_bytes(c)


def test_subset_stable():
    # a sample depends only on (seed, id), not on what else was generated
    a = generate_sample(7, "s0042", 32, 32, 4)
    generate_sample(7, "s0001", 32, 32, 4)
    b = generate_sample(7, "s0042", 32, 32, 4)
    assert np.array_equal(a.image, b.image) and np.array_equal(a.label, b.label)


def test_invalid_config(tmp_path):
    for frac in (0.0, 1.0, -0.2):
        with pytest.raises(ConfigError):
            generate_corpus(tmp_path, N=20, labeled_fraction=frac)
    with pytest.raises(ConfigError):
        generate_corpus(tmp_path, N=20, n_classes=5)


@pytest.mark.parametrize("n", [2, 3, 4])
def test_sample_properties(n):
    for k in range(15):
        s = generate_sample(0, f"x{k}", 64, 64, n)
        assert s.image.shape == (1, 64, 64)
        assert 0.0 <= s.image.min() and s.image.max() <= 1.0
        assert s.label.max() < n
        fg = s.label > 0
        assert fg.any()
        # shapes stay interior
        assert not fg[:MARGIN].any() and not fg[-MARGIN:].any()
        assert not fg[:, :MARGIN].any() and not fg[:, -MARGIN:].any()
        if n == 2:
            assert set(np.unique(s.label)) <= {0, 1}
            assert 1 <= connected(fg)[1] <= 3
        else:
            assert {1, 2} <= set(np.unique(s.label))


def test_classes_have_distinct_intensity():
    means = {c: [] for c in range(4)}
    for k in range(20):
        s = generate_sample(0, f"m{k}", 64, 64, 4)
        for c in range(4):
            if (s.label == c).any():
                means[c].append(s.image[0][s.label == c].mean())
    m = {c: np.mean(v) for c, v in means.items()}
    # bright blob above the darker ring
    assert m[1] > m[2] + 0.1


def test_image_round_trip(tmp_path):
    (tmp_path / "images").mkdir()
    (tmp_path / "labels").mkdir()
    img = np.random.default_rng(0).random((1, 17, 23))
    lab = np.zeros((17, 23), dtype=np.int64)
    save_sample(tmp_path, Sample("r", img, lab))
    back = load_sample(tmp_path, "r", 4)
    assert np.abs(back.image - img).max() <= 1 / 65535
    assert np.array_equal(back.label, lab)
    assert back.image.shape == img.shape


def test_pgm_header_with_comment(tmp_path):
    p = tmp_path / "c.pgm"
    p.write_bytes(b"P5\n# made by hand\n2 1\n255\n\x01\x02")
    data, maxval = read_pgm(p)
    assert maxval == 255 and data.tolist() == [[1, 2]]


def test_malformed_files(tmp_path):
    p = tmp_path / "x.pgm"
    write_pgm(p, np.ones((4, 4)), 65535)
    raw = p.read_bytes()
    p.write_bytes(raw[:-3])
    with pytest.raises(FormatError):
        load_image(p)
    p.write_bytes(b"P2\n4 4\n255\n" + bytes(16))
    with pytest.raises(FormatError):
        load_image(p)
    p.write_bytes(b"P5\n4")
    with pytest.raises(FormatError):
        load_image(p)
    write_pgm(p, np.full((3, 3), 4), 255)
    with pytest.raises(FormatError):
        load_label(p, 4)
    assert load_label(p, 5).max() == 4


def test_corpus_loads(tmp_path):
    m = generate_corpus(tmp_path, seed=0, N=20, H=32, W=32, labeled_fraction=0.1, test_count=2)
    c = Corpus(tmp_path)
    assert c.images(m.labeled).shape == (2, 1, 32, 32)
    assert c.labels(m.test).shape == (2, 32, 32)
    assert c.samples[m.unlabeled[0]].label is None
    direct = generate_sample(0, m.labeled[0], 32, 32, 4)
    assert np.array_equal(c.images(m.labeled[:1])[0], direct.image)
    with pytest.raises(ConfigError):
        Corpus(tmp_path / "missing")


def manifest(n_lab=10, n_unl=30):
    return CorpusManifest(0, 8, 8, 4, n_lab + n_unl, n_lab,
                          [f"l{i}" for i in range(n_lab)], [f"u{i}" for i in range(n_unl)])


def test_batches_with_replacement_and_pure():
    m = manifest()
    it = batch_iterator(m, 4, seed=5)
    steps = [next(it) for _ in range(20)]
    assert all(len(a) == len(b) == 4 for a, b in steps)
    seen = Counter(i for a, _ in steps for i in a)
    assert max(seen.values()) > 1
    assert steps[13] == batch_at(m, 4, 5, 13)
    again = batch_iterator(m, 4, seed=5, start=13)
    assert next(again) == steps[13]
    assert batch_at(m, 4, 6, 13) != steps[13]


def test_batch_errors():
    with pytest.raises(ConfigError):
        batch_iterator(manifest(), 0, 0)
    with pytest.raises(ConfigError):
        batch_iterator(CorpusManifest(0, 8, 8, 4, 3, 0, [], ["a", "b", "c"]), 2, 0)


def test_labeled_draws_uniform():
    m = manifest()
    counts = Counter()
    for k in range(2500):
        counts.update(batch_at(m, 4, 1, k)[0])
    n = 10_000
    p = 0.1
    sd = np.sqrt(n * p * (1 - p))
    assert len(counts) == 10
    assert all(abs(v - n * p) <= 3 * sd for v in counts.values())
