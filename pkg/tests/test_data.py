import csv

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from malafide.data import (
    ATTACKS,
    BONA,
    Partition,
    generate_corpus,
    read_corpus,
    split_partition,
    stratified_split,
    write_corpus,
)


@pytest.fixture(scope="module")
def small():
    return generate_corpus(3, n_bona=12, height=32, width=32)


def test_same_seed_is_bitwise_identical():
    a = generate_corpus(5, n_bona=6, height=32, width=40)
    b = generate_corpus(5, n_bona=6, height=32, width=40)
    assert a.bona_fide.tobytes() == b.bona_fide.tobytes()
    for k in ATTACKS:
        assert a.spoofs[k].tobytes() == b.spoofs[k].tobytes()
    assert np.array_equal(a.eye_bands, b.eye_bands)


def test_different_seed_differs():
    a = generate_corpus(1, n_bona=4, height=32, width=32)
    b = generate_corpus(2, n_bona=4, height=32, width=32)
    assert not np.array_equal(a.bona_fide, b.bona_fide)


def test_counts_and_range():
    c = generate_corpus(0, n_bona=100, height=32, width=32)
    assert c.bona_fide.shape == (100, 32, 32, 3)
    assert sum(len(v) for v in c.spoofs.values()) == 300
    assert len(c) == 400
    for imgs in [c.bona_fide, *c.spoofs.values()]:
        assert imgs.min() >= 0.0 and imgs.max() <= 1.0


def test_every_spoof_differs_from_its_source(small):
    for a in ATTACKS:
        diff = np.abs(small.spoofs[a] - small.bona_fide).mean(axis=(1, 2, 3))
        assert np.all(diff > 0), a


def test_images_are_exactly_eight_bit(small):
    q = small.bona_fide * 255
    assert np.array_equal(q, np.round(q))


def test_region_swap_is_confined_to_eye_band(small):
    for i, (y0, y1) in enumerate(small.eye_bands):
        d = np.abs(small.spoofs["region_swap"][i] - small.bona_fide[i]).max(axis=(1, 2))
        assert np.all(d[:y0] == 0) and np.all(d[y1:] == 0)
        assert d[y0:y1].max() > 0


def test_attack_subset_matches_full_corpus(small):
    sub = generate_corpus(3, n_bona=12, attack_ids=["color_shift"], height=32, width=32)
    assert sub.attack_ids == ("color_shift",)
    assert np.array_equal(sub.spoofs["color_shift"], small.spoofs["color_shift"])
    assert np.array_equal(sub.bona_fide, small.bona_fide)


@pytest.mark.parametrize(
    "kwargs",
    [
        {"attack_ids": ["morph"]},
        {"attack_ids": ["color_shift", "color_shift"]},
        {"n_bona": 3},
        {"height": 31},
        {"width": 16},
    ],
)
def test_invalid_arguments_rejected(kwargs):
    args = {"n_bona": 4, "height": 32, "width": 32} | kwargs
    with pytest.raises(ValueError):
        generate_corpus(0, **args)


def test_split_ten_images_is_seven_three():
    p = stratified_split(["x"] * 10, 0.7, 0)
    assert (len(p.part1), len(p.part2)) == (7, 3)


def test_split_1998_is_1399_599():
    p = stratified_split(["spoof"] * 1998, 0.7, 0)
    assert (len(p.part1), len(p.part2)) == (1399, 599)


def test_split_is_deterministic_and_seed_dependent():
    strata = ["a"] * 20 + ["b"] * 30
    p, q = stratified_split(strata, 0.7, 4), stratified_split(strata, 0.7, 4)
    assert np.array_equal(p.part1, q.part1) and np.array_equal(p.part2, q.part2)
    assert not np.array_equal(p.part1, stratified_split(strata, 0.7, 5).part1)


def test_split_rejects_tiny_stratum_and_bad_ratio():
    with pytest.raises(ValueError):
        stratified_split(["a", "a", "b"], 0.7, 0)
    for r in (0.0, 1.0, -0.2, 1.5):
        with pytest.raises(ValueError):
            stratified_split(["a"] * 4, r, 0)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.integers(2, 40), min_size=1, max_size=5), st.floats(0.05, 0.95), st.integers(0, 1000))
def test_split_is_a_stratified_partition(sizes, ratio, seed):
    strata = [k for k, n in enumerate(sizes) for _ in range(n)]
    p = stratified_split(strata, ratio, seed)
    both = np.concatenate([p.part1, p.part2])
    assert len(np.intersect1d(p.part1, p.part2)) == 0
    assert np.array_equal(np.sort(both), np.arange(len(strata)))
    s = np.array(strata)
    for k, n in enumerate(sizes):
        n1 = int(np.sum(s[p.part1] == k))
        assert abs(n1 - ratio * n) <= 1


def test_default_partition_sizes():
    c = generate_corpus(0, n_bona=10, height=32, width=32)
    p = split_partition(c)
    assert len(p.part1) == 4 * 7 and len(p.part2) == 4 * 3
    bona, spoofs = c.select(p.part2)
    assert len(bona) == 3 and all(len(v) == 3 for v in spoofs.values())


def test_write_read_round_trip(tmp_path, small):
    part = split_partition(small, 0.7, 1)
    manifest = write_corpus(small, part, tmp_path)
    rows = list(csv.DictReader(open(manifest)))
    assert len(rows) == 48 and list(rows[0]) == ["path", "label", "attack_id", "partition"]
    assert {r["label"] for r in rows} == {BONA, "spoof"}
    assert all(r["attack_id"] == "" for r in rows if r["label"] == BONA)
    back, part_back = read_corpus(tmp_path)
    assert np.array_equal(back.bona_fide, small.bona_fide)
    for a in ATTACKS:
        assert np.array_equal(back.spoofs[a], small.spoofs[a])
    assert np.array_equal(back.eye_bands, small.eye_bands)
    assert isinstance(part_back, Partition)
    assert np.array_equal(part_back.part1, part.part1)
    assert np.array_equal(part_back.part2, part.part2)


def test_read_missing_manifest(tmp_path):
    with pytest.raises(FileNotFoundError):
        read_corpus(tmp_path)
