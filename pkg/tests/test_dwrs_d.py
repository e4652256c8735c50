import math

import numpy as np
import pytest

from dwrs.corpus import Dataset, UserSequence, compute_popularity, contains_pattern, generate_synthetic
from dwrs.dwrs_d import (ReceptiveFieldSpec, WatermarkError, WatermarkRecord, WatermarkSequence,
                         embed_baseline_watermark, embed_dataset_watermark, filler_set, load_records,
                         remove_block, save_records, select_watermark_items, tail_pool, target_count)


def make(seqs, n_items=None):
    n = n_items or max(max(s) for s in seqs)
    return Dataset([UserSequence(k, list(s)) for k, s in enumerate(seqs)], n)


@pytest.fixture(scope="module")
def synth():
    return generate_synthetic(600, 120, (10, 30), 0.8, 5)


def test_watermark_sequence_parts():
    wm = WatermarkSequence((4, 8, 15))
    assert wm.body == [4, 8] and wm.response == 15
    with pytest.raises(ValueError):
        WatermarkSequence((1, 1, 2))


def test_tail_pool_size_uses_ceiling():
    pop = compute_popularity(make([list(range(1, 21))]))
    assert len(tail_pool(pop, 0.10)) == 2
    # 10% of 3,416 items -> the 342 least popular
    assert math.ceil(0.10 * 3416) == 342


def test_select_from_tail(synth):
    pop = compute_popularity(synth)
    wm = select_watermark_items(pop, synth, 3, 0.10, np.random.default_rng(0))
    tail = set(tail_pool(pop, 0.10))
    assert len(wm) == 3 and set(wm.items) <= tail
    assert not contains_pattern(synth, wm.items)


def test_select_is_deterministic(synth):
    pop = compute_popularity(synth)
    a = select_watermark_items(pop, synth, 3, 0.1, np.random.default_rng(7))
    b = select_watermark_items(pop, synth, 3, 0.1, np.random.default_rng(7))
    assert a == b


def test_select_any_pair_when_no_two_patterns():
    d = make([[1], [2], [3]])
    wm = select_watermark_items(compute_popularity(d), d, 2, 1.0, np.random.default_rng(0))
    assert len(set(wm.items)) == 2


def test_select_pool_too_small():
    d = make([[1, 2, 3, 4, 5]])
    with pytest.raises(WatermarkError, match="tail_fraction"):
        select_watermark_items(compute_popularity(d), d, 3, 0.2, np.random.default_rng(0))


def test_select_budget_exhausted():
    # items 1 and 2 are the two least popular and both orders already occur
    d = make([[1, 2, 3, 4, 5], [2, 1, 3, 4, 5], [3, 4, 5], [5, 4, 3]])
    pop = compute_popularity(d)
    assert sorted(tail_pool(pop, 0.4)) == [1, 2]
    with pytest.raises(WatermarkError, match="absent pattern"):
        select_watermark_items(pop, d, 2, 0.4, np.random.default_rng(0), max_tries=50)


def test_filler_set_examples():
    seq = list(range(100, 120))
    rf = ReceptiveFieldSpec(5, 5)
    assert filler_set(seq, 10, 3, rf) == set(seq[5:15])
    assert filler_set(seq, 0, 3, rf) == set(seq[0:5])
    assert filler_set(seq, 20, 3, rf) == set(seq[15:20])
    assert filler_set(seq, 7, 3, ReceptiveFieldSpec.parse("whole")) == set(seq)
    with pytest.raises(ValueError):
        filler_set(seq, 21, 3, rf)


def test_target_count_ceiling():
    assert target_count(0.01, 6040) == 61
    assert target_count(0.01, 2000) == 20
    assert target_count(0.01, 100) == 1


def test_disjoint_fillers_block_second_user():
    d = make([[1, 2, 3, 4], [4, 3, 2, 1], [9, 10]], n_items=12)
    wm = WatermarkSequence((9, 10, 11))
    out, rec = embed_dataset_watermark(d, wm, 1.0, ReceptiveFieldSpec.parse("whole"),
                                       np.random.default_rng(0))
    # user 2 holds watermark items; users 0 and 1 share every filler item
    assert rec.achieved_count == 1
    assert rec.partial and rec.target_count == 3


def test_single_insertion_fillers():
    d = generate_synthetic(100, 40, (8, 12), 0.8, 2)
    pop = compute_popularity(d)
    wm = select_watermark_items(pop, d, 3, 0.1, np.random.default_rng(1))
    out, rec = embed_dataset_watermark(d, wm, 0.01, ReceptiveFieldSpec(5, 5), np.random.default_rng(1))
    assert rec.achieved_count == 1 and not rec.partial
    (u, pos), = rec.insertions
    assert rec.filler_items == filler_set(d.by_user()[u].items, pos, 3, ReceptiveFieldSpec(5, 5))


def test_embed_invariants(synth):
    pop = compute_popularity(synth)
    rng = np.random.default_rng(3)
    wm = select_watermark_items(pop, synth, 3, 0.1, rng)
    before = synth.copy()
    out, rec = embed_dataset_watermark(synth, wm, 0.05, ReceptiveFieldSpec(5, 5), rng)
    assert synth.sequences() == before.sequences()
    clean = synth.by_user()
    seen: set[int] = set()
    for (u, pos), fill in zip(rec.insertions, rec.fillers):
        assert set(wm.items).isdisjoint(clean[u].items)
        recomputed = filler_set(clean[u].items, pos, 3, rec.rf)
        assert recomputed == set(fill)
        assert seen.isdisjoint(recomputed)
        seen |= recomputed
        assert remove_block(out.by_user()[u].items, pos, 3) == clean[u].items
        assert out.by_user()[u].items[pos:pos + 3] == list(wm.items)
    assert seen == rec.filler_items
    assert set(wm.items).isdisjoint(rec.filler_items)
    assert rec.achieved_count <= target_count(0.05, len(synth))


def test_embed_deterministic(synth):
    wm = WatermarkSequence((1, 2, 3))
    a = embed_dataset_watermark(synth, wm, 0.02, rng=np.random.default_rng(9))
    b = embed_dataset_watermark(synth, wm, 0.02, rng=np.random.default_rng(9))
    assert a[0].sequences() == b[0].sequences()
    assert a[1].insertions == b[1].insertions


def test_no_eligible_user():
    d = make([[1, 2], [2, 3]])
    with pytest.raises(WatermarkError, match="no eligible"):
        embed_dataset_watermark(d, WatermarkSequence((2, 3)), 0.5, rng=np.random.default_rng(0))


def test_baseline_ignores_uniqueness():
    d = make([[1, 2, 3, 4], [4, 3, 2, 1]], n_items=12)
    out, rec = embed_baseline_watermark(d, WatermarkSequence((9, 10, 11)), 1.0, np.random.default_rng(0))
    assert rec.achieved_count == 2 and rec.variant == "baseline"


def test_record_round_trip(tmp_path, synth):
    wm = WatermarkSequence((1, 2, 3))
    _, rec = embed_dataset_watermark(synth, wm, 0.02, rng=np.random.default_rng(9), seed=9)
    save_records([rec], tmp_path / "r.json")
    back, = load_records(tmp_path / "r.json")
    assert isinstance(back, WatermarkRecord)
    assert back.watermark == wm and back.insertions == rec.insertions
    assert back.filler_items == rec.filler_items and back.seed == 9
