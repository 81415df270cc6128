import math

import numpy as np
import pytest

from bbmlab.coalescent import (
    PartitionProcess,
    all_set_partitions,
    bs_ensemble,
    bs_rate,
    bs_sample,
    canonical,
    compare_coalescents,
    extract_partition,
    genealogy_process,
    load_ensemble,
    merge_size_weights,
    refines,
    save_ensemble,
    singletons,
)
from bbmlab.engine import ALIVE, BRANCHED, EngineConfig, Genealogy, ParticleSystem, run_until
from bbmlab.model import DomainError, SeedSpec, params_from_epsilon
from oracles import bs_rate_beta


@pytest.mark.parametrize("b", range(2, 9))
def test_rates_match_beta_integral(b):
    for k in range(2, b + 1):
        assert bs_rate(b, k) == pytest.approx(bs_rate_beta(b, k), rel=1e-10)


def test_total_rates_small_n():
    # total rate from b blocks is b - 1
    for b in range(2, 10):
        assert merge_size_weights(b).sum() == pytest.approx(b - 1, rel=1e-12)
    assert merge_size_weights(3).sum() == pytest.approx(2.0)
    with pytest.raises(DomainError):
        bs_rate(3, 1)


def test_first_event_law_four_blocks():
    rng = np.random.default_rng(1)
    ens = bs_ensemble(4, 50.0, 30_000, rng)
    t = np.array([p.first_merge_time() for p in ens])
    assert abs(t.mean() - 1 / 3) < 4 * (1 / 3) / math.sqrt(len(t))
    sizes = np.array([4 - len(p.events[1][1]) + 1 for p in ens])
    n = len(sizes)
    for k, p in [(2, 2 / 3), (3, 2 / 9), (4, 1 / 9)]:
        assert abs(np.mean(sizes == k) - p) < 4 * math.sqrt(p * (1 - p) / n)


def test_triple_merger_fraction_three_blocks():
    rng = np.random.default_rng(2)
    ens = bs_ensemble(3, 50.0, 20_000, rng)
    triple = np.mean([len(p.events[1][1]) == 1 for p in ens])
    assert abs(triple - 0.25) < 4 * math.sqrt(0.25 * 0.75 / len(ens))


def test_exchangeability_four_labels():
    rng = np.random.default_rng(3)
    ens = bs_ensemble(4, 50.0, 20_000, rng)
    pairs = [p.events[1][1] for p in ens if len(p.events[1][1]) == 3]
    counts = {}
    for part in pairs:
        blk = next(b for b in part if len(b) == 2)
        counts[blk] = counts.get(blk, 0) + 1
    assert len(counts) == 6
    expect = len(pairs) / 6
    chi2 = sum((c - expect) ** 2 / expect for c in counts.values())
    assert chi2 < 20.5  # 0.999 quantile of chi-square with 5 df


def test_paths_coarsen_and_end_in_one_block():
    rng = np.random.default_rng(4)
    for _ in range(200):
        p = bs_sample(6, 1e6, rng)
        assert p.events[0][1] == singletons(6)
        assert len(p.events[-1][1]) == 1
        for (_, a), (_, b) in zip(p.events, p.events[1:]):
            assert refines(a, b) and len(b) < len(a)


def test_sample_size_limits():
    with pytest.raises(DomainError):
        bs_sample(13, 1.0, np.random.default_rng(0))
    with pytest.raises(DomainError):
        bs_sample(1, 1.0, np.random.default_rng(0))


def test_process_validation():
    with pytest.raises(DomainError):
        PartitionProcess(3, [(0.0, singletons(3)), (1.0, singletons(3))])
    with pytest.raises(DomainError):
        PartitionProcess(3, [(0.0, ((1, 2), (3,))), (1.0, ((1, 3), (2,)))])
    with pytest.raises(DomainError):
        PartitionProcess(3, [])


def test_relabel_and_lookup():
    p = PartitionProcess(3, [(0.0, singletons(3)), (1.0, ((1, 2), (3,))), (2.0, ((1, 2, 3),))])
    assert p.block_count(0.5) == 3 and p.block_count(1.0) == 2 and p.block_count(9.0) == 1
    q = p.relabel([3, 1, 2])
    assert q.at(1.5) == canonical([[3, 1], [2]])


def _hand_tree():
    # 0 branches at t=1 into 1, 2; 1 branches at t=2 into 3, 4
    g = Genealogy.roots(1, 0.0)
    g.n = 5
    g.parent[:5] = [-1, 0, 0, 1, 1]
    g.birth[:5] = [0.0, 1.0, 1.0, 2.0, 2.0]
    g.death[:5] = [1.0, 2.0, np.nan, np.nan, np.nan]
    g.cause[:5] = [BRANCHED, BRANCHED, ALIVE, ALIVE, ALIVE]
    return g


def test_extract_partition_hand_tree():
    g = _hand_tree()
    ids = [3, 4, 2]
    assert extract_partition(g, ids, 0.5, 3.0) == singletons(3)
    assert extract_partition(g, ids, 1.5, 3.0) == ((1, 2), (3,))
    assert extract_partition(g, ids, 2.5, 3.0) == ((1, 2, 3),)
    with pytest.raises(DomainError):
        extract_partition(g, [0, 3], 0.5, 3.0)
    with pytest.raises(DomainError):
        extract_partition(g, ids, 4.0, 3.0)


def test_genealogy_process_hand_tree():
    p = genealogy_process(_hand_tree(), [3, 4, 2], 3.0, time_unit=0.5)
    assert [t for t, _ in p.events] == [0.0, 2.0, 4.0]
    assert p.events[1][1] == ((1, 2), (3,))


def test_genealogy_process_from_simulation():
    params = params_from_epsilon(1.0)
    s = ParticleSystem(params, [2.0], SeedSpec(4, 2), config=EngineConfig(record_genealogy=True))
    run_until(s, 3.0)
    assert s.size >= 4
    ids = s.ids[:4].tolist()
    p = genealogy_process(s.genealogy, ids, 3.0)
    for t, part in p.events:
        assert extract_partition(s.genealogy, ids, t, 3.0) == part
    assert len(p.events[-1][1]) == 1


def test_self_comparison_within_noise():
    rng = np.random.default_rng(5)
    emp = bs_ensemble(4, 20.0, 2000, rng)
    rep = compare_coalescents(emp, 4, time_rescale=1.0, rng=rng, s_grid=np.linspace(0, 3, 13))
    assert rep.within_noise()
    # a clock off by a factor of 3 is detected
    bad = compare_coalescents(emp, 4, time_rescale=3.0, rng=rng, s_grid=np.linspace(0, 1, 13))
    assert not bad.within_noise()


def test_set_partitions_are_bell_numbers():
    assert [len(all_set_partitions(n)) for n in range(1, 6)] == [1, 2, 5, 15, 52]


def test_ensemble_round_trip(tmp_path):
    ens = bs_ensemble(5, 2.0, 10, np.random.default_rng(6))
    path = tmp_path / "e.json"
    save_ensemble(path, ens)
    back = load_ensemble(path)
    assert [p.events for p in back] == [p.events for p in ens]
