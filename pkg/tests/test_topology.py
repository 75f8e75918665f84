import pathlib

import pytest
from hypothesis import given, settings, strategies as st

from shiftsim.errors import ConfigError, UnsupportedConfigError
from shiftsim.topology import (
    ModelConfig, ParallelConfig, Topology, build_topology, head_permutation,
    kv_groups,
)

from oracles import head_slots_by_simulation

DATA = pathlib.Path(__file__).parent / "data"


def grid_configs():
    """Every supported (q_heads, kv_heads, sp, tp) with small degrees."""
    out = []
    for h, h_kv in [(4, 2), (6, 6), (8, 2), (8, 4), (8, 8), (12, 4)]:
        for sp in (1, 2, 3, 4, 6, 8):
            for tp in (1, 2, 3, 4, 6, 8):
                p = sp * tp
                if h % p != 0:
                    continue
                if h_kv % tp != 0 and tp % h_kv != 0:
                    continue
                kv_local = h_kv // tp if h_kv % tp == 0 else 1
                if sp > kv_local and sp % kv_local != 0:
                    continue
                if sp <= kv_local and kv_local % sp != 0:
                    continue
                out.append((h, h_kv, sp, tp))
    return out


def mk_mc(h, h_kv, head_dim=2) -> ModelConfig:
    return ModelConfig(layers=1, hidden=h * head_dim, mlp_hidden=8,
                       q_heads=h, kv_heads=h_kv, head_dim=head_dim, vocab=8)


class TestParallelConfig:
    def test_defaults(self):
        pc = ParallelConfig(sp=3, tp=2)
        assert pc.p == 6
        assert pc.shift_threshold == 6

    def test_p_mismatch_rejected(self):
        with pytest.raises(ConfigError):
            ParallelConfig(sp=2, tp=2, p=5)

    def test_bad_degrees_rejected(self):
        with pytest.raises(ConfigError):
            ParallelConfig(sp=0, tp=2)


class TestModelConfig:
    def test_head_divisibility_enforced(self):
        with pytest.raises(ConfigError):
            mk_mc(6, 4)

    def test_hidden_consistency_enforced(self):
        with pytest.raises(ConfigError):
            ModelConfig(layers=1, hidden=10, mlp_hidden=8, q_heads=4,
                        kv_heads=2, head_dim=2, vocab=8)

    def test_grouped_mapping(self):
        mc = mk_mc(8, 2)
        assert [mc.kv_head_for(q) for q in range(8)] == [0, 0, 0, 0, 1, 1, 1, 1]


class TestGroups:
    def test_worked_example_groups(self, mha6_mc):
        topo = build_topology(mha6_mc, ParallelConfig(sp=3, tp=2))
        assert topo.tp_groups == ((0, 1), (2, 3), (4, 5))
        assert topo.sp_groups == ((0, 2, 4), (1, 3, 5))
        assert topo.sp_tp_order == (0, 2, 4, 1, 3, 5)

    def test_degenerate_single_worker(self):
        topo = build_topology(mk_mc(4, 2), ParallelConfig(sp=1, tp=1))
        assert topo.tp_groups == ((0,),)
        assert topo.sp_groups == ((0,),)
        assert topo.sp_tp_order == (0,)

    def test_oversubscribed_heads_rejected(self):
        with pytest.raises(UnsupportedConfigError):
            build_topology(mk_mc(4, 2), ParallelConfig(sp=1, tp=8))

    @pytest.mark.parametrize("h,h_kv,sp,tp", grid_configs())
    def test_partition_properties(self, h, h_kv, sp, tp):
        topo = build_topology(mk_mc(h, h_kv), ParallelConfig(sp=sp, tp=tp))
        p = sp * tp
        # every worker in exactly one group of each kind
        tp_members = [w for g in topo.tp_groups for w in g]
        sp_members = [w for g in topo.sp_groups for w in g]
        assert sorted(tp_members) == list(range(p))
        assert sorted(sp_members) == list(range(p))
        # heads partitioned evenly
        owned = [q for w in range(p) for q in topo.head_owner[w]]
        assert sorted(owned) == list(range(h))
        assert all(len(topo.head_owner[w]) == h // p for w in range(p))
        # kv holders cover all heads, authoritative holder first
        assert sorted(topo.kv_holders) == list(range(h_kv))
        for holders in topo.kv_holders.values():
            assert holders == tuple(sorted(holders))


class TestHeadPermutation:
    def test_worked_example(self):
        assert head_permutation(6, 3, 2) == (0, 2, 4, 1, 3, 5)

    def test_tensor_only_identity(self):
        assert head_permutation(8, 1, 8) == tuple(range(8))

    def test_sequence_only_identity(self):
        assert head_permutation(8, 8, 1) == tuple(range(8))

    def test_indivisible_rejected(self):
        with pytest.raises(UnsupportedConfigError):
            head_permutation(6, 2, 2)

    @pytest.mark.parametrize("h,h_kv,sp,tp", grid_configs())
    def test_matches_exchange_simulation(self, h, h_kv, sp, tp):
        assert list(head_permutation(h, sp, tp)) == head_slots_by_simulation(h, sp, tp)

    @pytest.mark.parametrize("h,h_kv,sp,tp", grid_configs())
    def test_shift_order_reproduces_base_ownership(self, h, h_kv, sp, tp):
        # Loading natural head blocks into workers listed in sp_tp_order must
        # give every worker the heads it already owns in the base layout.
        topo = build_topology(mk_mc(h, h_kv), ParallelConfig(sp=sp, tp=tp))
        per = h // (sp * tp)
        for position, w in enumerate(topo.sp_tp_order):
            block = tuple(range(position * per, (position + 1) * per))
            assert topo.head_owner[w] == block


class TestKvGroups:
    def test_replication_example(self, gqa_mc):
        aa, ag = kv_groups(gqa_mc, 4)
        assert aa == [[0, 2], [1, 3]]
        assert ag == [[0, 1], [2, 3]]

    def test_no_replication_when_equal(self, mha8_mc):
        aa, ag = kv_groups(mha8_mc, 8)
        assert aa == [list(range(8))]
        assert ag == [[r] for r in range(8)]

    def test_indivisible_rejected(self, gqa_mc):
        with pytest.raises(UnsupportedConfigError):
            kv_groups(gqa_mc, 3)

    @pytest.mark.parametrize("h_kv,sp", [(2, 4), (2, 8), (4, 8), (2, 2), (4, 4)])
    def test_stage_reachability(self, h_kv, sp):
        # After the all-to-all a rank holds its head for the row chunks of its
        # aa peers; the gather must supply the rest, covering every chunk.
        mc = mk_mc(8, h_kv)
        aa, ag = kv_groups(mc, sp)
        sp_aa = len(aa[0])
        sp_ag = len(ag[0])
        assert sp_aa * sp_ag == sp
        assert sorted(r for g in aa for r in g) == list(range(sp))
        assert sorted(r for g in ag for r in g) == list(range(sp))
        for rank in range(sp):
            aa_group = next(g for g in aa if rank in g)
            ag_group = next(g for g in ag if rank in g)
            chunks = set()
            for member in ag_group:
                member_aa = next(g for g in aa if member in g)
                chunks.update(member_aa)
            assert chunks == set(range(sp))
            # all ranks gathering together need the same kv head
            needs = {r // sp_ag for r in ag_group}
            assert len(needs) == 1

    def test_holders_match_worked_layout(self, gqa_mc):
        topo = build_topology(gqa_mc, ParallelConfig(sp=4, tp=1))
        assert topo.kv_holders == {0: (0, 1), 1: (2, 3)}
        assert topo.aa_groups == ((0, 2), (1, 3))
        assert topo.ag_groups == ((0, 1), (2, 3))


class TestSerialization:
    def test_golden_dump(self, mha6_mc):
        topo = build_topology(mha6_mc, ParallelConfig(sp=3, tp=2))
        golden = (DATA / "topology_sp3_tp2.txt").read_text()
        assert topo.to_text() == golden

    def test_dump_mentions_every_worker(self, gqa_mc):
        topo = build_topology(gqa_mc, ParallelConfig(sp=2, tp=2))
        text = topo.to_text()
        for w in range(4):
            assert f"worker {w} " in text
