import json
import math

import numpy as np
import pytest

from rttdp.data import SyntheticSpec, generate
from rttdp.errors import AuditError, ContractError
from rttdp.forge import AttackObjective
from rttdp.protocol import (
    ADVERSARY,
    BENIGN,
    ExperimentReport,
    OnlineService,
    PgdSettings,
    QueryAudit,
    StreamSchedule,
    average_rank,
    read_rows,
    run_stream,
    table_from_rows,
    validate_report,
)
from rttdp.tta import TtaConfig, Victim

FAST = PgdSettings(steps=3)


class TestSchedule:
    @pytest.mark.parametrize("mode", ["uniform", "non-uniform"])
    def test_zero_budget_has_no_adversary(self, mode):
        s = StreamSchedule(12, 4, r=0.0, mode=mode, segments=2)
        assert all(slot.origin == BENIGN for slot in s.slots())
        assert s.delta is None

    def test_uniform_spacing(self):
        s = StreamSchedule(12, 4, r=0.25, segments=1)
        assert [slot.position for slot in s.slots() if slot.origin == ADVERSARY] == [0, 4, 8]
        assert s.delta == 4.0

    def test_non_uniform_front_loads(self):
        s = StreamSchedule(12, 4, r=0.25, mode="non-uniform", segments=1)
        assert [slot.position for slot in s.slots() if slot.origin == ADVERSARY] == [0, 1, 2]

    def test_counts_split_across_segments(self):
        s = StreamSchedule(30, 2, r=0.5, segments=3)
        assert s.adversary_counts() == [5, 5, 5]
        s = StreamSchedule(9, 2, r=0.5, segments=3)  # round(4.5) = 5 -> 2, 2, 1 by remainder then index
        assert sum(s.adversary_counts()) == 5 and max(s.adversary_counts()) - min(s.adversary_counts()) <= 1

    def test_realized_fraction(self):
        for r in (0.0, 0.25, 0.5, 1.0):
            assert StreamSchedule(16, 4, r=r, segments=2).realized_fraction() == r

    def test_mixed_batches(self):
        s = StreamSchedule(4, 8, r=0.25, mixed=True)
        assert all(slot.n_adversary == 2 and slot.n_benign == 6 for slot in s.slots())

    def test_invalid(self):
        for kw in ({"r": 1.5}, {"mode": "bursty"}, {"segments": 5}):
            with pytest.raises(ContractError):
                StreamSchedule(12, 4, **kw)


class TestAudit:
    def test_second_forward_rejected(self):
        audit = QueryAudit([5])
        audit.open(0, BENIGN)
        audit.online_forward()
        audit.online_forward()
        with pytest.raises(AuditError):
            audit.close()

    def test_benign_samples_never_reach_surrogate(self):
        audit = QueryAudit([5, 6])
        audit.surrogate_call([1, 2], ADVERSARY)
        with pytest.raises(AuditError):
            audit.surrogate_call([2, 6], ADVERSARY)
        with pytest.raises(AuditError):
            audit.surrogate_call([1], BENIGN)

    def test_parameter_read_is_refused(self, vector_source):
        audit = QueryAudit()
        service = OnlineService(Victim(vector_source, TtaConfig()), audit)
        audit.open(0, ADVERSARY)
        with pytest.raises(AuditError):
            service.read_parameters()
        assert audit.records[0].parameter_reads == 1


@pytest.fixture(scope="module")
def small_stream(vector_spec):
    return generate(vector_spec)


class TestRunStream:
    def test_audit_and_poison_bookkeeping(self, small_stream, vector_source):
        sched = StreamSchedule(8, 8, r=0.5, segments=2)
        rep = run_stream(sched, TtaConfig(lr=0.1), AttackObjective("NHE"), small_stream, vector_source,
                         pgd=FAST, keep_poisons=True)
        assert rep.audit["passed"] and rep.audit["parameter_reads"] == 0
        assert rep.audit["online_forwards"] == rep.audit["batches"] == 8
        assert rep.audit["max_online_forwards_per_batch"] == 1
        assert rep.audit["benign_indices_at_surrogate"] == 0
        poisons = rep.extras["poisons"]
        assert len(poisons) == 4
        assert all(set(p.indices.tolist()) <= small_stream.adversary_indices for p in poisons)
        assert all(np.abs(p.eps).max() <= 0.3 + 1e-9 for p in poisons)
        assert rep.benign_count == 4 * 8

    def test_baseline_is_clean_continual_adaptation(self, small_stream, vector_source):
        sched = StreamSchedule(8, 8, r=0.5, segments=2)
        cfg = TtaConfig(lr=0.1)
        rep = run_stream(sched, cfg, None, small_stream, vector_source, seed=3)
        # replay by hand: every batch, adversary ones included, is a clean draw from its pool
        victim = Victim(vector_source, cfg, seed=3)
        wrong = seen = 0
        for slot in sched.slots():
            seg = small_stream.segments[slot.segment]
            if slot.n_adversary:
                sl = slice(slot.adversary_offset, slot.adversary_offset + slot.n_adversary)
                victim.step(seg.adversary_x[sl], seg.adversary_y[sl])
            else:
                sl = slice(slot.benign_offset, slot.benign_offset + slot.n_benign)
                preds, _ = victim.step(seg.benign_x[sl], seg.benign_y[sl])
                wrong += int(np.sum(preds != seg.benign_y[sl]))
                seen += slot.n_benign
        assert rep.error == wrong / seen

    def test_modes_reorder_the_same_poisons(self, small_stream, vector_source):
        batches = {}
        for mode in ("uniform", "non-uniform"):
            sched = StreamSchedule(8, 8, r=0.5, mode=mode, segments=2)
            rep = run_stream(sched, TtaConfig(lr=0.1), AttackObjective("NHE"), small_stream, vector_source,
                             pgd=FAST, keep_poisons=True)
            assert rep.audit["passed"]
            batches[mode] = [tuple(p.indices.tolist()) for p in rep.extras["poisons"]]
        assert sorted(batches["uniform"]) == sorted(batches["non-uniform"])
        positions = {
            mode: [s.position for s in StreamSchedule(8, 8, r=0.5, mode=mode, segments=2).slots()
                   if s.origin == ADVERSARY]
            for mode in batches
        }
        assert positions["uniform"] != positions["non-uniform"]

    def test_short_pool_rejected(self, small_stream, vector_source):
        with pytest.raises(ContractError):
            run_stream(StreamSchedule(40, 16, segments=2), TtaConfig(), None, small_stream, vector_source)

    def test_deterministic(self, small_stream, vector_source):
        sched = StreamSchedule(4, 8, r=0.5, segments=2)
        a = run_stream(sched, TtaConfig(lr=0.1), AttackObjective("BLE"), small_stream, vector_source, pgd=FAST)
        b = run_stream(sched, TtaConfig(lr=0.1), AttackObjective("BLE"), small_stream, vector_source, pgd=FAST)
        assert a.segment_errors == b.segment_errors


def brute_force_ranks(table):
    attacks = list(table)
    victims = list(next(iter(table.values())))
    out = {}
    for a in attacks:
        total = 0.0
        for v in victims:
            higher = sum(table[b][v] > table[a][v] for b in attacks)
            ties = sum(table[b][v] == table[a][v] for b in attacks) - 1
            total += 1 + higher + ties / 2
        out[a] = total / len(victims)
    return out


class TestRanks:
    def test_total_order(self):
        assert average_rank({"a": {"v": 30}, "b": {"v": 20}, "c": {"v": 10}}) == {"a": 1.0, "b": 2.0, "c": 3.0}

    def test_ties(self):
        r = average_rank({"a": {"v": 5, "w": 1}, "b": {"v": 5, "w": 2}})
        assert r == {"a": (1.5 + 2) / 2, "b": (1.5 + 1) / 2}

    def test_against_brute_force(self):
        g = np.random.default_rng(0)
        for _ in range(50):
            table = {f"a{i}": {f"v{j}": float(g.integers(0, 4)) for j in range(3)} for i in range(3)}
            got = average_rank(table)
            for a, r in brute_force_ranks(table).items():
                assert got[a] == pytest.approx(r)

    def test_partial_table_ranks_within_columns(self):
        table = {"none": {"v": 5.0, "w": 3.0}, "x": {"v": 50.0}, "y": {"w": 9.0}}
        assert average_rank(table) == {"none": 2.0, "x": 1.0, "y": 1.0}

    def test_empty(self):
        with pytest.raises(ContractError):
            average_rank({})


@pytest.fixture(scope="module")
def report(small_stream, vector_source):
    sched = StreamSchedule(4, 8, r=0.5, segments=2)
    runs = [run_stream(sched, TtaConfig(lr=0.1, name=v), a, small_stream, vector_source, seed=s, pgd=FAST)
            for v in ("p", "q") for a in (None, AttackObjective("NHE")) for s in (0, 1)]
    return ExperimentReport(runs, config={"note": "test"})


class TestReport:
    def test_json_schema(self, report):
        doc = json.loads(report.to_json())
        validate_report(doc)
        assert doc["audit"]["all_passed"]

    def test_csv_cardinality_and_baseline_rows(self, report):
        rows = read_rows(report.to_csv())
        totals = [r for r in rows if r["segment"] == "all"]
        assert len(totals) == 8
        assert {r["victim"] for r in totals if r["attack"] == "none"} == {"p", "q"}

    def test_table_round_trip(self, report):
        back = table_from_rows(read_rows(report.to_csv()))
        expected = report.error_table()
        assert back.keys() == expected.keys()
        for a in expected:
            assert back[a] == pytest.approx(expected[a], abs=1e-9)

    def test_bad_report_rejected(self, report):
        doc = json.loads(report.to_json())
        del doc["runs"]
        with pytest.raises(ContractError):
            validate_report(doc)
