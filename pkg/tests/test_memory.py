from fractions import Fraction

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from refineloop.errors import DuplicateIteration, NonContiguousIteration, StoreCorruption
from refineloop.execution import ExecutionOutcome, Status
from refineloop.memory import IterationRecord, MemoryStore, RewardMode, UsageCount, batch_index
from refineloop.metrics import Direction, Objective
from refineloop.selection import ReferenceSet
from refineloop.snapshots import CodebaseSnapshot, SnapshotStore

ARI = Objective("ARI", Direction.MAXIMIZE)
RMSE = Objective("RMSE", Direction.MINIMIZE)


def refs(i, ids=None):
    ids = ids or [f"i{i}p{k}" for k in range(5)]
    return ReferenceSet({"H": ids[:2], "M": ids[2:3], "L": ids[3:5]}, i)


def rec(i, value=None, ids=None, metric="ARI", sid=None, lesson=""):
    if value is None:
        out = ExecutionOutcome(Status.FAILURE, {}, "failed", 1, 10)
    else:
        out = ExecutionOutcome(Status.SUCCESS, {metric: value}, "", 1, 1, sid or f"snap{i}")
    return IterationRecord(i, refs(i, ids), f"approach {i}", out, lesson=lesson or f"lesson {i}")


def store(obj=ARI, baseline=0.496, **kw):
    return MemoryStore(obj, {obj.metric_name: baseline}, "base", **kw)


def test_record_improvement_then_regression():
    s = store()
    r1 = s.record_iteration(rec(1, 0.530))
    assert r1.improved and s.anchors()[0] == 1
    r2 = s.record_iteration(rec(2, 0.510))
    assert not r2.improved and s.anchors()[0] == 1
    assert all(s.counters[(pid, 2)] == UsageCount(0, 1) for pid in r2.reference_set.paper_ids)
    assert all(s.counters[(pid, 1)] == UsageCount(1, 0) for pid in r1.reference_set.paper_ids)


def test_record_failure():
    s = store()
    r = s.record_iteration(rec(1))
    assert not r.improved and s.anchors() == (0, 0)
    assert len([k for k in s.counters if k[1] == 1]) == 5
    assert all(c.failures == 1 and c.attempts == 1 for c in s.counters.values())


def test_iterations_must_be_contiguous():
    s = store()
    s.record_iteration(rec(1))
    with pytest.raises(NonContiguousIteration):
        s.record_iteration(rec(3))
    with pytest.raises(DuplicateIteration):
        s.record_iteration(rec(1))


def test_baseline_must_include_objective():
    with pytest.raises(ValueError):
        MemoryStore(ARI, {"NMI": 0.5}, "base")


SHARED = ["p", "a", "b", "c", "d"]


def test_batch_reward_one_sixth():
    s = store()
    # p used at 1..5: 3 strict improvements, 2 non-improvements
    for i, v in enumerate([0.6, 0.7, 0.65, 0.8, 0.5], 1):
        s.record_iteration(rec(i, v, SHARED))
    for i in range(6, 11):
        s.record_iteration(rec(i, 0.9 if i == 6 else None))
    assert s.batch_reward("p", 1) == pytest.approx(1 / 6, abs=1e-15)
    assert s.batch_reward("p", 0) == 0.0
    assert s.batch_reward("never", 3) == 0.0


def test_batch_reward_all_failures():
    s = store()
    for i in range(1, 5):
        s.record_iteration(rec(i, None, SHARED))
    assert s.batch_reward("p", 1) == pytest.approx(-4 / 5, abs=1e-15)
    with pytest.raises(ValueError):
        s.batch_reward("p", -1)


def test_refresh_rewards_batches():
    s = store()
    for i in range(1, 25):
        s.record_iteration(rec(i, None, SHARED if i in (3, 15, 22) else None))
    for i in range(1, 11):
        assert s.refresh_rewards(i).batch == 0
        assert all(v == 0 for v in s.refresh_rewards(i).rewards.values())
    r11 = s.refresh_rewards(11)
    assert r11.batch == 1 and r11.get("p") == pytest.approx(-1 / 2)
    r25 = s.refresh_rewards(25)
    assert r25.batch == 2 and r25.get("p") == pytest.approx(-2 / 3)
    assert s.refresh_rewards(19) is r11


def test_reward_modes():
    s = store()
    for i in range(1, 11):
        s.record_iteration(rec(i, 0.5 + i / 100 if i % 2 else None))
    assert dict(s.refresh_rewards(11, RewardMode.ZERO).rewards) == {}
    ones = s.refresh_rewards(11, RewardMode.CONSTANT_ONE)
    assert set(ones.rewards.values()) == {1.0} and len(ones.rewards) == 50
    assert set(s.refresh_rewards(11).rewards) == set(ones.rewards)


def test_batch_index():
    assert [batch_index(i) for i in (1, 10, 11, 20, 21, 25)] == [0, 0, 1, 1, 2, 2]


def test_anchor_examples():
    assert store().anchors() == (0, 0)
    s = store()
    for i in range(1, 8):
        s.record_iteration(rec(i, {3: 0.55, 7: 0.60}.get(i)))
    assert s.anchors() == (7, 3)
    s = store(RMSE, 1.3)
    s.record_iteration(rec(1, 1.10, metric="RMSE"))
    s.record_iteration(rec(2, 1.20, metric="RMSE"))
    assert s.anchors() == (1, 2)
    one = store()
    one.record_iteration(rec(1, 0.6))
    assert one.anchors() == (1, 0)


def test_foundation_snapshot(tmp_path):
    snaps = SnapshotStore(tmp_path)
    base = CodebaseSnapshot({"m.py": "a"})
    snaps.put(base)
    s = MemoryStore(ARI, {"ARI": 0.5}, base.snapshot_id, snapshots=snaps)
    assert s.foundation_snapshot() == base
    better = base.derive({"m.py": "b"}, 0, ["x"])
    snaps.put(better)
    s.record_iteration(rec(1, 0.6, sid=better.snapshot_id))
    assert s.foundation_snapshot() == better
    worse = better.derive({"m.py": "c"}, 1, ["y"])
    snaps.put(worse)
    s.record_iteration(rec(2, 0.55, sid=worse.snapshot_id))
    assert s.foundation_snapshot() == better


def test_memory_context_window():
    s = store()
    for i in range(1, 8):
        s.record_iteration(rec(i, 0.5 + i / 100 if i == 4 else None))
    ctx = s.memory_context()
    assert ctx["lessons"] == [f"iteration {i}: lesson {i}" for i in range(3, 8)]
    assert ctx["best_iteration"] == 4 and ctx["best_approach"] == "approach 4"


def test_load_round_trip_and_corruption(tmp_path):
    log = tmp_path / "memory.jsonl"
    s = store(log_path=log)
    for i, v in enumerate([0.6, None, 0.55, 0.7, None, 0.71, 0.3, None, 0.8, 0.79, 0.81], 1):
        s.record_iteration(rec(i, v, SHARED if i % 3 == 0 else None))
    t = MemoryStore.load(log)
    assert t.anchors() == s.anchors() and t.counters == s.counters
    assert t.refresh_rewards(11).rewards == s.refresh_rewards(11).rewards
    assert t.trajectory() == s.trajectory()
    lines = log.read_text().splitlines()
    log.write_text("\n".join(lines[1:]) + "\n")
    with pytest.raises(StoreCorruption):
        MemoryStore.load(log)


history = st.lists(st.one_of(st.none(), st.floats(0, 1, allow_nan=False)), min_size=1, max_size=40)


@settings(max_examples=150, deadline=None)
@given(history, st.sampled_from([ARI, RMSE]))
def test_anchor_optimality_and_reward_bound(values, obj):
    s = store(obj, 0.5)
    pools = [["a", "b", "c", "d", "e"], ["a", "f", "g", "h", "i"], ["j", "b", "k", "l", "m"]]
    for i, v in enumerate(values, 1):
        s.record_iteration(rec(i, v, pools[i % 3], metric=obj.metric_name))
    best, second = s.anchors()
    ok = [(0, 0.5)] + [(i, v) for i, v in enumerate(values, 1) if v is not None]
    best_value = s.value_of(best)
    assert not any(obj.better(v, best_value) for _, v in ok)
    if len(ok) > 1:
        assert second != best
    for pid in "abcdefghijklm":
        for b in range(0, len(values) // 10 + 2):
            uses = [k for k in range(1, min(10 * b, len(values)) + 1) if pid in pools[k % 3]]
            r = s.batch_reward(pid, b)
            assert abs(r) <= len(uses) / (len(uses) + 1) + 1e-15
            assert abs(r) < 1


@settings(max_examples=150, deadline=None)
@given(st.integers(0, 20), st.integers(1, 20))
def test_reward_monotone_in_successes(successes, failures):
    def reward(ns, nf):
        s = store()
        s.counters = {("p", k): UsageCount(1, 0) for k in range(1, ns + 1)}
        s.counters.update({("p", k): UsageCount(0, 1) for k in range(ns + 1, ns + nf + 1)})
        return s.batch_reward("p", 5)

    r0, r1 = reward(successes, failures), reward(successes + 1, failures - 1)
    assert r1 > r0
    assert Fraction(r0).limit_denominator(1000) == Fraction(successes - failures, successes + failures + 1)
