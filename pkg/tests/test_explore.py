import itertools

import pytest

from mpksim.explore import count_interleavings, explore, interleavings, split_setup
from mpksim.kernel import Kernel
from mpksim.trace import parse_trace


def load(name):
    return parse_trace(open(f"traces/{name}").read())


def test_interleavings_match_brute_force():
    progs = [["a1", "a2"], ["b1", "b2"], ["c1"]]
    got = sorted(map(tuple, interleavings(progs)))
    flat = [x for p in progs for x in p]
    want = sorted({perm for perm in itertools.permutations(flat)
                   if all([x for x in perm if x in p] == p for p in progs)})
    assert got == want
    assert len(got) == count_interleavings([2, 2, 1]) == 30


def test_count_interleavings_multinomial():
    assert count_interleavings([2, 2, 2]) == 90
    assert count_interleavings([3, 3, 2]) == 560


def test_split_setup():
    setup, body = split_setup(parse_trace("T1 mmap 1 4096 rw\n---\nT2 read @1"))
    assert [o.verb for o in setup] == ["mmap"] and [o.verb for o in body] == ["read"]
    setup, body = split_setup(parse_trace("T1 mmap 1 4096 rw"))
    assert setup == [] and len(body) == 1


def test_limits():
    ops = parse_trace("\n".join(f"T{t} kenter" for t in range(1, 5)))
    with pytest.raises(ValueError):
        explore(ops)
    ops = parse_trace("T1 kenter\nT1 kexit\n" * 5)
    with pytest.raises(ValueError):
        explore(ops)


def test_managed_sync_has_no_violations():
    res = explore(load("sync_managed.trace"), "managed")
    assert res.interleavings == 90 and res.violating == 0


def test_raw_exec_only_leaks():
    res = explore(load("sync_raw_execonly.trace"), "raw")
    assert res.interleavings == 90 and res.violating >= 1
    assert res.violation["kind"] == "read" and res.violation["thread"] != 1
    assert res.counterexample


def test_missing_kick_is_caught(monkeypatch):
    # with the kick removed a running thread keeps its stale PKRU
    monkeypatch.setattr(Kernel, "kick", lambda self, thread: None)
    res = explore(load("sync_managed.trace"), "managed")
    assert res.violating > 0


def test_missing_task_work_is_caught(monkeypatch):
    monkeypatch.setattr(Kernel, "task_work_add", lambda self, target, work: None)
    res = explore(load("sync_managed.trace"), "managed")
    assert res.violating > 0
