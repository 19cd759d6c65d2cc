import pytest
from hypothesis import given
from hypothesis import strategies as st

from mpksim.cost import CostModel
from mpksim.errors import InvalidKey, NoFreeKeys, PageNotMapped
from mpksim.hw import (NA, PERM_NONE, PERM_R, PERM_RW, PERM_X, RO, RW, AccessKind, Mode,
                       PagePerm, TaskWork)
from mpksim.kernel import Kernel, Span
from oracles import BitmapOracle

READ, WRITE, FETCH = AccessKind.READ, AccessKind.WRITE, AccessKind.FETCH


def test_fifteen_keys_then_exhausted(kernel):
    t = kernel.thread(1)
    assert [kernel.pkey_alloc(t, RW) for _ in range(15)] == list(range(1, 16))
    with pytest.raises(NoFreeKeys):
        kernel.pkey_alloc(t, RW)


def test_alloc_sets_only_callers_rights(kernel):
    a, b = kernel.thread(1), kernel.thread(2)
    k = kernel.pkey_alloc(a, RO)
    assert a.pkru[k] == RO
    assert b.pkru[k] == RW


@given(st.lists(st.tuples(st.booleans(), st.integers(0, 16)), max_size=60))
def test_bitmap_matches_oracle(ops):
    kernel, oracle = Kernel(), BitmapOracle()
    t = kernel.thread(1)
    for is_alloc, k in ops:
        if is_alloc:
            want = oracle.alloc()
            if want is None:
                with pytest.raises(NoFreeKeys):
                    kernel.pkey_alloc(t, RW)
            else:
                assert kernel.pkey_alloc(t, RW) == want
        else:
            if oracle.free(k):
                kernel.pkey_free(t, k)
            else:
                with pytest.raises(InvalidKey):
                    kernel.pkey_free(t, k)
        assert kernel.bitmap & 1
        assert {i for i in range(16) if kernel.bitmap >> i & 1} == oracle.used


def test_alloc_free_alloc_returns_same_key(kernel):
    t = kernel.thread(1)
    k = kernel.pkey_alloc(t, RW)
    kernel.pkey_free(t, k)
    assert kernel.pkey_alloc(t, RW) == k


def test_free_leaves_stale_pte(kernel):
    t = kernel.thread(1)
    span = kernel.mmap(t, 1, PERM_RW)
    k = kernel.pkey_alloc(t, RW)
    kernel.pkey_mprotect(t, span, PERM_RW, k)
    kernel.pkey_free(t, k)
    assert kernel.machine.get_pte(span.base).pkey == k


def test_free_default_key_and_double_free(kernel):
    t = kernel.thread(1)
    with pytest.raises(InvalidKey):
        kernel.pkey_free(t, 0)
    for _ in range(5):
        kernel.pkey_alloc(t, RW)
    kernel.pkey_free(t, 5)
    with pytest.raises(InvalidKey):
        kernel.pkey_free(t, 5)


def test_pkey_mprotect_bulk_and_errors(kernel):
    t = kernel.thread(1)
    span = kernel.mmap(t, 4, PERM_RW)
    kernel.pkey_alloc(t, RW)
    k = kernel.pkey_alloc(t, RW)
    kernel.pkey_mprotect(t, span, PERM_RW, k)
    assert [kernel.machine.get_pte(p).pkey for p in span.pages()] == [2] * 4
    with pytest.raises(InvalidKey):
        kernel.pkey_mprotect(t, span, PERM_RW, 0)
    with pytest.raises(InvalidKey):
        kernel.pkey_mprotect(t, span, PERM_RW, 9)
    with pytest.raises(PageNotMapped):
        kernel.pkey_mprotect(t, Span(100, 1), PERM_RW, k)


def test_internal_path_may_reset_to_zero(kernel):
    t = kernel.thread(1)
    span = kernel.mmap(t, 2, PERM_RW)
    k = kernel.pkey_alloc(t, RW)
    kernel.pkey_mprotect(t, span, PERM_RW, k)
    kernel.assign_key(t, span, PERM_NONE, 0)
    assert kernel.machine.get_pte(span.base).pkey == 0


def test_exec_only_mprotect_semantic_gap(kernel):
    a, b = kernel.thread(1), kernel.thread(2)
    span = kernel.mmap(a, 1, PERM_RW)
    kernel.mprotect(a, span, PERM_X)
    p = span.base
    assert not kernel.access(a, p, READ)
    assert kernel.access(a, p, FETCH)
    assert kernel.access(b, p, READ)  # the other thread was never told
    assert kernel.machine.get_pte(p).pkey == 1


def test_plain_mprotect_keeps_keys(kernel):
    t = kernel.thread(1)
    span = kernel.mmap(t, 3, PERM_NONE)
    k = kernel.pkey_alloc(t, RW)
    kernel.pkey_mprotect(t, span, PERM_NONE, k)
    kernel.mprotect(t, span, PERM_RW)
    for p in span.pages():
        pte = kernel.machine.get_pte(p)
        assert pte.pkey == k and pte.perm == PERM_RW


def test_leaving_exec_only_drops_the_exec_key(kernel):
    t = kernel.thread(1)
    span = kernel.mmap(t, 1, PERM_RW)
    kernel.mprotect(t, span, PERM_X)
    kernel.mprotect(t, span, PERM_R)
    assert kernel.machine.get_pte(span.base).pkey == 0
    assert kernel.access(t, span.base, READ)


def test_mprotect_cost_scaling():
    kernel = Kernel(cost=CostModel(mprotect_per_extra_page=3.0))
    t = kernel.thread(1)
    span = kernel.mmap(t, 10, PERM_RW)
    kernel.mprotect(t, span, PERM_R)
    assert kernel.ledger.total == pytest.approx(1094.0 + 3.0 * 9)


def test_task_work_applied_once_on_return(kernel):
    t = kernel.thread(1)
    kernel.enter_kernel(t)
    kernel.task_work_add(t, TaskWork(3, NA))
    kernel.return_to_user(t)
    assert t.pkru[3] == NA and not t.task_work
    t.pkru = t.pkru.with_entry(3, RW)
    kernel.enter_kernel(t)
    kernel.return_to_user(t)
    assert t.pkru[3] == RW


@given(st.lists(st.sampled_from([RW, RO, NA]), min_size=1, max_size=8))
def test_task_work_fifo_last_wins(updates):
    kernel = Kernel()
    t = kernel.thread(1)
    kernel.enter_kernel(t)
    for r in updates:
        kernel.task_work_add(t, TaskWork(6, r))
    kernel.return_to_user(t)
    # FIFO replay oracle
    want = RW
    for r in updates:
        want = r
    assert t.pkru[6] == want


def test_task_work_for_user_mode_thread_waits_for_next_cycle(kernel):
    t = kernel.thread(1)
    kernel.task_work_add(t, TaskWork(2, RO))
    assert t.pkru[2] == RW
    kernel.enter_kernel(t)
    kernel.return_to_user(t)
    assert t.pkru[2] == RO


def test_return_to_user_requires_kernel_mode(kernel):
    with pytest.raises(ValueError):
        kernel.return_to_user(kernel.thread(1))


def test_sync_revokes_everywhere(kernel):
    ts = [kernel.thread(i) for i in (1, 2, 3)]
    span = kernel.mmap(ts[0], 1, PERM_RW)
    k = [kernel.pkey_alloc(ts[0], RW) for _ in range(4)][-1]
    assert k == 4
    kernel.pkey_mprotect(ts[0], span, PERM_RW, k)
    kernel.enter_kernel(ts[2])
    kernel.do_pkey_sync(ts[0], k, NA)
    assert all(not kernel.access(t, span.base, READ) for t in ts)


def test_sync_single_thread_is_wrpkru(kernel):
    t = kernel.thread(1)
    k = kernel.pkey_alloc(t, RW)
    mark = kernel.ledger.mark()
    kernel.do_pkey_sync(t, k, RO)
    assert t.pkru[k] == RO
    assert kernel.ledger.since(mark) == pytest.approx(23.3)


def test_sync_kicks_user_threads(kernel):
    a, b = kernel.thread(1), kernel.thread(2)
    k = kernel.pkey_alloc(a, RW)
    kernel.do_pkey_sync(a, k, NA)
    assert b.mode is Mode.KERNEL and b.pkru[k] == RW
    kernel.resume(b)
    assert b.pkru[k] == NA


def test_new_threads_inherit_synced_rights(kernel):
    a = kernel.thread(1)
    k = kernel.pkey_alloc(a, RW)
    kernel.do_pkey_sync(a, k, RO)
    assert kernel.thread(9).pkru[k] == RO


def _two_thread_schedules():
    # T1: sync(revoke), access ; T2: kenter, access  (every order)
    from itertools import permutations
    seen = set()
    for order in permutations("AABB"):
        if order not in seen:
            seen.add(order)
            yield order


def test_parked_thread_never_runs_with_old_right():
    checked = 0
    for order in _two_thread_schedules():
        kernel = Kernel()
        t1, t2 = kernel.thread(1), kernel.thread(2)
        span = kernel.mmap(t1, 1, PERM_RW)
        k = kernel.pkey_alloc(t1, RW)
        kernel.pkey_mprotect(t1, span, PERM_RW, k)
        steps = {"A": iter(["sync", "access"]), "B": iter(["kenter", "access"])}
        synced = False
        for who in order:
            t = t1 if who == "A" else t2
            step = next(steps[who])
            if step == "sync":
                kernel.do_pkey_sync(t1, k, NA)
                synced = True
            elif step == "kenter":
                kernel.enter_kernel(t)
            else:
                allowed = kernel.access(t, span.base, READ)
                assert allowed == (not synced)
        checked += 1
    assert checked == 6


def test_use_after_free_witness(kernel):
    t = kernel.thread(1)
    g1 = kernel.mmap(t, 1, PERM_RW)
    g2 = kernel.mmap(t, 1, PERM_RW)
    k = kernel.pkey_alloc(t, NA)
    kernel.pkey_mprotect(t, g1, PERM_RW, k)
    assert not kernel.access(t, g1.base, READ)
    kernel.pkey_free(t, k)
    assert kernel.pkey_alloc(t, RW) == k
    kernel.pkey_mprotect(t, g2, PERM_RW, k)
    assert kernel.access(t, g2.base, WRITE)
    assert kernel.access(t, g1.base, WRITE)  # G1 came along with the grant


@given(st.lists(st.sampled_from(["alloc", "free", "pkey_mprotect", "mprotect", "sync"]),
                max_size=40), st.integers(1, 50))
def test_ledger_equals_independent_replay(ops, npages):
    model = CostModel()
    kernel = Kernel(cost=model)
    t = kernel.thread(1)
    kernel.thread(2)
    span = kernel.mmap(t, npages, PERM_RW)
    expected = []
    held = []
    for op in ops:
        if op == "alloc":
            expected.append(model.pkey_alloc)
            try:
                held.append(kernel.pkey_alloc(t, RW))
            except NoFreeKeys:
                pass
        elif op == "free" and held:
            expected.append(model.pkey_free)
            kernel.pkey_free(t, held.pop())
        elif op == "pkey_mprotect" and held:
            expected.append(model.pkey_mprotect + model.mprotect_per_extra_page * (npages - 1))
            kernel.pkey_mprotect(t, span, PERM_RW, held[-1])
        elif op == "mprotect":
            expected.append(model.mprotect_base + model.mprotect_per_extra_page * (npages - 1))
            kernel.mprotect(t, span, PERM_RW)
        elif op == "sync" and held:
            expected.append(model.wrpkru + model.sync_per_remote_thread)
            kernel.do_pkey_sync(t, held[-1], RO)
    assert kernel.ledger.total == pytest.approx(sum(expected))
    running = 0.0
    for c in kernel.ledger.entries:
        assert c.cycles >= 0
        running += c.cycles
    assert running == pytest.approx(sum(expected))


def test_cost_constants_must_be_positive():
    with pytest.raises(ValueError):
        CostModel(wrpkru=0)
