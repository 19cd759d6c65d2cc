"""Parameter sweeps that mirror the cache and page-count microbenchmarks."""

from __future__ import annotations

import csv
import io
import random

from .cost import CostModel
from .hw import PAGE_SIZE, PERM_R, PERM_RW
from .kernel import Kernel
from .manager import mpk_init

DEFAULT_PAGE_COUNTS = (1, 2, 5, 10, 20, 50, 100, 200, 500, 1000)
DEFAULT_HIT_RATES = (0.0, 0.25, 0.5, 0.75, 1.0)
DEFAULT_EVICT_RATES = (0.0, 0.5, 1.0)


def _process(threads: int, cost: CostModel | None) -> Kernel:
    kernel = Kernel(cost=cost)
    for tid in range(threads):
        kernel.spawn(tid)
    return kernel


def page_count_sweep(page_counts=DEFAULT_PAGE_COUNTS, threads: int = 1,
                     cost: CostModel | None = None) -> list[dict]:
    """Cost of one permission flip on a group of N pages.

    ``mpk_mprotect_hit`` is measured after the group already holds a key;
    ``mprotect_sparse`` flips N non-adjacent pages one call at a time.
    """
    rows = []
    for n in page_counts:
        kernel = _process(threads, cost)
        t0 = kernel.thread(0)
        mgr = mpk_init(kernel, 1.0, t0)
        mgr.mpk_mmap(t0, 1, n * PAGE_SIZE, PERM_RW)
        mgr.mpk_mprotect(t0, 1, PERM_R)
        mark = kernel.ledger.mark()
        mgr.mpk_mprotect(t0, 1, PERM_RW)
        hit = kernel.ledger.since(mark)

        raw = _process(threads, cost)
        r0 = raw.thread(0)
        span = raw.mmap(r0, n, PERM_RW)
        mark = raw.ledger.mark()
        raw.mprotect(r0, span, PERM_R)
        contiguous = raw.ledger.since(mark)

        sparse_base = raw.mmap(r0, 2 * n, PERM_RW).base
        mark = raw.ledger.mark()
        for i in range(n):
            raw.mprotect(r0, type(span)(sparse_base + 2 * i, 1), PERM_R)
        sparse = raw.ledger.since(mark)

        rows.append({"pages": n, "threads": threads,
                     "mpk_mprotect_hit": round(hit, 3),
                     "mprotect_contiguous": round(contiguous, 3),
                     "mprotect_sparse": round(sparse, 3)})
    return rows


def hit_rate_sweep(hit_rates=DEFAULT_HIT_RATES, evict_rates=DEFAULT_EVICT_RATES,
                   threads: int = 1, calls: int = 100, seed: int = 0,
                   cost: CostModel | None = None) -> list[dict]:
    """Average mpk_mprotect cost on one page at a fixed hit rate.

    Each grid point warms the cache with 15 groups, then issues ``calls``
    permission flips; exactly ``round(hit_rate * calls)`` of them target a
    bound group, chosen in a seeded random order.
    """
    rows = []
    for evict_rate in evict_rates:
        for hit_rate in hit_rates:
            rng = random.Random(seed)
            kernel = _process(threads, cost)
            t0 = kernel.thread(0)
            mgr = mpk_init(kernel, evict_rate, t0)
            ngroups = 15 + calls
            for v in range(ngroups):
                mgr.mpk_mmap(t0, v, PAGE_SIZE, PERM_RW)
            for v in range(15):
                mgr.mpk_mprotect(t0, v, PERM_R)
            perm = {v: PERM_R if v < 15 else PERM_RW for v in range(ngroups)}
            nhits = round(hit_rate * calls)
            plan = [True] * nhits + [False] * (calls - nhits)
            rng.shuffle(plan)
            before = mgr.stats()
            mark = kernel.ledger.mark()
            for hit in plan:
                bound = sorted(mgr.cache.binding)
                pool = bound if hit else sorted(set(range(ngroups)) - set(bound))
                v = rng.choice(pool)
                perm[v] = PERM_RW if perm[v] == PERM_R else PERM_R
                mgr.mpk_mprotect(t0, v, perm[v])
            total = kernel.ledger.since(mark)
            after = mgr.stats()
            avg = total / calls
            ref = kernel.cost.mprotect(1)
            rows.append({"threads": threads, "evict_rate": evict_rate, "hit_rate": hit_rate,
                         "calls": calls,
                         "hits": after["hits"] - before["hits"],
                         "misses": after["misses"] - before["misses"],
                         "evictions": after["evictions"] - before["evictions"],
                         "mpk_mprotect_avg": round(avg, 3),
                         "mprotect_ref": round(ref, 3),
                         "speedup": round(ref / avg, 3)})
    return rows


def to_csv(rows: list[dict]) -> str:
    if not rows:
        return ""
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
    w.writeheader()
    w.writerows(rows)
    return buf.getvalue()


SWEEPS = {"page_count": page_count_sweep, "hit_rate": hit_rate_sweep}
