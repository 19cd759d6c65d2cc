"""Textual traces and their deterministic replay.

One operation per line::

    T<tid> <verb> <args...>     # comment

``---`` on its own line marks the end of a setup prefix (used by the
interleaving explorer, ignored by plain replay). Pages are named either by
number or as ``@label`` / ``@label+i`` (page ``i`` of a mapped region); spans
are ``base:count`` or ``@label``. Permission tokens are ``na``, ``ro`` or any
combination of ``r``, ``w``, ``x``; PKRU rights are ``rw``, ``ro``, ``na``.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from typing import Any, Union

from . import errors
from .cost import CostModel
from .errors import MpkError, TraceSyntaxError, UnknownVkey
from .hw import NA, PAGE_SIZE, RO, RW, AccessKind, AccessRight, Mode, PagePerm, access_allowed
from .kernel import Kernel, Span, normalize_prot
from .manager import VkeyManager, mpk_init

VERBS = (
    "init", "mmap", "munmap", "begin", "end", "mprotect", "malloc", "free",
    "read", "write", "fetch",
    "raw_pkey_alloc", "raw_pkey_free", "raw_pkey_mprotect", "raw_mprotect",
    "kenter", "kexit",
)
MANAGER_VERBS = {"init", "begin", "end", "mprotect", "malloc", "free"}
ACCESS_VERBS = {"read": AccessKind.READ, "write": AccessKind.WRITE, "fetch": AccessKind.FETCH}
BARRIER = "---"


class UnsupportedVerb(MpkError):
    """Manager verb issued in raw mode."""


@dataclass(frozen=True)
class Ref:
    label: int
    index: int | None = None

    def __str__(self):
        return f"@{self.label}" + ("" if self.index is None else f"+{self.index}")


Target = Union[int, Ref]
SpanArg = Union[Span, Ref]


@dataclass(frozen=True)
class TraceOp:
    line: int
    thread: int
    verb: str
    args: tuple = ()

    def __str__(self):
        return " ".join([f"T{self.thread}", self.verb, *map(_fmt_arg, self.args)])


def _fmt_arg(a) -> str:
    return str(a)


# parsing -------------------------------------------------------------------

_PERM_RE = re.compile(r"^(?=[rwx]+$)(r?)(w?)(x?)$")
_RIGHTS = {"rw": RW, "ro": RO, "na": NA}


def parse_perm(tok: str) -> PagePerm:
    if tok == "na":
        return PagePerm()
    if tok == "ro":
        return PagePerm(read=True)
    m = _PERM_RE.match(tok)
    if not m:
        raise ValueError(f"bad permission {tok!r}")
    return PagePerm(bool(m[1]), bool(m[2]), bool(m[3]))


def parse_right(tok: str) -> AccessRight:
    try:
        return _RIGHTS[tok]
    except KeyError:
        raise ValueError(f"bad access right {tok!r} (want rw, ro or na)") from None


def parse_int(tok: str) -> int:
    v = int(tok, 0)
    if v < 0:
        raise ValueError(f"negative integer {tok!r}")
    return v


def parse_ref(tok: str) -> Ref:
    body = tok[1:]
    label, plus, idx = body.partition("+")
    return Ref(parse_int(label), parse_int(idx) if plus else None)


def parse_target(tok: str) -> Target:
    return parse_ref(tok) if tok.startswith("@") else parse_int(tok)


def parse_span(tok: str) -> SpanArg:
    if tok.startswith("@"):
        ref = parse_ref(tok)
        if ref.index is not None:
            raise ValueError("span references name a whole region")
        return ref
    base, colon, count = tok.partition(":")
    if not colon:
        raise ValueError(f"span {tok!r} is not base:count")
    return Span(parse_int(base), parse_int(count))


def parse_rate(tok: str) -> float:
    v = float(tok)
    if not 0 <= v <= 1:
        raise ValueError(f"eviction rate {tok} outside [0, 1]")
    return v


# verb -> (required arg parsers, optional arg parsers)
_GRAMMAR: dict[str, tuple[tuple, tuple]] = {
    "init": ((), (parse_rate,)),
    "mmap": ((parse_int, parse_int, parse_perm), ()),
    "munmap": ((parse_int,), ()),
    "begin": ((parse_int, parse_right), ()),
    "end": ((parse_int,), ()),
    "mprotect": ((parse_int, parse_perm), ()),
    "malloc": ((parse_int, parse_int, str), ()),
    "free": ((str,), ()),
    "read": ((parse_target,), ()),
    "write": ((parse_target,), ()),
    "fetch": ((parse_target,), ()),
    "raw_pkey_alloc": ((), (parse_right,)),
    "raw_pkey_free": ((parse_int,), ()),
    "raw_pkey_mprotect": ((parse_span, parse_perm, parse_int), ()),
    "raw_mprotect": ((parse_span, parse_perm), ()),
    "kenter": ((), ()),
    "kexit": ((), ()),
}


def parse_trace(text: str) -> list[TraceOp]:
    ops: list[TraceOp] = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0]
        toks = [(m.group(), m.start() + 1) for m in re.finditer(r"\S+", line)]
        if not toks:
            continue
        if len(toks) == 1 and toks[0][0] == BARRIER:
            ops.append(TraceOp(lineno, -1, BARRIER))
            continue
        (ttok, tcol) = toks[0]
        if not re.fullmatch(r"T\d+", ttok):
            raise TraceSyntaxError(f"expected thread id like T1, got {ttok!r}", lineno, tcol, raw)
        if len(toks) < 2:
            raise TraceSyntaxError("missing verb", lineno, len(line.rstrip()) + 1, raw)
        verb, vcol = toks[1]
        if verb not in _GRAMMAR:
            raise TraceSyntaxError(f"unknown verb {verb!r}", lineno, vcol, raw)
        required, optional = _GRAMMAR[verb]
        argtoks = toks[2:]
        if not len(required) <= len(argtoks) <= len(required) + len(optional):
            col = argtoks[len(required) + len(optional)][1] if len(argtoks) > len(required) else len(line.rstrip()) + 1
            raise TraceSyntaxError(
                f"{verb} takes {len(required)}"
                + (f"-{len(required) + len(optional)}" if optional else "")
                + f" argument(s), got {len(argtoks)}", lineno, col, raw)
        args = []
        for parse, (tok, col) in zip(required + optional, argtoks):
            try:
                args.append(parse(tok))
            except ValueError as e:
                raise TraceSyntaxError(str(e), lineno, col, raw) from None
        ops.append(TraceOp(lineno, int(ttok[1:]), verb, tuple(args)))
    return ops


# replay --------------------------------------------------------------------

@dataclass
class Report:
    mode: str
    evict_rate: float
    seed: int
    ops: list[dict] = field(default_factory=list)
    cache: dict[str, int] = field(default_factory=dict)
    cost_total: float = 0.0
    cost_per_thread: dict[int, float] = field(default_factory=dict)
    cost_per_op: dict[str, float] = field(default_factory=dict)
    metadata_bytes: int = 0
    violations: list[dict] = field(default_factory=list)

    def verdicts(self) -> list[str]:
        return [o["verdict"] for o in self.ops]

    def to_dict(self) -> dict[str, Any]:
        return {
            "mode": self.mode,
            "evict_rate": self.evict_rate,
            "seed": self.seed,
            "ops": self.ops,
            "cache": self.cache,
            "cost": {
                "total": round(self.cost_total, 6),
                "per_thread": {f"T{t}": round(v, 6) for t, v in self.cost_per_thread.items()},
                "per_op": {k: round(v, 6) for k, v in self.cost_per_op.items()},
            },
            "metadata_bytes": self.metadata_bytes,
            "oracle_violations": self.violations,
            "summary": {
                "ops": len(self.ops),
                "errors": sum(o["verdict"] == "error" for o in self.ops),
                "allowed": sum(o["verdict"] == "allowed" for o in self.ops),
                "denied": sum(o["verdict"] == "denied" for o in self.ops),
            },
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


class Replayer:
    """Drives one simulated process through a list of TraceOps.

    Alongside the simulation it keeps the permission each page *should* have
    under plain process-wide mprotect semantics, and records every access
    whose verdict disagrees with it.
    """

    def __init__(self, mode: str = "managed", evict_rate: float = 1.0, seed: int = 0,
                 cost: CostModel | None = None):
        if mode not in ("managed", "raw"):
            raise ValueError(f"unknown mode {mode!r}")
        self.mode = mode
        self.evict_rate = evict_rate
        self.seed = seed
        self.kernel = Kernel(cost=cost)
        self.manager: VkeyManager | None = None
        self.regions: dict[int, list[Span]] = {}
        self.chunks: dict[str, Any] = {}
        self.intent: dict[int, PagePerm] = {}
        self.report = Report(mode, evict_rate, seed)

    # resolution helpers

    def _region(self, label: int) -> list[Span]:
        if label not in self.regions:
            raise UnknownVkey(f"no region @{label}")
        return self.regions[label]

    def _page(self, target: Target) -> int:
        if isinstance(target, int):
            return target
        pages = [p for s in self._region(target.label) for p in s.pages()]
        idx = target.index or 0
        if idx >= len(pages):
            raise IndexError(f"{target} is past the end of the region")
        return pages[idx]

    def _spans(self, arg: SpanArg) -> list[Span]:
        return self._region(arg.label) if isinstance(arg, Ref) else [arg]

    def _mgr(self) -> VkeyManager:
        if self.manager is None:
            raise errors.NotInitialized("manager verb before init")
        return self.manager

    def _set_intent(self, spans, perm: PagePerm | None) -> None:
        for s in spans:
            for p in s.pages():
                if perm is None:
                    self.intent.pop(p, None)
                else:
                    self.intent[p] = normalize_prot(perm)

    # execution

    def run(self, ops: list[TraceOp]) -> Report:
        for op in ops:
            self.step(op)
        return self.finish()

    def step(self, op: TraceOp) -> dict | None:
        if op.verb == BARRIER:
            return None
        self._op = op
        thread = self.kernel.thread(op.thread)
        mark = self.kernel.ledger.mark()
        entry: dict[str, Any] = {"line": op.line, "thread": op.thread, "verb": op.verb,
                                 "args": [str(a) for a in op.args]}
        try:
            if self.mode == "raw" and op.verb in MANAGER_VERBS:
                raise UnsupportedVerb(f"{op.verb} needs managed mode")
            if op.verb not in ("kenter", "kexit"):
                self.kernel.resume(thread)
            result = getattr(self, "_do_" + op.verb)(thread, *op.args)
        except (MpkError, ValueError, IndexError) as e:
            entry["verdict"] = "error"
            entry["error"] = type(e).__name__
            entry["message"] = str(e)
        else:
            if op.verb in ACCESS_VERBS:
                entry["verdict"] = "allowed" if result else "denied"
            else:
                entry["verdict"] = "ok"
                if result is not None:
                    entry["result"] = result
        entry["cycles"] = round(self.kernel.ledger.since(mark), 6)
        self.report.ops.append(entry)
        return entry

    def finish(self) -> Report:
        r = self.report
        ledger = self.kernel.ledger
        r.cost_total = ledger.total
        r.cost_per_thread = ledger.per_thread()
        r.cost_per_op = ledger.per_op()
        if self.manager is not None:
            r.cache = self.manager.stats()
            r.metadata_bytes = self.manager.metadata_bytes
        else:
            r.cache = {"lookups": 0, "hits": 0, "misses": 0, "evictions": 0}
        return r

    # verbs

    def _do_init(self, thread, rate=None):
        self.manager = mpk_init(self.kernel, self.evict_rate if rate is None else rate, thread)

    def _do_mmap(self, thread, label, length, perm):
        if label in self.regions:
            raise errors.VkeyInUse(f"region @{label} already mapped")
        if self.mode == "managed":
            span = self._mgr().mpk_mmap(thread, label, length, perm)
        else:
            if length <= 0:
                raise ValueError("mmap length must be positive")
            span = self.kernel.mmap(thread, -(-length // PAGE_SIZE), perm)
        self.regions[label] = [span]
        self._set_intent([span], perm)
        return str(span)

    def _do_munmap(self, thread, label):
        spans = self._region(label)
        if self.mode == "managed":
            self._mgr().mpk_munmap(thread, label)
        else:
            for s in spans:
                self.kernel.munmap(s)
        self._set_intent(spans, None)
        del self.regions[label]

    def _do_begin(self, thread, vkey, right):
        self._mgr().mpk_begin(thread, vkey, right)
        self._set_intent(self._region(vkey), None)

    def _do_end(self, thread, vkey):
        self._mgr().mpk_end(thread, vkey)

    def _do_mprotect(self, thread, vkey, perm):
        self._mgr().mpk_mprotect(thread, vkey, perm)
        self._set_intent(self._region(vkey), perm)

    def _do_malloc(self, thread, vkey, size, name):
        if name in self.chunks:
            raise ValueError(f"chunk name {name!r} already used")
        h = self._mgr().mpk_malloc(vkey, size)
        self.chunks[name] = h
        return h.offset

    def _do_free(self, thread, name):
        if name not in self.chunks:
            raise errors.UnknownChunk(f"no chunk named {name!r}")
        self._mgr().mpk_free(self.chunks[name])

    def _access(self, thread, target, kind: AccessKind) -> bool:
        page = self._page(target)
        allowed = self.kernel.access(thread, page, kind)
        want = self.intent.get(page)
        if want is not None and allowed != access_allowed(want, RW, kind):
            self.report.violations.append({
                "line": self._op.line, "thread": thread.tid, "page": page,
                "kind": kind.value, "observed": "allowed" if allowed else "denied"})
        return allowed

    def _do_read(self, thread, target):
        return self._access(thread, target, AccessKind.READ)

    def _do_write(self, thread, target):
        return self._access(thread, target, AccessKind.WRITE)

    def _do_fetch(self, thread, target):
        return self._access(thread, target, AccessKind.FETCH)

    def _do_raw_pkey_alloc(self, thread, right=RW):
        return self.kernel.pkey_alloc(thread, right)

    def _do_raw_pkey_free(self, thread, pkey):
        self.kernel.pkey_free(thread, pkey)

    def _do_raw_pkey_mprotect(self, thread, span, perm, pkey):
        spans = self._spans(span)
        for s in spans:
            self.kernel.pkey_mprotect(thread, s, perm, pkey)
        self._set_intent(spans, None)

    def _do_raw_mprotect(self, thread, span, perm):
        spans = self._spans(span)
        for s in spans:
            self.kernel.mprotect(thread, s, perm)
        self._set_intent(spans, perm)

    def _do_kenter(self, thread):
        self.kernel.enter_kernel(thread)

    def _do_kexit(self, thread):
        if thread.mode is not Mode.KERNEL:
            raise ValueError(f"T{thread.tid} is already in user mode")
        self.kernel.return_to_user(thread)


def replay(ops: list[TraceOp], mode: str = "managed", evict_rate: float = 1.0, seed: int = 0,
           cost: CostModel | None = None) -> Report:
    return Replayer(mode, evict_rate, seed, cost).run(ops)
