"""Simulator for virtualized Intel MPK protection keys."""

from .cost import CostLedger, CostModel
from .errors import *  # noqa: F401,F403
from .heap import ChunkHandle
from .hw import (NA, PERM_NONE, PERM_R, PERM_RW, PERM_RWX, PERM_RX, PERM_X, RO, RW,
                 AccessKind, AccessRight, Machine, PagePerm, Pkru, ThreadContext)
from .kernel import Kernel, Span
from .manager import VkeyManager, mpk_init
from .trace import Report, TraceOp, parse_trace, replay

__version__ = "0.1.0"
