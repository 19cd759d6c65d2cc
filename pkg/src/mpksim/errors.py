"""Exception hierarchy shared by the simulator layers."""


class MpkError(Exception):
    """Base class for every simulated kernel or library failure."""


# kernel layer
class NoFreeKeys(MpkError):
    pass


class InvalidKey(MpkError):
    pass


class PageNotMapped(MpkError):
    pass


class OutOfPages(MpkError):
    pass


# manager layer
class NotInitialized(MpkError):
    pass


class AlreadyInitialized(MpkError):
    pass


class KernelKeysUnavailable(MpkError):
    pass


class VkeyInUse(MpkError):
    pass


class UnknownVkey(MpkError):
    pass


class GroupBusy(MpkError):
    pass


class NoEvictableKey(MpkError):
    """Every hardware key is held by a group with an open domain."""


class NotBegun(MpkError):
    pass


class ExecOnlyGroup(MpkError):
    """Thread-local domains cannot be opened on execute-only groups."""


class MetadataProtectionError(MpkError):
    """Raised when application code writes to the read-only metadata view."""


# heap layer
class OutOfSpace(MpkError):
    pass


class DoubleFree(MpkError):
    pass


class UnknownChunk(MpkError):
    pass


class TraceSyntaxError(SyntaxError):
    """Malformed trace text. ``lineno`` and ``offset`` locate the bad token."""

    def __init__(self, msg, lineno, offset, text=None):
        super().__init__(msg, ("<trace>", lineno, offset, text))

    def __str__(self):
        return f"line {self.lineno}, column {self.offset}: {self.msg}"
