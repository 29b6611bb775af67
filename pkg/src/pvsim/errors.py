"""Exception hierarchy shared by every simulator layer."""

from __future__ import annotations


class SimError(Exception):
    """Base class for simulated-state errors."""


class UsageError(SimError):
    """A programming bug in the caller, not a simulated fault."""


class InvalidEntry(SimError):
    """Operation requires a present page-table entry."""


class OutOfGuestMemory(SimError):
    pass


class OutOfHostMemory(SimError):
    pass


class DoubleFree(SimError):
    pass


class DoubleRegistration(SimError):
    pass


class BadState(SimError):
    """Binding-table state does not allow the requested transition."""


class UnboundGpa(SimError):
    """The guest mapped a page it never allocated."""


class AbsentEntry(SimError):
    pass


class WrongDomain(SimError):
    pass


class ContextMissing(SimError):
    pass


class MigrationInGate(SimError):
    pass


class ProtectionFault(SimError):
    """Simulated MPK violation raised by internal accessors."""


class UnknownProfile(SimError):
    pass


class InvalidParams(SimError):
    pass


class EmptySeries(SimError):
    pass


class TraceError(SimError):
    """Replay failure pinned to the offending trace op."""

    def __init__(self, index: int, cause: BaseException | str) -> None:
        self.index = index
        self.cause = cause
        super().__init__(f"op {index}: {cause}")
