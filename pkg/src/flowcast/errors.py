"""Exception hierarchy shared by the library and the command line tools.

Each class maps to a process exit code so scripted callers can branch on
the failure kind without parsing messages.
"""


class FlowcastError(Exception):
    """Base class for all errors raised by this package."""

    exit_code = 1


class InputError(FlowcastError):
    """Malformed external input: files, config keys, command line values."""

    exit_code = 2


class ContractError(FlowcastError):
    """A precondition or interface contract was violated by the caller."""

    exit_code = 3


class NumericError(FlowcastError):
    """A numerical failure: non-finite loss, domain error, divergence."""

    exit_code = 4
