"""Exception hierarchy shared by every layer of fpm."""


class FpmError(Exception):
    """Base class for all errors raised by fpm."""


# store

class InvalidDigest(FpmError):
    pass


class InvalidName(FpmError):
    pass


class IoError(FpmError, OSError):
    pass


class ClosureViolation(FpmError):
    pass


class StoreBusy(FpmError):
    pass


# derivations

class ReservedKey(FpmError):
    pass


class ParseError(FpmError):
    def __init__(self, message, line=None, col=None):
        self.message = message
        self.line = line
        self.col = col
        where = f" at line {line}, column {col}" if line is not None else ""
        super().__init__(f"{message}{where}")


class UnknownField(FpmError):
    pass


class MissingField(FpmError):
    def __init__(self, field, location=None):
        self.field = field
        self.location = location
        where = f" ({location})" if location else ""
        super().__init__(f"missing required field '{field}'{where}")


class DependencyCycle(FpmError):
    def __init__(self, members):
        self.members = list(members)
        super().__init__("dependency cycle: " + " -> ".join(map(str, self.members)))


# build engine

class BuildFailed(FpmError):
    def __init__(self, message, log=""):
        self.log = log
        super().__init__(message)


class MissingOutput(BuildFailed):
    pass


class ImpurityDetected(BuildFailed):
    def __init__(self, message, offending=(), log=""):
        self.offending = list(offending)
        super().__init__(message, log)


class BuilderNotExecutable(BuildFailed):
    pass


class HashMismatch(BuildFailed):
    def __init__(self, expected, actual):
        self.expected = expected
        self.actual = actual
        super().__init__(f"hash mismatch: expected {expected}, got {actual}")


# build language

class EvalError(FpmError):
    pass


class UnboundVariable(EvalError):
    def __init__(self, name):
        self.name = name
        super().__init__(f"unbound variable: {name}")


class ArityError(EvalError):
    pass


class WrongType(EvalError, TypeError):
    """A builtin received an argument of the wrong type."""


class InvokeFailed(EvalError):
    def __init__(self, program, status):
        self.program = program
        self.status = status
        super().__init__(f"{program} exited with status {status}")


class RegexError(EvalError):
    pass


class KeyNotFound(EvalError):
    pass


class NotSerializable(FpmError):
    pass


class ModuleNotFound(FpmError):
    pass


# packages and build systems

class UnknownBuildSystem(FpmError):
    pass


class ArgumentError(FpmError):
    pass


class PackageNotFound(FpmError):
    pass


class DuplicatePackage(FpmError):
    pass


# profiles

class NotInstalled(FpmError):
    pass


class EmptyTransaction(FpmError):
    pass


class NothingToRollBack(FpmError):
    pass
