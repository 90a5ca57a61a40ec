"""Exception hierarchy shared by every pmgmra module."""


class GmraError(Exception):
    """Base class for all pmgmra errors."""


class InvalidInput(GmraError, ValueError):
    pass


class FormatError(GmraError, ValueError):
    """A file or stream does not follow its binary layout."""


# -- shelf store -------------------------------------------------------------

class ShelfError(GmraError):
    pass


class AlreadyExists(ShelfError, FileExistsError):
    pass


class CapacityError(ShelfError):
    pass


class CorruptionError(ShelfError):
    pass


class NameExists(ShelfError, KeyError):
    pass


class NotFound(ShelfError, KeyError):
    pass


class TxError(ShelfError):
    pass


class SimulatedCrash(ShelfError):
    """Raised by the fault injector once its byte budget is spent."""


# -- cover tree / transform --------------------------------------------------

class DuplicatePoint(InvalidInput):
    def __init__(self, first, second):
        self.first = int(first)
        self.second = int(second)
        super().__init__(f"points {self.first} and {self.second} are identical")


class CoefficientError(GmraError, ValueError):
    pass
