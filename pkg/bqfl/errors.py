# bqfl/errors.py
from typing import Optional


class BqflError(Exception):
    """
    Base error for the simulator. Carries a human-readable detail and the
    process exit code the CLI should return when it escapes a command.
    """
    exit_code = 1

    def __init__(self, detail: str, exit_code: Optional[int] = None):
        super().__init__(detail)
        self.detail = detail
        if exit_code is not None:
            self.exit_code = exit_code


class DimensionError(BqflError, ValueError):
    pass


class ArgumentError(BqflError, ValueError):
    pass


class DataError(BqflError):
    pass


class ParseError(BqflError):
    def __init__(self, detail: str, offset: int):
        super().__init__(f"{detail} (at byte offset {offset})")
        self.message = detail
        self.offset = offset


class IntegrityError(BqflError):
    def __init__(self, detail: str, index: int):
        super().__init__(f"{detail} (block index {index})")
        self.index = index


class ConfigError(BqflError, ValueError):
    exit_code = 2
