from __future__ import annotations

from argparse import ArgumentParser

from aglp._errors import ParsingError


class AglpArgParser(ArgumentParser):
    """An ArgumentParser that raises instead of printing and exiting.

    Help text lives in ``aglp help``, so ``-h`` is not registered.
    """

    def __init__(self, prog: str, **kwargs) -> None:
        super().__init__(prog=prog, add_help=False, allow_abbrev=False, **kwargs)

    def error(self, message: str):
        raise ParsingError(f"{self.prog}: {message}")

    def exit(self, status: int = 0, message: str | None = None):
        raise ParsingError(message or f"{self.prog}: stopped with status {status}")
