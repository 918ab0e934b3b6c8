from __future__ import annotations

import logging
import sys

from rich.console import Console
from rich.logging import RichHandler
from rich.markup import escape

from aglp._command_line import Command, _COMMANDS
from aglp._errors import (
    ConfigurationError,
    ContractError,
    DimensionError,
    PrototypeUndefinedError,
    TrainingAborted,
)

logger = logging.getLogger("aglp")

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_CONFIGURATION = 2
EXIT_ABORTED = 3

RUNTIME_ERRORS = (TrainingAborted, DimensionError, ContractError, PrototypeUndefinedError)


def configure_logging(console: Console, verbose: bool = False) -> None:
    handler = RichHandler(console=console, show_path=verbose, rich_tracebacks=True)
    root = logging.getLogger()
    for previous in [h for h in root.handlers if isinstance(h, RichHandler)]:
        root.removeHandler(previous)
    root.addHandler(handler)
    root.setLevel(logging.DEBUG if verbose else logging.INFO)


def main(argv: list[str] | None = None, console: Console | None = None) -> int:
    """Dispatch ``aglp COMMAND ARGS...`` and map the outcome to an exit code."""
    args = list(sys.argv[1:] if argv is None else argv)
    verbose = False
    for flag in ("-v", "--verbose"):
        while flag in args:
            args.remove(flag)
            verbose = True

    console = console or Console()
    configure_logging(Console(stderr=True), verbose)

    if not args:
        args = ["help"]
    name, rest = args[0], args[1:]
    command = Command.load_command(name)
    if command is None:
        console.print(
            f"[red]unknown command[/] {escape(name)!r}, "
            f"expected one of: {', '.join(_COMMANDS)}"
        )
        return EXIT_CONFIGURATION

    try:
        return command.run(console, rest)
    except ConfigurationError as error:
        console.print(f"[b red]configuration error:[/] {escape(str(error))}")
        return EXIT_CONFIGURATION
    except RUNTIME_ERRORS as error:
        console.print(f"[b red]aborted:[/] {escape(str(error))}")
        return EXIT_ABORTED
    except KeyboardInterrupt:
        console.print("[dim]interrupted; rerun with --resume to continue[/]")
        return EXIT_FAILURE
    except Exception:
        logger.exception("%s failed", name)
        return EXIT_FAILURE


def run() -> None:
    sys.exit(main())


if __name__ == "__main__":
    run()
