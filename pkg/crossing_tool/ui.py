import os

from rich.console import Console
from rich.progress import BarColumn, Progress, TextColumn, TimeRemainingColumn

FORCE_TERMINAL_ENV = "CROSSING_FORCE_TERMINAL"


def force_terminal_setting() -> bool | None:
    """``CROSSING_FORCE_TERMINAL=1`` keeps colour and live progress when output is piped; ``0`` turns them off."""
    value = os.environ.get(FORCE_TERMINAL_ENV, "").strip().lower()
    if value in {"1", "true", "yes"}:
        return True
    if value in {"0", "false", "no"}:
        return False
    return None


console = Console(log_time=True, log_path=False, force_terminal=force_terminal_setting())


def make_progress() -> Progress:
    return Progress(
        TextColumn("[bold green]{task.description}"),
        BarColumn(bar_width=None),
        "[progress.percentage]{task.percentage:>3.0f}%",
        TimeRemainingColumn(),
        console=console,
    )
