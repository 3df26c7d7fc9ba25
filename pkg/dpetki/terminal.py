import sys

from colorama import just_fix_windows_console, Fore, Style

# Fix Windows console to properly display ANSI color codes
just_fix_windows_console()

BOLD_ON = Style.BRIGHT + Fore.RED
BOLD_OFF = Style.NORMAL + Fore.RESET

# Warnings are yellow, errors bright red with a label so they survive
# terminals without colour.
WARN_ON = Fore.YELLOW
WARN_OFF = Fore.RESET
ERROR_ON = Style.BRIGHT + Fore.RED
ERROR_OFF = Style.NORMAL + Fore.RESET


def bold(text):
    """Convert text to Colorama bold format"""
    return BOLD_ON + text + BOLD_OFF


def warn(message, *, file=sys.stderr):
    """Print a warning line. Does nothing if file is None."""
    if file is None:
        return
    print(f"{WARN_ON}warning:{WARN_OFF} {message}", file=file)


def error(message, *, file=sys.stderr):
    """Print an error line. Does nothing if file is None."""
    if file is None:
        return
    print(f"{ERROR_ON}error:{ERROR_OFF} {message}", file=file)


def stage(name, *, file=sys.stdout):
    """Print a bold stage header."""
    if file is None:
        return
    print(bold(f"## {name}"), file=file)


def show_params(*, file=sys.stdout, **params):
    """Display parameters as aligned ``- key: value`` lines.

    Args:
        file: File object to write output to (default: sys.stdout)
        **params: Parameters to display, in the order given
    """
    # Do nothing if file is None
    if file is None or not params:
        return

    # Find the maximum key length for alignment
    max_key_len = max(len(k) for k in params)

    for k, v in params.items():
        print(f"- {k:<{max_key_len}}: {v}", file=file)
