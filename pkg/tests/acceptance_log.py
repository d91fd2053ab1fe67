"""Shared record of acceptance outcomes, printed again in the terminal summary."""

RESULTS = {}


def record(criterion: int, title: str, passed: bool, detail: str = "") -> None:
    line = f"criterion {criterion} [{'PASS' if passed else 'FAIL'}] {title}" + (f": {detail}" if detail else "")
    RESULTS[criterion] = line
    print(line)
