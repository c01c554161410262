"""Collects one pass/fail line per acceptance criterion for the terminal summary."""
LINES: list[str] = []


def record(number: int, title: str, ok: bool, detail: str) -> None:
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {number}: {title} ({detail})"
    print(line)
    LINES.append(line)
