"""Collects one PASS/FAIL line per acceptance criterion for the session summary."""

LINES: list[str] = []


def record(number: int, name: str, ok: bool, detail: str) -> bool:
    line = f"[{'PASS' if ok else 'FAIL'}] {number:>2} {name}: {detail}"
    LINES.append(line)
    print(line)
    return ok
