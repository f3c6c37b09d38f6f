"""Collects one verdict line per acceptance criterion for the session summary."""
from __future__ import annotations

RESULTS: list[str] = []


def verdict(number: int, title: str, ok: bool, detail: str) -> bool:
    line = f"criterion {number} {'PASS' if ok else 'FAIL'}: {title} ({detail})"
    RESULTS.append(line)
    print(line, flush=True)
    return ok
