"""Pass/fail lines of the acceptance criteria, shared with the conftest hook."""

LINES = {}


def record(k, ok, detail):
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {k}: {detail}"
    LINES[k] = line
    print(line)
    return ok
