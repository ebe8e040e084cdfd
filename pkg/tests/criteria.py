"""Shared record of acceptance results, printed again in the terminal summary."""

RESULTS = {}


def record_criterion(number, ok, detail):
    line = f"criterion {number}: {'PASS' if ok else 'FAIL'} - {detail}"
    RESULTS[number] = line
    print(line, flush=True)
    return ok
