"""Shared pytest plumbing: an acceptance-criteria summary table.

Tests named ``test_criterion_<nn>_*`` are collected into a per-criterion
pass/fail line printed after the normal pytest summary, so a full run ends
with one verdict per acceptance criterion.
"""
from __future__ import annotations

import re

_CRITERION = re.compile(r"test_criterion_(\d+)")

_LABELS = {
    1: "lumped-capacitance heating oracle (2%, <10 s)",
    2: "von Mises unit states (1e-12)",
    3: "P2 affine patch test (1e-8)",
    4: "free thermal expansion is stress-free (1e-6 scale)",
    5: "rotating solid cylinder vs analytic (5%, <2 min)",
    6: "stress superposition and spin-rate scaling (1e-9)",
    7: "constrained optimizer unit suite",
    8: "end-to-end schedule optimization (>=5% below ramp)",
    9: "argmax-location stability (<=3 distinct nodes)",
    10: "gradient evaluation accounting (exactly 40)",
}

_outcomes: dict[int, list[tuple[str, str]]] = {}


def pytest_runtest_logreport(report):
    match = _CRITERION.search(report.nodeid)
    if not match:
        return
    # skips surface in setup, real results in call
    if report.when == "call" or (report.when == "setup" and report.skipped):
        num = int(match.group(1))
        _outcomes.setdefault(num, []).append((report.nodeid, report.outcome))


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    terminalreporter.write_sep("-", "acceptance criteria")
    for num in sorted(_outcomes):
        results = [outcome for _, outcome in _outcomes[num]]
        if any(r == "failed" for r in results):
            verdict = "FAIL"
        elif any(r == "passed" for r in results):
            verdict = "PASS"
        else:
            verdict = "SKIPPED"
        extra = ""
        if verdict == "PASS" and any(r == "skipped" for r in results):
            skipped = sum(1 for r in results if r == "skipped")
            extra = f" ({skipped} variant(s) skipped)"
        label = _LABELS.get(num, "")
        terminalreporter.write_line(
            f"criterion {num:2d}: {verdict}{extra}  - {label}"
        )
