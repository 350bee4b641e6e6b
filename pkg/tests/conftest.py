"""Prints one PASS/FAIL/SKIP line per acceptance criterion after the run."""

CRITERIA = {
    1: "gradient suite (per-op rel err < 1e-3, end-to-end < 1e-2, < 2 min)",
    2: "loss calibration (init loss ln(nd) +- 0.3; untrained accuracy at chance)",
    3: "pretext learnability (>= 0.99 within 2000 steps, < 10 min)",
    4: "directional transfer gain (CIFAR-10, 2% labels, 3 seeds)",
    5: "invariant suite (partition, permutations, transfer, resume)",
    6: "schedule/optimizer oracles (exact endpoints; bitwise Nesterov)",
    7: "positional factorization (7x7 grid -> 14 embedding rows)",
    8: "visualization contract (pixel-exact interiors; border colors)",
}

LABELS = {"passed": "PASS", "failed": "FAIL", "skipped": "SKIP"}


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = {}
    for status, label in LABELS.items():
        for rep in terminalreporter.stats.get(status, []):
            if "test_acceptance.py::test_criterion_" not in rep.nodeid:
                continue
            num = int(rep.nodeid.split("test_criterion_")[1].split("_")[0])
            note = ""
            if status == "skipped" and isinstance(rep.longrepr, tuple):
                note = " - " + rep.longrepr[2].removeprefix("Skipped: ")
            lines[num] = f"criterion {num}: {label} - {CRITERIA[num]}{note}"
    if lines:
        terminalreporter.section("acceptance criteria")
        for num in sorted(lines):
            terminalreporter.write_line(lines[num])
