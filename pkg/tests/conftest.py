import re

CRITERIA = {
    1: "gradient suite matches central finite differences (20+ seeds, < 1 min)",
    2: "FLOPs model agrees exactly with the naive counting oracle; exit costs increase",
    3: "head attachment leaves final logits bit-identical; head-only training freezes the backbone",
    4: "exit-policy properties: q-monotonicity, q=0/q=1 equalities, calibrated budgets hold",
    5: "analysis ops match brute-force per-sample oracles on synthetic traces",
    6: "desk-scale digits run: backbone accuracy, destructive effect, ideal savings, budgeted exits",
    7: "joint training matches or beats head-only accuracy at every head",
    8: "confusion separates wrong from correct predictions better than confidence",
    9: "trigger-poisoning: final head compromised, early heads resist, exits recover accuracy",
}

_PATTERN = re.compile(r"test_criterion_(\d+)")


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    outcomes = {}
    for status in ("passed", "failed", "error"):
        for report in terminalreporter.stats.get(status, []):
            m = _PATTERN.search(getattr(report, "nodeid", ""))
            if m and getattr(report, "when", "call") == "call":
                outcomes[int(m.group(1))] = status
    if not outcomes:
        return
    terminalreporter.write_sep("-", "acceptance criteria")
    for num in sorted(CRITERIA):
        if num in outcomes:
            word = "PASS" if outcomes[num] == "passed" else "FAIL"
        else:
            word = "NOT RUN"
        terminalreporter.write_line(f"criterion {num}: {word} - {CRITERIA[num]}")
