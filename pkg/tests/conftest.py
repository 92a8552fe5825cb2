import pathlib
import sys

sys.path.insert(0, str(pathlib.Path(__file__).parent))

from helpers import ACCEPTANCE  # noqa: E402

CRITERIA = {1: "geometry oracles", 2: "formula suite", 3: "compression law and causality",
            4: "gradient checks", 5: "zero-init ControlNet", 6: "overfit probe",
            7: "ablation direction", 8: "metric harness", 9: "scheduler traces",
            10: "determinism"}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n, name in CRITERIA.items():
        passed, detail = ACCEPTANCE.get(n, (False, "not run or did not complete"))
        terminalreporter.write_line(f"criterion {n:2d} {'PASS' if passed else 'FAIL'}  "
                                    f"{name}: {detail}")
