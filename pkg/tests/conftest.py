import os
import sys

sys.path.insert(0, os.path.dirname(__file__))


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    values = getattr(mod, "ACCEPTANCE", None)
    if not values:
        return
    terminalreporter.section("acceptance measurements")
    for key, value in values.items():
        terminalreporter.write_line(f"{key}: {value}")
