import os
import sys

sys.path.insert(0, os.path.dirname(__file__))

import helpers  # noqa: E402


def pytest_terminal_summary(terminalreporter):
    if not helpers.ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(helpers.ACCEPTANCE):
        status, title, detail = helpers.ACCEPTANCE[n]
        terminalreporter.write_line(f"AC{n:<2} {status}  {title}" + (f"  [{detail}]" if detail else ""))
