"""Shared fixtures and the acceptance-summary reporting hook."""

from __future__ import annotations

import pytest

from proxguard.crypto import CommutativeGroup

# Fixed 511-bit safe prime: small enough to keep exponentiation-heavy tests
# fast, large enough to exercise the multi-limb arithmetic paths.
TEST_PRIME_HEX = (
    "62cc962179fe53bd0c4c41633dc714eb3ea1d61c9b7937f1ecb8ccb21dd3fa8f"
    "f8aff5a0960f18198a35ea524699897185af39eaff3fffe7c1618e1146216873"
)

ACCEPTANCE_LINES: list[str] = []


@pytest.fixture(scope="session")
def test_group() -> CommutativeGroup:
    return CommutativeGroup(int(TEST_PRIME_HEX, 16))


@pytest.fixture
def record_criterion():
    """Collect one summary line per acceptance criterion for the final report."""

    def _record(number: int, title: str, passed: bool, detail: str) -> None:
        status = "PASS" if passed else "FAIL"
        ACCEPTANCE_LINES.append(f"criterion {number} ({title}): {status} - {detail}")

    return _record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for line in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(line)
