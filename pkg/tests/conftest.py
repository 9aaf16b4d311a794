import pytest

# acceptance criteria append (number, title, passed, detail) here
ACCEPTANCE = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for num, title, passed, detail in sorted(ACCEPTANCE):
        terminalreporter.write_line(f"[{'PASS' if passed else 'FAIL'}] {num}. {title}: {detail}")


@pytest.fixture
def record_criterion():
    def record(num, title, passed, detail):
        ACCEPTANCE.append((num, title, bool(passed), detail))
        print(f"[{'PASS' if passed else 'FAIL'}] {num}. {title}: {detail}")
        return passed

    return record
