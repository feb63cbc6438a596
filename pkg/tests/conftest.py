import pytest

from knode_mpc import cli

# a pipeline small enough to run in seconds
REDUCED = [
    "--set", "trajectories.duration=1.0",
    "--set", "train.epochs=20",
    "--set", "trajectories.prediction=[{kind: circle, radius: 2.0}, {kind: lemniscate, radius: 2.0}]",
    "--set", "trajectories.tracking=[{kind: circle, radius: 1.0}]",
]


@pytest.fixture(scope="session")
def default_run(tmp_path_factory):
    """The full default study (about four minutes), run once per session."""
    out = tmp_path_factory.mktemp("default")
    assert cli.run(["run-all", "-q", "--out", str(out)]) == 0
    return out


# one line per acceptance criterion, filled by test_acceptance.py
ACCEPTANCE = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE):
            terminalreporter.write_line(line)
