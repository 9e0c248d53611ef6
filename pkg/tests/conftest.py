import torch

# Bit-exact reproducibility contracts assume single-threaded reductions.
torch.set_num_threads(1)

# Verdict lines recorded by tests/test_acceptance.py, replayed after the run
# (pytest captures file descriptors, so in-test prints are only shown on
# failure or under -s).
ACCEPTANCE_VERDICTS = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_VERDICTS:
            terminalreporter.write_line(line)
