import sys

import pytest

from worldenv import config


TINY = {
    "explore_episodes": "12",
    "rl_contexts": "8",
    "eval_episodes": "10",
    "bc.steps": "40",
    "scale.steps": "20",
    "worldsim.steps": "40",
    "worldsim.hidden": "32",
    "reflector.epochs": "1",
    "reflector.max_frames": "400",
    "rl.iterations": "2",
    "rl.buffer_size": "16",
}


@pytest.fixture
def tiny_cfg(tmp_path):
    """A configuration small enough to run the whole pipeline in a few seconds."""
    return config.from_flat({**TINY, "out": str(tmp_path / "run")})


def pytest_terminal_summary(terminalreporter):
    """Print the acceptance verdicts, one line per criterion."""
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
