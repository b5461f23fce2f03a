import numpy as np
import pytest

from vecoffload.radio import ChannelConfig


class ConstantChannel:
    """Channel double: every vehicle and the broadcast link see ``se`` bit/s/Hz."""

    def __init__(self, n, se=8.0, cfg=ChannelConfig(shadowing_sigma_db=0.0)):
        self.n = n
        self.se = se
        self.cfg = cfg
        self.base = 0
        self.end = 0
        self.cum_se = np.zeros((n, 1))
        self.cum_bc = np.zeros(1)

    def ensure(self, t_end):
        if self.end >= t_end:
            return
        m = max(t_end, 2 * self.end, 64)
        self.cum_se = np.tile(np.arange(m + 1) * self.se, (self.n, 1)).astype(float)
        self.cum_bc = np.arange(m + 1) * self.se
        self.end = m

    def trim(self, keep_from):
        pass

    def snr_at(self, v, t):
        return 10 * np.log10(2 ** self.se - 1)

    def speed_at(self, v, t):
        return 10.0


@pytest.fixture
def constant_channel():
    return ConstantChannel


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
