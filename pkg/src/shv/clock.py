"""Injectable clocks: wall time for daemons, a virtual clock for tests."""

import threading
import time

NS_PER_S = 1_000_000_000
NS_PER_MS = 1_000_000


class RealClock:
    virtual = False

    def now_ns(self) -> int:
        return time.time_ns()

    def sleep_until(self, t_ns: int, stop: threading.Event = None):
        delay = (t_ns - time.time_ns()) / NS_PER_S
        if delay <= 0:
            return
        if stop is not None:
            stop.wait(delay)
        else:
            time.sleep(delay)


class SimClock:
    """Manually advanced clock. Time never goes backwards."""

    virtual = True

    def __init__(self, start_ns: int = 0):
        self._now = start_ns

    def now_ns(self) -> int:
        return self._now

    def set(self, t_ns: int):
        if t_ns < self._now:
            raise ValueError("simulated time cannot go backwards")
        self._now = t_ns

    def advance(self, delta_ns: int):
        self.set(self._now + delta_ns)

    def sleep_until(self, t_ns: int, stop=None):
        if t_ns > self._now:
            self._now = t_ns
