"""Named-section stopwatch used for the generator/guidance latency split."""

import time
from collections import defaultdict
from contextlib import contextmanager


class Stopwatch:
    """Accumulates wall time per section name.

    >>> sw = Stopwatch()
    >>> with sw("generator"):
    ...     pass
    >>> sorted(sw.totals_ns)
    ['generator']
    """

    def __init__(self, clock=time.perf_counter_ns):
        self.clock = clock
        self.totals_ns = defaultdict(int)

    @contextmanager
    def __call__(self, name: str):
        start = self.clock()
        try:
            yield self
        finally:
            self.totals_ns[name] += self.clock() - start

    def ms(self, name: str) -> float:
        return self.totals_ns.get(name, 0) / 1e6

    def reset(self) -> None:
        self.totals_ns.clear()
