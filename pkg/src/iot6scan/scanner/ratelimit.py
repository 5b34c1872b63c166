from __future__ import annotations

import asyncio
import time


# Refill arithmetic can leave a token at 0.99999...; without slack the
# waiter would request sleeps too short to move the clock.
_EPS = 1e-9


class TokenBucket:
    """Async token bucket; ``burst`` tokens at most, refilled at ``rate``/s."""

    def __init__(self, rate: float, burst: int = 1, clock=time.monotonic) -> None:
        if rate <= 0:
            raise ValueError("rate must be > 0")
        if burst < 1:
            raise ValueError("burst must be >= 1")
        self.rate = float(rate)
        self.burst = burst
        self._clock = clock
        self._tokens = float(burst)
        self._last = clock()
        self._lock = asyncio.Lock()

    def _refill(self) -> None:
        now = self._clock()
        self._tokens = min(self.burst, self._tokens + (now - self._last) * self.rate)
        self._last = now

    async def acquire(self) -> None:
        # The lock serializes waiters so tokens are handed out FIFO and the
        # bucket never goes negative.
        async with self._lock:
            while True:
                self._refill()
                if self._tokens >= 1 - _EPS:
                    self._tokens = max(0.0, self._tokens - 1)
                    return
                await asyncio.sleep((1 - self._tokens) / self.rate)
