"""Deterministic unreliable-datagram simulator.

Time is a logical tick counter supplied by the caller, and all randomness
comes from a seeded xorshift64* generator, so a given (config, push sequence,
tick sequence) always produces the same deliveries bit for bit.  The channel
can lose, delay, duplicate, and corrupt datagrams; with every knob at zero it
is a perfect FIFO pipe.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass

_U64 = (1 << 64) - 1
_MULT = 0x2545F4914F6CDD1D
_TWO64 = 1 << 64


class ZeroSeedError(Exception):
    """xorshift64* has no zero state; seed must be nonzero."""


def rng_next(state: int) -> tuple[int, int]:
    """Advance the xorshift64* generator one step.

    Recurrence: x ^= x >> 12; x ^= x << 25; x ^= x >> 27;
    output = x * 0x2545F4914F6CDD1D (mod 2^64).

    Returns:
        (new_state, output).

    Raises:
        ZeroSeedError: on state 0 (the generator's only fixed point).
    """
    if state == 0:
        raise ZeroSeedError("rng state must be nonzero")
    x = state & _U64
    x ^= x >> 12
    x ^= (x << 25) & _U64
    x ^= x >> 27
    return x, (x * _MULT) & _U64


@dataclass(frozen=True)
class ChannelConfig:
    """Impairment knobs. Probabilities are in [0, 1]; delay is in ticks."""

    loss_prob: float = 0.0
    dup_prob: float = 0.0
    corrupt_prob: float = 0.0
    max_delay: int = 0
    seed: int = 1

    def __post_init__(self):
        for name in ("loss_prob", "dup_prob", "corrupt_prob"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {p}")
        if self.max_delay < 0:
            raise ValueError("max_delay must be >= 0")
        if not 0 <= self.seed <= _U64:
            raise ValueError("seed must fit in 64 bits")


@dataclass(frozen=True)
class InFlight:
    """A scheduled datagram waiting for its delivery tick."""

    payload: bytes
    deliver_at: int


class LossyChannel:
    """One-directional datagram pipe with seeded loss/delay/dup/corruption.

    A channel instance is single-threaded: it is owned and driven by one
    simulation loop (or guarded externally).
    """

    def __init__(self, config: ChannelConfig):
        if config.seed == 0:
            raise ZeroSeedError("channel seed must be nonzero")
        self.config = config
        self._state = config.seed
        self._heap: list[tuple[int, int, bytes]] = []
        self._counter = 0

    def _draw(self) -> int:
        self._state, out = rng_next(self._state)
        return out

    def _chance(self, prob: float) -> bool:
        # Integer threshold so prob=0 never fires and prob=1 always does.
        return self._draw() < int(prob * _TWO64)

    def _uniform(self, n: int) -> int:
        # Uniform integer in {0..n-1} from one draw.
        return (self._draw() * n) >> 64

    def push(self, payload: bytes, now: int) -> None:
        """Submit a datagram at tick ``now``.

        Draws happen in a fixed order per push -- loss, delay, duplicate,
        (duplicate delay,) corruption -- so traces stay reproducible across
        refactors.  Corruption XORs one byte of the original copy with a
        nonzero mask; a duplicate is a pristine copy of the pushed bytes,
        inserted after the original.
        """
        if self._chance(self.config.loss_prob):
            return
        delay = self._uniform(self.config.max_delay + 1)
        dup_delay = None
        if self._chance(self.config.dup_prob):
            dup_delay = self._uniform(self.config.max_delay + 1)
        delivered = bytes(payload)
        if self._chance(self.config.corrupt_prob) and delivered:
            index = self._uniform(len(delivered))
            mask = 1 + self._uniform(255)
            mutated = bytearray(delivered)
            mutated[index] ^= mask
            delivered = bytes(mutated)
        self.schedule(delivered, now + delay)
        if dup_delay is not None:
            self.schedule(bytes(payload), now + dup_delay)

    def schedule(self, payload: bytes, deliver_at: int) -> None:
        """Queue a datagram for a specific tick, bypassing the impairment draws."""
        heapq.heappush(self._heap, (deliver_at, self._counter, bytes(payload)))
        self._counter += 1

    def pop_ready(self, now: int) -> list[bytes]:
        """Remove and return every datagram due by ``now``.

        Ordered by (deliver_at, insertion order).
        """
        out = []
        while self._heap and self._heap[0][0] <= now:
            out.append(heapq.heappop(self._heap)[2])
        return out

    @property
    def pending(self) -> int:
        return len(self._heap)

    def in_flight(self) -> list[InFlight]:
        """Snapshot of everything still scheduled, in delivery order."""
        return [InFlight(p, t) for t, _, p in sorted(self._heap)]
