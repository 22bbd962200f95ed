"""Service-time benchmark: N clients against a sequential vs threaded responder.

The responder sleeps ``work_ms`` per request and echoes; sleeping rather than
spinning isolates the architecture comparison from the core count.  Sequential
mode handles connections one at a time on the accept thread, concurrent mode
spawns one handler thread per connection.  Per-client times are measured on
the responder side (accept-to-reply), so in sequential mode they sum to about
the total and in concurrent mode the largest one is about the total.
"""

from __future__ import annotations

import statistics
import threading
import time
from dataclasses import dataclass, field

from .transport import ConnectionClosed, TimedOut, connect, listen
from .wire import Frame, MsgKind

SEQUENTIAL = "sequential"
CONCURRENT = "concurrent"


class BenchError(Exception):
    """A client failed its echo round trip; the whole run is invalid."""


@dataclass
class BenchConfig:
    n_clients: int
    work_ms: float
    mode: str
    repetitions: int = 3

    def __post_init__(self):
        if self.n_clients < 1:
            raise ValueError("n_clients must be >= 1")
        if self.work_ms < 0:
            raise ValueError("work_ms must be >= 0")
        if self.mode not in (SEQUENTIAL, CONCURRENT):
            raise ValueError(f"mode must be {SEQUENTIAL!r} or {CONCURRENT!r}")
        if self.repetitions < 3:
            raise ValueError("repetitions must be >= 3 for a meaningful median")


@dataclass
class BenchReport:
    mode: str
    n_clients: int
    work_ms: float
    totals_ms: list[float]
    per_client_ms: list[list[float]] = field(default_factory=list)
    speedup: float | None = None

    @property
    def median_total_ms(self) -> float:
        return statistics.median(self.totals_ms)

    def to_lines(self) -> list[str]:
        lines = [
            f"mode={self.mode}",
            f"clients={self.n_clients}",
            f"work_ms={self.work_ms:g}",
            "totals_ms=" + ",".join(f"{t:.2f}" for t in self.totals_ms),
            f"median_total_ms={self.median_total_ms:.2f}",
        ]
        if self.speedup is not None:
            lines.append(f"speedup={self.speedup:.2f}")
        return lines

    def to_csv(self) -> str:
        rows = ["rep,total_ms"]
        rows += [f"{i},{t:.3f}" for i, t in enumerate(self.totals_ms)]
        return "\n".join(rows) + "\n"


class _EchoResponder:
    """Loopback responder that sleeps work_ms then echoes one request."""

    def __init__(self, work_ms: float, concurrent: bool):
        self.work_ms = work_ms
        self.concurrent = concurrent
        self.listener = listen("127.0.0.1:0")
        self.addr = self.listener.addr
        self.handle_times_ms: list[float] = []
        self._times_lock = threading.Lock()
        self._stop = threading.Event()
        self._handlers: list[threading.Thread] = []
        self._thread = threading.Thread(target=self._accept_loop, daemon=True)

    def start(self) -> None:
        self._thread.start()

    def stop(self) -> None:
        self._stop.set()
        self.listener.close()
        self._thread.join()
        for h in self._handlers:
            h.join()

    def _accept_loop(self) -> None:
        while not self._stop.is_set():
            try:
                endpoint = self.listener.accept(0.05)
            except TimedOut:
                continue
            except ConnectionClosed:
                return
            if self.concurrent:
                handler = threading.Thread(target=self._handle, args=(endpoint,), daemon=True)
                self._handlers.append(handler)
                handler.start()
            else:
                self._handle(endpoint)

    def _handle(self, endpoint) -> None:
        start = time.perf_counter()
        try:
            frame = endpoint.recv_frame(10.0)
            time.sleep(self.work_ms / 1000.0)
            endpoint.send_frame(Frame(MsgKind.ECHO_REPLY, frame.payload))
            with self._times_lock:
                self.handle_times_ms.append((time.perf_counter() - start) * 1000.0)
        except (TimedOut, ConnectionClosed):
            pass
        finally:
            endpoint.close()


def _one_repetition(n_clients: int, work_ms: float, concurrent: bool) -> tuple[float, list[float]]:
    responder = _EchoResponder(work_ms, concurrent)
    responder.start()
    barrier = threading.Barrier(n_clients + 1)
    failures: list[str] = []

    def client(i: int) -> None:
        payload = b"req-%d" % i
        barrier.wait()
        try:
            endpoint = connect(responder.addr, timeout=10.0)
            endpoint.send_frame(Frame(MsgKind.ECHO, payload))
            reply = endpoint.recv_frame(60.0)
            if reply.kind is not MsgKind.ECHO_REPLY or reply.payload != payload:
                failures.append(f"client {i}: bad reply {reply.kind.name}")
            endpoint.close()
        except Exception as exc:  # noqa: BLE001 - report and abort the bench
            failures.append(f"client {i}: {exc}")

    threads = [threading.Thread(target=client, args=(i,)) for i in range(n_clients)]
    for t in threads:
        t.start()
    barrier.wait()
    started = time.perf_counter()
    for t in threads:
        t.join()
    total_ms = (time.perf_counter() - started) * 1000.0
    responder.stop()
    if failures:
        raise BenchError("; ".join(failures))
    return total_ms, list(responder.handle_times_ms)


def run_service_bench(config: BenchConfig) -> BenchReport:
    """Run the echo bench for one mode; wall totals per repetition."""
    totals: list[float] = []
    per_client: list[list[float]] = []
    for _ in range(config.repetitions):
        total_ms, client_ms = _one_repetition(
            config.n_clients, config.work_ms, config.mode == CONCURRENT
        )
        totals.append(total_ms)
        per_client.append(client_ms)
    return BenchReport(config.mode, config.n_clients, config.work_ms, totals, per_client)


def compare_modes(n_clients: int, work_ms: float, repetitions: int = 3) -> tuple[BenchReport, BenchReport]:
    """Run both modes and fill in the sequential/concurrent speedup."""
    seq = run_service_bench(BenchConfig(n_clients, work_ms, SEQUENTIAL, repetitions))
    conc = run_service_bench(BenchConfig(n_clients, work_ms, CONCURRENT, repetitions))
    speedup = seq.median_total_ms / conc.median_total_ms if conc.median_total_ms > 0 else None
    conc.speedup = speedup
    return seq, conc
