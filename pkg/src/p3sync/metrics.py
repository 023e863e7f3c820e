"""Runtime measurement: byte counters sampled on a fixed cadence, throughput reports.

Counters are maintained in-process where frames hit the socket, not read from
the OS interface; a sampler thread snapshots them every 10 ms by default and
the resulting series feeds the idle-time analysis.
"""

from __future__ import annotations

import csv
import io
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path

IN = "in"
OUT = "out"

DEFAULT_SAMPLE_PERIOD_MS = 10
DEFAULT_SKIP_ITERATIONS = 5


@dataclass(frozen=True)
class Sample:
    t_ms: int
    bytes_in: int
    bytes_out: int


class NetCounters:
    """Cumulative per-direction byte counters, safe for concurrent increment."""

    def __init__(self) -> None:
        self._lock = threading.Lock()
        self._in = 0
        self._out = 0

    def record_bytes(self, direction: str, n: int) -> None:
        with self._lock:
            if direction == IN:
                self._in += n
            elif direction == OUT:
                self._out += n
            else:
                raise ValueError(f"direction must be {IN!r} or {OUT!r}")

    def totals(self) -> tuple[int, int]:
        with self._lock:
            return self._in, self._out


class NetSampler:
    """Periodic snapshot thread over a NetCounters instance."""

    def __init__(self, counters: NetCounters, period_ms: int = DEFAULT_SAMPLE_PERIOD_MS) -> None:
        self.counters = counters
        self.period_ms = period_ms
        self.samples: list[Sample] = []
        self._stop = threading.Event()
        self._thread = threading.Thread(target=self._run, name="net-sampler", daemon=True)
        self._t0 = 0.0

    @property
    def t0(self) -> float:
        return self._t0

    def _snapshot(self, t_ms: int) -> None:
        b_in, b_out = self.counters.totals()
        self.samples.append(Sample(t_ms=t_ms, bytes_in=b_in, bytes_out=b_out))

    def _run(self) -> None:
        period_s = self.period_ms / 1000.0
        tick = 0
        while not self._stop.is_set():
            now = time.monotonic()
            # skip missed ticks instead of backfilling zero-delta samples
            tick = max(tick + 1, int((now - self._t0) / period_s) + 1)
            delay = self._t0 + tick * period_s - now
            if delay > 0:
                self._stop.wait(delay)
            if self._stop.is_set():
                break
            self._snapshot(int(round((time.monotonic() - self._t0) * 1000)))

    def start(self) -> None:
        self._t0 = time.monotonic()
        self._snapshot(0)
        self._thread.start()

    def stop(self) -> None:
        self._stop.set()
        self._thread.join(timeout=5)
        self._snapshot(int(round((time.monotonic() - self._t0) * 1000)))


def samples_to_csv(samples: list[Sample]) -> str:
    buf = io.StringIO()
    buf.write("t_ms,bytes_in,bytes_out\n")
    for s in samples:
        buf.write(f"{s.t_ms},{s.bytes_in},{s.bytes_out}\n")
    return buf.getvalue()


def samples_from_csv(text: str) -> list[Sample]:
    reader = csv.DictReader(io.StringIO(text))
    return [
        Sample(t_ms=int(r["t_ms"]), bytes_in=int(r["bytes_in"]), bytes_out=int(r["bytes_out"]))
        for r in reader
    ]


def idle_fraction(samples: list[Sample], threshold_bytes_per_sample: int) -> float:
    """Share of sample intervals with combined traffic below the threshold.

    Only intervals between the first and last interval with any activity count,
    so startup and teardown silence do not skew the figure. A run with no
    active interval at all reports 1.0.
    """
    if len(samples) < 2:
        raise ValueError("need at least two samples")
    deltas = [
        (b.bytes_in - a.bytes_in) + (b.bytes_out - a.bytes_out)
        for a, b in zip(samples, samples[1:])
    ]
    active = [i for i, d in enumerate(deltas) if d > 0]
    if not active:
        return 1.0
    window = deltas[active[0] : active[-1] + 1]
    idle = sum(1 for d in window if d < threshold_bytes_per_sample)
    return idle / len(window)


@dataclass(frozen=True)
class ThroughputReport:
    samples_per_second: float
    skip_iterations: int
    measure_iterations: int
    batch_size: int
    num_workers: int
    window_seconds: float
    iteration_wall_ms: tuple[float, ...] = field(default_factory=tuple)


def throughput(
    iteration_wall_ms: list[float],
    batch_size: int,
    num_workers: int,
    skip_iterations: int = DEFAULT_SKIP_ITERATIONS,
) -> ThroughputReport:
    measured = iteration_wall_ms[skip_iterations:]
    if not measured:
        raise ValueError(
            f"run of {len(iteration_wall_ms)} iterations is shorter than "
            f"skip={skip_iterations} plus a nonempty measurement window"
        )
    window_s = sum(measured) / 1000.0
    if window_s <= 0:
        raise ValueError("measurement window has zero duration")
    rate = len(measured) * batch_size * num_workers / window_s
    return ThroughputReport(
        samples_per_second=rate,
        skip_iterations=skip_iterations,
        measure_iterations=len(measured),
        batch_size=batch_size,
        num_workers=num_workers,
        window_seconds=window_s,
        iteration_wall_ms=tuple(iteration_wall_ms),
    )


def iterations_to_csv(iteration_wall_ms: list[float], start_ms: list[float] | None = None) -> str:
    starts = start_ms if start_ms is not None else [0.0] * len(iteration_wall_ms)
    buf = io.StringIO()
    buf.write("iteration,wall_ms,start_ms\n")
    for i, (ms, s) in enumerate(zip(iteration_wall_ms, starts)):
        buf.write(f"{i},{ms:.3f},{s:.3f}\n")
    return buf.getvalue()


def iterations_from_csv(text: str) -> list[float]:
    reader = csv.DictReader(io.StringIO(text))
    return [float(r["wall_ms"]) for r in reader]


def iteration_starts_from_csv(text: str) -> list[float]:
    reader = csv.DictReader(io.StringIO(text))
    return [float(r["start_ms"]) for r in reader]


def clip_samples(samples: list[Sample], t0_ms: float, t1_ms: float) -> list[Sample]:
    return [s for s in samples if t0_ms <= s.t_ms <= t1_ms]


def write_text(path: str | Path, text: str) -> None:
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    p.write_text(text)
