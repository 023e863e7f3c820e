"""Training-loop emulator: fake compute, synthetic gradients, wire synchronization.

The worker sleeps for each layer's declared forward/backward duration,
produces deterministic gradients, and pushes them to the parameter servers.
In p3 mode all slices of a layer enter one priority outbox atomically and a
single consumer thread sends the most urgent slice next; in baseline mode
slices go straight to per-server FIFO queues in generation order and updated
parameters are fetched with notify+pull. Forward progress of each layer is
gated on having received that layer's parameters for the current iteration,
so the next forward pass overlaps with the tail of synchronization whenever
the arrival order allows it.
"""

from __future__ import annotations

import threading
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .hashing import GradGen, fnv1a64
from .metrics import (
    DEFAULT_SAMPLE_PERIOD_MS,
    NetCounters,
    NetSampler,
    iterations_to_csv,
    samples_to_csv,
    write_text,
)
from .model import ModelProfile
from .plan import P3_MODE, SliceKey, SlicePlan
from .proto import Frame, MsgType, ProtocolError, pack_f32
from .queues import DeadlockError, FrameQueue
from .transport import FrameConnection, Shaper, connect_with_retry

DEFAULT_DEADLOCK_TIMEOUT = 60.0


@dataclass
class WorkerConfig:
    rank: int
    mode: str
    servers: list[tuple[str, int]]
    iterations: int
    lr: float = 0.1
    batch_size: int = 32
    throttle_rate: float | None = None
    throttle_burst: int = 50 * 1024
    deadlock_timeout: float = DEFAULT_DEADLOCK_TIMEOUT
    sample_period_ms: int = DEFAULT_SAMPLE_PERIOD_MS


@dataclass
class IterationRecord:
    start: float
    fwd_spans: list[tuple[float, float]] = field(default_factory=list)
    bwd_spans: list[tuple[float, float]] = field(default_factory=list)
    wall_ms: float = 0.0
    sync_end: float | None = None


class TrainingWorker:
    def __init__(self, config: WorkerConfig, profile: ModelProfile, plan: SlicePlan) -> None:
        if plan.mode != config.mode:
            raise ValueError(f"plan mode {plan.mode!r} != worker mode {config.mode!r}")
        self.cfg = config
        self.profile = profile
        self.plan = plan
        self.gen = GradGen(profile.seed)
        self.params = [np.zeros(l.param_count, dtype=np.float32) for l in profile.layers]
        self.num_layers = profile.num_layers
        # flags[l] == k: layer l holds the parameters needed by forward pass k
        self.flags = [0] * self.num_layers
        self._flag_cond = threading.Condition()
        self.slice_info = {s.key: s for s in plan.slices}
        self.slices_by_layer = {
            l.index: plan.slices_of_layer(l.index) for l in profile.layers
        }
        self._recv_seen: dict[int, set[SliceKey]] = {l: set() for l in range(self.num_layers)}
        self._recv_elems: dict[int, int] = {l: 0 for l in range(self.num_layers)}
        self.sync_end_times: dict[int, float] = {}
        self.records: list[IterationRecord] = []

        self.counters = NetCounters()
        self.sampler = NetSampler(self.counters, period_ms=config.sample_period_ms)
        self._shaper = Shaper(config.throttle_rate, config.throttle_burst)
        self.recv_inbox = FrameQueue(priority_mode=(config.mode == P3_MODE))
        if config.mode == P3_MODE:
            self.outbox = FrameQueue(priority_mode=True)
            self.server_outboxes: dict[int, FrameQueue] = {}
        else:
            self.outbox = None
            self.server_outboxes = {
                s: FrameQueue(priority_mode=False) for s in range(len(config.servers))
            }
        self._conns: dict[int, FrameConnection] = {}
        self._threads: list[threading.Thread] = []
        self._errors: list[BaseException] = []
        self._stopping = threading.Event()
        self._finished = threading.Event()
        self._sleep_debt = 0.0

    # -- plumbing --------------------------------------------------------

    def _guard(self, fn, *args):
        try:
            fn(*args)
        except BaseException as exc:  # noqa: BLE001 - surfaced from run()
            self._abort(exc)

    def _abort(self, exc: BaseException) -> None:
        if self._stopping.is_set():
            return
        self._errors.append(exc)
        self._stopping.set()
        self.recv_inbox.close()
        for q in self._all_outboxes():
            q.close()
        for conn in self._conns.values():
            conn.close()
        with self._flag_cond:
            self._flag_cond.notify_all()

    def _all_outboxes(self) -> list[FrameQueue]:
        return ([self.outbox] if self.outbox is not None else []) + list(
            self.server_outboxes.values()
        )

    def _spawn(self, name: str, fn, *args) -> None:
        t = threading.Thread(target=self._guard, args=(fn, *args), name=name, daemon=True)
        t.start()
        self._threads.append(t)

    def _connect_all(self) -> None:
        for srank, (host, port) in enumerate(self.cfg.servers):
            sock = connect_with_retry(host, port)
            conn = FrameConnection(sock, counters=self.counters, shaper=self._shaper)
            conn.send_frame(Frame(msg_type=MsgType.HELLO, worker_rank=self.cfg.rank))
            self._conns[srank] = conn
            self._spawn(f"recv-{srank}", self._receiver, conn)
        if self.cfg.mode == P3_MODE:
            self._spawn("sender", self._priority_sender)
        else:
            for srank in self.server_outboxes:
                self._spawn(f"sender-{srank}", self._fifo_sender, srank)
        self._spawn("applier", self._applier)

    # -- send path ---------------------------------------------------------

    def _push_descriptor(self, iteration: int, key: SliceKey) -> Frame:
        # payload is synthesized at send time, so queued slices stay cheap and
        # a preempting slice never waits behind another slice's serialization
        sl = self.slice_info[key]
        return Frame(
            msg_type=MsgType.PUSH,
            priority=sl.priority,
            iteration=iteration,
            worker_rank=self.cfg.rank,
            layer_index=key.layer_index,
            slice_index=key.slice_index,
            offset=sl.offset,
        )

    def _materialize(self, frame: Frame) -> Frame:
        if frame.msg_type != MsgType.PUSH:
            return frame
        sl = self.slice_info[SliceKey(frame.layer_index, frame.slice_index)]
        grads = self.gen.block(frame.iteration, frame.layer_index, sl.offset, sl.length)
        return replace(frame, payload=pack_f32(grads))

    def enqueue_layer(self, layer_index: int, iteration: int) -> None:
        frames = [
            self._push_descriptor(iteration, s.key) for s in self.slices_by_layer[layer_index]
        ]
        if self.cfg.mode == P3_MODE:
            self.outbox.put_batch(frames)
        else:
            for f in frames:
                server = self.slice_info[SliceKey(f.layer_index, f.slice_index)].server
                self.server_outboxes[server].put(f)

    def _priority_sender(self) -> None:
        while True:
            frame = self.outbox.poll(timeout=self.cfg.deadlock_timeout * 2)
            if frame is None:
                return
            server = self.slice_info[SliceKey(frame.layer_index, frame.slice_index)].server
            self._conns[server].send_frame(self._materialize(frame))

    def _fifo_sender(self, server_rank: int) -> None:
        q = self.server_outboxes[server_rank]
        while True:
            frame = q.poll(timeout=self.cfg.deadlock_timeout * 2)
            if frame is None:
                return
            self._conns[server_rank].send_frame(self._materialize(frame))

    # -- receive path --------------------------------------------------------

    def _receiver(self, conn: FrameConnection) -> None:
        while True:
            try:
                frame = conn.recv_frame(timeout=self.cfg.deadlock_timeout * 2)
            except OSError:
                if self._finished.is_set() or self._stopping.is_set():
                    return
                raise
            if frame is None:
                return
            self.recv_inbox.put(frame)

    def _applier(self) -> None:
        while True:
            frame = self.recv_inbox.poll(timeout=self.cfg.deadlock_timeout * 2)
            if frame is None:
                return
            if frame.msg_type == MsgType.BCAST:
                self.on_bcast(frame)
            elif frame.msg_type == MsgType.NOTIFY:
                self._on_notify(frame)
            else:
                raise ProtocolError(f"worker got unexpected {frame.msg_type.name}")

    def _on_notify(self, frame: Frame) -> None:
        key = SliceKey(frame.layer_index, frame.slice_index)
        server = self.slice_info[key].server
        self.server_outboxes[server].put(
            Frame(
                msg_type=MsgType.PULL,
                priority=frame.priority,
                iteration=frame.iteration,
                worker_rank=self.cfg.rank,
                layer_index=key.layer_index,
                slice_index=key.slice_index,
                offset=frame.offset,
            )
        )

    def on_bcast(self, frame: Frame) -> None:
        key = SliceKey(frame.layer_index, frame.slice_index)
        sl = self.slice_info.get(key)
        if sl is None:
            raise ProtocolError(f"BCAST for unknown key {key}")
        layer = key.layer_index
        if frame.iteration != self.flags[layer]:
            raise ProtocolError(
                f"layer {layer}: BCAST for iteration {frame.iteration}, "
                f"worker holds parameters of iteration {self.flags[layer]}"
            )
        if key in self._recv_seen[layer]:
            raise ProtocolError(f"duplicate BCAST slice {key} at iteration {frame.iteration}")
        values = frame.payload_f32()
        if len(values) != sl.length:
            raise ProtocolError(
                f"slice {key}: payload holds {len(values)} values, expected {sl.length}"
            )
        self.params[layer][sl.offset : sl.offset + sl.length] = values
        self._recv_seen[layer].add(key)
        self._recv_elems[layer] += sl.length
        if self._recv_elems[layer] == self.profile.layers[layer].param_count:
            self._recv_seen[layer].clear()
            self._recv_elems[layer] = 0
            with self._flag_cond:
                self.flags[layer] = frame.iteration + 1
                if min(self.flags) == frame.iteration + 1:
                    self.sync_end_times[frame.iteration] = time.monotonic()
                self._flag_cond.notify_all()

    # -- compute loop ------------------------------------------------------

    def _check_errors(self) -> None:
        if self._errors:
            raise self._errors[0]

    def _wait_layer(self, layer: int, iteration: int) -> None:
        deadline = time.monotonic() + self.cfg.deadlock_timeout
        with self._flag_cond:
            while self.flags[layer] < iteration and not self._errors:
                remaining = deadline - time.monotonic()
                if remaining <= 0:
                    raise DeadlockError(self._deadlock_dump(iteration))
                self._flag_cond.wait(min(remaining, 1.0))
        self._check_errors()

    def _wait_all(self, iteration: int) -> None:
        for layer in range(self.num_layers):
            self._wait_layer(layer, iteration)

    def _deadlock_dump(self, iteration: int) -> str:
        unmet = [l for l in range(self.num_layers) if self.flags[l] < iteration]
        return (
            f"worker {self.cfg.rank} stalled waiting for iteration-{iteration} parameters; "
            f"unmet layers {unmet}; flags={self.flags}; "
            f"recv_inbox={len(self.recv_inbox)} outbox={[len(q) for q in self._all_outboxes()]}"
        )

    def _emulate(self, duration_us: int) -> None:
        # sleep() overshoot is carried as debt so emulated compute tracks the
        # declared durations; otherwise workers drift apart by tens of ms per
        # iteration and stall each other at every aggregation rendezvous
        if duration_us <= 0:
            return
        target = duration_us / 1e6
        t0 = time.perf_counter()
        request = target - self._sleep_debt
        if request > 0:
            time.sleep(request)
        self._sleep_debt += (time.perf_counter() - t0) - target

    def run_iteration(self, iteration: int) -> IterationRecord:
        rec = IterationRecord(start=time.monotonic())
        for layer in self.profile.layers:
            self._wait_layer(layer.index, iteration)
            t0 = time.monotonic()
            self._emulate(layer.fwd_time)
            rec.fwd_spans.append((t0, time.monotonic()))
        for layer in reversed(self.profile.layers):
            t0 = time.monotonic()
            self._emulate(layer.bwd_time)
            rec.bwd_spans.append((t0, time.monotonic()))
            self.enqueue_layer(layer.index, iteration)
        self.records.append(rec)
        return rec

    def run(self) -> None:
        self.sampler.start()
        self._connect_all()
        try:
            for k in range(self.cfg.iterations):
                self.run_iteration(k)
                self._check_errors()
            self._wait_all(self.cfg.iterations)
            self._finished.set()
            self._shutdown_clean()
        except BaseException as exc:
            self._abort(exc)
            raise
        finally:
            self.sampler.stop()
        self._check_errors()

    def _shutdown_clean(self) -> None:
        for q in self._all_outboxes():
            q.close()
        for t in self._threads:
            if t.name.startswith("sender"):
                t.join(timeout=self.cfg.deadlock_timeout)
        for conn in self._conns.values():
            conn.send_frame(Frame(msg_type=MsgType.FIN, worker_rank=self.cfg.rank))
        for conn in self._conns.values():
            conn.close()
        for t in self._threads:
            if t.name.startswith("recv"):
                t.join(timeout=self.cfg.deadlock_timeout)
        self.recv_inbox.close()
        for t in self._threads:
            if t.name == "applier":
                t.join(timeout=self.cfg.deadlock_timeout)
        # iteration wall times: period between forward-pass starts; the last
        # iteration ends when its synchronization drains
        starts = [r.start for r in self.records]
        final_end = self.sync_end_times.get(self.cfg.iterations - 1, time.monotonic())
        for i, rec in enumerate(self.records):
            end = starts[i + 1] if i + 1 < len(starts) else final_end
            rec.wall_ms = (end - rec.start) * 1000.0
            rec.sync_end = self.sync_end_times.get(i)

    # -- outputs -----------------------------------------------------------

    def params_digest(self) -> int:
        h = 0xCBF29CE484222325
        for vec in self.params:
            h = fnv1a64(pack_f32(vec), h)
        return h

    def params_bytes(self) -> bytes:
        return b"".join(pack_f32(vec) for vec in self.params)

    def write_outputs(self, outdir: str | Path, dump_params: bool = False) -> None:
        outdir = Path(outdir)
        rank = self.cfg.rank
        write_text(outdir / f"net_util_worker{rank}.csv", samples_to_csv(self.sampler.samples))
        starts_ms = [(r.start - self.sampler.t0) * 1000.0 for r in self.records]
        write_text(
            outdir / f"throughput_worker{rank}.csv",
            iterations_to_csv([r.wall_ms for r in self.records], starts_ms),
        )
        write_text(outdir / f"digest_worker{rank}.txt", f"{self.params_digest():016x}\n")
        if dump_params:
            (outdir / f"params_worker{rank}.bin").write_bytes(self.params_bytes())
