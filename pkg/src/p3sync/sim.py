"""Deterministic discrete-event simulator of one worker/server synchronization pipeline.

Four resources are modeled: an emulated compute device (forward/backward
chains), a serial uplink, an update stage (per-key concurrent by default),
and a serial downlink. Gradients of a layer become uplink-eligible when its
backward step finishes; the next forward of a layer waits for all of its
slices to complete the downlink. All times are integer ticks.

Policies:
  aggressive-coarse  -- whole layers, links serve in generation (FIFO) order
  aggressive-sliced  -- slices of ``slice_ticks`` granularity, FIFO order
  priority-sliced    -- same slicing, links serve the most urgent slice first
"""

from __future__ import annotations

import heapq
import io
import json
from dataclasses import dataclass, field, replace
from pathlib import Path

from .model import ModelProfile, profile_from_dict, profile_to_dict
from .plan import SliceKey, priority_sort_key

AGGRESSIVE_COARSE = "aggressive-coarse"
AGGRESSIVE_SLICED = "aggressive-sliced"
PRIORITY_SLICED = "priority-sliced"
POLICIES = (AGGRESSIVE_COARSE, AGGRESSIVE_SLICED, PRIORITY_SLICED)

COMPUTE = "compute"
UPLINK = "uplink"
UPDATE = "update"
DOWNLINK = "downlink"


class ScenarioError(ValueError):
    pass


@dataclass(frozen=True)
class StageCost:
    up: int
    update: int
    down: int


@dataclass(frozen=True)
class Scenario:
    profile: ModelProfile
    stages: tuple[StageCost, ...]
    policy: str
    slice_ticks: int = 1
    num_iterations: int = 1
    per_slice_overhead: int = 0
    serial_update: bool = False
    name: str = ""

    def validate(self) -> None:
        self.profile.validate()
        if self.policy not in POLICIES:
            raise ScenarioError(f"unknown policy {self.policy!r}")
        if len(self.stages) != self.profile.num_layers:
            raise ScenarioError("stages must align with profile layers")
        if self.slice_ticks < 1 or self.num_iterations < 1 or self.per_slice_overhead < 0:
            raise ScenarioError("slice_ticks/num_iterations/per_slice_overhead out of range")
        for layer, st in zip(self.profile.layers, self.stages):
            if min(st.up, st.update, st.down) < 0:
                raise ScenarioError(f"layer {layer.index}: negative stage cost")
            n = self.num_slices(layer.index)
            if st.up % max(n, 1) or st.update % n or st.down % n:
                raise ScenarioError(
                    f"layer {layer.index}: stage costs {st} not divisible into {n} slices"
                )

    def num_slices(self, layer_index: int) -> int:
        st = self.stages[layer_index]
        if self.policy == AGGRESSIVE_COARSE or st.up == 0:
            return 1
        if st.up % self.slice_ticks:
            raise ScenarioError(
                f"layer {layer_index}: up cost {st.up} not divisible by slice_ticks {self.slice_ticks}"
            )
        return st.up // self.slice_ticks

    def chunk_costs(self, layer_index: int) -> StageCost:
        n = self.num_slices(layer_index)
        st = self.stages[layer_index]
        return StageCost(st.up // n, st.update // n, st.down // n)


def scenario_to_dict(sc: Scenario) -> dict:
    return {
        "name": sc.name,
        "policy": sc.policy,
        "slice_ticks": sc.slice_ticks,
        "num_iterations": sc.num_iterations,
        "per_slice_overhead": sc.per_slice_overhead,
        "serial_update": sc.serial_update,
        "profile": profile_to_dict(sc.profile),
        "stages": [{"up": s.up, "update": s.update, "down": s.down} for s in sc.stages],
    }


def scenario_from_dict(obj: dict) -> Scenario:
    try:
        sc = Scenario(
            profile=profile_from_dict(obj["profile"]),
            stages=tuple(StageCost(int(s["up"]), int(s["update"]), int(s["down"])) for s in obj["stages"]),
            policy=str(obj["policy"]),
            slice_ticks=int(obj.get("slice_ticks", 1)),
            num_iterations=int(obj.get("num_iterations", 1)),
            per_slice_overhead=int(obj.get("per_slice_overhead", 0)),
            serial_update=bool(obj.get("serial_update", False)),
            name=str(obj.get("name", "")),
        )
    except (KeyError, TypeError) as exc:
        raise ScenarioError(f"malformed scenario: {exc}") from exc
    sc.validate()
    return sc


def load_scenario(path: str | Path) -> Scenario:
    try:
        obj = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ScenarioError(f"{path}: not valid JSON: {exc}") from exc
    return scenario_from_dict(obj)


def save_scenario(sc: Scenario, path: str | Path) -> None:
    Path(path).write_text(json.dumps(scenario_to_dict(sc), indent=2) + "\n")


@dataclass(frozen=True)
class TimelineEntry:
    resource: str
    item: str
    start: int
    end: int


@dataclass
class Timeline:
    entries: list[TimelineEntry] = field(default_factory=list)

    @property
    def makespan(self) -> int:
        return max((e.end for e in self.entries), default=0)

    def entries_for(self, resource: str) -> list[TimelineEntry]:
        return [e for e in self.entries if e.resource == resource]

    def busy_intervals(self, resource: str) -> list[tuple[int, int]]:
        spans = sorted(
            (e.start, e.end) for e in self.entries_for(resource) if e.end > e.start
        )
        merged: list[tuple[int, int]] = []
        for s, e in spans:
            if merged and s <= merged[-1][1]:
                merged[-1] = (merged[-1][0], max(merged[-1][1], e))
            else:
                merged.append((s, e))
        return merged

    def link_utilization(self, link: str) -> float:
        spans = self.busy_intervals(link)
        if not spans:
            return 0.0
        busy = sum(e - s for s, e in spans)
        span = self.makespan - spans[0][0]
        return busy / span if span else 0.0

    def compute_event(self, kind: str, iteration: int, layer: int) -> TimelineEntry | None:
        item = f"{kind}:{iteration}:L{layer}"
        for e in self.entries:
            if e.resource == COMPUTE and e.item == item:
                return e
        return None

    def inter_iteration_delay(self) -> int:
        delays = self.all_inter_iteration_delays()
        if not delays:
            raise ValueError("timeline holds no bwd->next-fwd pair for layer 0")
        return delays[-1]

    def all_inter_iteration_delays(self) -> list[int]:
        delays = []
        k = 0
        while True:
            b = self.compute_event("bwd", k, 0)
            f = self.compute_event("fwd", k + 1, 0)
            if b is None or f is None:
                break
            delays.append(f.start - b.end)
            k += 1
        return delays

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("resource,item,start,end\n")
        for e in sorted(self.entries, key=lambda e: (e.start, e.end, e.resource, e.item)):
            buf.write(f"{e.resource},{e.item},{e.start},{e.end}\n")
        return buf.getvalue()

    def summary(self) -> dict:
        out = {"makespan": self.makespan}
        try:
            out["inter_iteration_delay"] = self.inter_iteration_delay()
        except ValueError:
            pass
        out["uplink_utilization"] = round(self.link_utilization(UPLINK), 6)
        out["downlink_utilization"] = round(self.link_utilization(DOWNLINK), 6)
        return out


# event kinds, in within-tick processing order
_BOOT, _FWD_DONE, _BWD_DONE, _UP_DONE, _UPDATE_DONE, _DOWN_DONE = range(6)


@dataclass
class _LinkState:
    busy: bool = False
    pending: list = field(default_factory=list)  # (arrival, iteration, layer, slice)
    arrivals: int = 0

    def enqueue(self, iteration: int, layer: int, sl: int) -> None:
        self.pending.append((self.arrivals, iteration, layer, sl))
        self.arrivals += 1

    def pick(self, policy: str) -> tuple[int, int, int]:
        if policy == PRIORITY_SLICED:
            key = lambda it: (*priority_sort_key(it[2], SliceKey(it[2], it[3])), it[1], it[0])
        else:
            key = lambda it: it[0]
        best = min(self.pending, key=key)
        self.pending.remove(best)
        return best[1], best[2], best[3]


def simulate(scenario: Scenario) -> Timeline:
    scenario.validate()
    L = scenario.profile.num_layers
    n_iter = scenario.num_iterations
    fwd_time = [l.fwd_time for l in scenario.profile.layers]
    bwd_time = [l.bwd_time for l in scenario.profile.layers]
    n_slices = [scenario.num_slices(i) for i in range(L)]
    chunks = [scenario.chunk_costs(i) for i in range(L)]
    ovh = scenario.per_slice_overhead

    def up_cost(layer: int) -> int:
        c = chunks[layer].up
        return c + ovh if c > 0 else 0

    def down_cost(layer: int) -> int:
        c = chunks[layer].down
        return c + ovh if c > 0 else 0

    entries: list[TimelineEntry] = []
    events: list[tuple[int, int, int, int, int]] = []  # (tick, kind, iteration, layer, slice)
    heapq.heappush(events, (0, _BOOT, 0, 0, 0))

    uplink = _LinkState()
    downlink = _LinkState()
    update_link = _LinkState()  # used only when serial_update

    bwd_ready: set[tuple[int, int]] = set()
    fwd_chain_ok: set[tuple[int, int]] = set()
    fwd_params_ok: set[tuple[int, int]] = set()
    fwd_started: set[tuple[int, int]] = set()
    down_remaining = {(k, l): n_slices[l] for k in range(n_iter) for l in range(L)}

    def start_ready_computes(t: int) -> None:
        while bwd_ready:
            k, l = min(bwd_ready)
            bwd_ready.discard((k, l))
            entries.append(TimelineEntry(COMPUTE, f"bwd:{k}:L{l}", t, t + bwd_time[l]))
            heapq.heappush(events, (t + bwd_time[l], _BWD_DONE, k, l, 0))
            if bwd_time[l] > 0:
                break  # completion arrives later; chain resumes then
        for k in range(1, n_iter + 1):
            for l in range(L):
                key = (k, l)
                if key in fwd_started or key not in fwd_chain_ok or key not in fwd_params_ok:
                    continue
                fwd_started.add(key)
                entries.append(TimelineEntry(COMPUTE, f"fwd:{k}:L{l}", t, t + fwd_time[l]))
                heapq.heappush(events, (t + fwd_time[l], _FWD_DONE, k, l, 0))

    def into_update(t: int, k: int, l: int, s: int) -> None:
        cost = chunks[l].update
        if cost == 0:
            heapq.heappush(events, (t, _UPDATE_DONE, k, l, s))
        elif scenario.serial_update:
            update_link.enqueue(k, l, s)
        else:
            entries.append(TimelineEntry(UPDATE, f"upd:{k}:L{l}:s{s}", t, t + cost))
            heapq.heappush(events, (t + cost, _UPDATE_DONE, k, l, s))

    def handle(ev: tuple[int, int, int, int, int]) -> None:
        t, kind, k, l, s = ev
        if kind == _BOOT:
            bwd_ready.add((0, L - 1))
        elif kind == _BWD_DONE:
            for sl in range(n_slices[l]):
                if up_cost(l) == 0:
                    heapq.heappush(events, (t, _UP_DONE, k, l, sl))
                else:
                    uplink.enqueue(k, l, sl)
            if l > 0:
                bwd_ready.add((k, l - 1))
            else:
                fwd_chain_ok.add((k + 1, 0))
        elif kind == _FWD_DONE:
            if l < L - 1:
                fwd_chain_ok.add((k, l + 1))
            elif k < n_iter:
                bwd_ready.add((k, L - 1))
        elif kind == _UP_DONE:
            uplink.busy = False if up_cost(l) > 0 else uplink.busy
            into_update(t, k, l, s)
        elif kind == _UPDATE_DONE:
            if scenario.serial_update and chunks[l].update > 0:
                update_link.busy = False
            if down_cost(l) == 0:
                heapq.heappush(events, (t, _DOWN_DONE, k, l, s))
            else:
                downlink.enqueue(k, l, s)
        elif kind == _DOWN_DONE:
            downlink.busy = False if down_cost(l) > 0 else downlink.busy
            down_remaining[(k, l)] -= 1
            if down_remaining[(k, l)] == 0:
                fwd_params_ok.add((k + 1, l))

    def dispatch_links(t: int) -> None:
        if not uplink.busy and uplink.pending:
            k, l, s = uplink.pick(scenario.policy)
            uplink.busy = True
            entries.append(TimelineEntry(UPLINK, f"up:{k}:L{l}:s{s}", t, t + up_cost(l)))
            heapq.heappush(events, (t + up_cost(l), _UP_DONE, k, l, s))
        if scenario.serial_update and not update_link.busy and update_link.pending:
            k, l, s = update_link.pick(scenario.policy)
            update_link.busy = True
            cost = chunks[l].update
            entries.append(TimelineEntry(UPDATE, f"upd:{k}:L{l}:s{s}", t, t + cost))
            heapq.heappush(events, (t + cost, _UPDATE_DONE, k, l, s))
        if not downlink.busy and downlink.pending:
            k, l, s = downlink.pick(scenario.policy)
            downlink.busy = True
            entries.append(TimelineEntry(DOWNLINK, f"down:{k}:L{l}:s{s}", t, t + down_cost(l)))
            heapq.heappush(events, (t + down_cost(l), _DOWN_DONE, k, l, s))

    while events:
        t = events[0][0]
        while events and events[0][0] == t:
            batch = []
            while events and events[0][0] == t:
                batch.append(heapq.heappop(events))
            for ev in batch:
                handle(ev)
            start_ready_computes(t)
        dispatch_links(t)

    timeline = Timeline(entries=sorted(entries, key=lambda e: (e.start, e.end, e.resource, e.item)))
    return timeline


def sweep_slice_size(scenario: Scenario, sizes: list[int]) -> list[tuple[int, int]]:
    """Makespan per slice granularity; scenario policy and costs held fixed."""
    out = []
    for size in sizes:
        variant = replace(scenario, slice_ticks=size)
        out.append((size, simulate(variant).makespan))
    return out
