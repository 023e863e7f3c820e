"""Synchronization plans: how a model's parameters are sliced, prioritized, and sharded.

Two planning modes exist. The priority mode chops every layer into chunks no
larger than ``max_slice`` and deals the chunks across servers round-robin; the
baseline mode keeps small layers whole on a randomly chosen server and splits
only layers at or above ``big_threshold`` equally across all servers. Slice
priority always equals the owning layer's forward index (0 = most urgent).
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field
from pathlib import Path

from .hashing import splitmix64_stream
from .model import ModelProfile

P3_MODE = "p3"
BASELINE_MODE = "baseline"

DEFAULT_MAX_SLICE = 50_000
DEFAULT_BIG_THRESHOLD = 1_000_000


class PlanError(ValueError):
    pass


@dataclass(frozen=True, order=True)
class SliceKey:
    layer_index: int
    slice_index: int


@dataclass(frozen=True)
class Slice:
    key: SliceKey
    offset: int
    length: int
    priority: int
    server: int


@dataclass(frozen=True)
class SlicePlan:
    mode: str
    slices: tuple[Slice, ...]
    num_servers: int
    max_slice: int = DEFAULT_MAX_SLICE
    big_threshold: int = DEFAULT_BIG_THRESHOLD
    rng_seed: int = 0

    def slices_of_layer(self, layer_index: int) -> list[Slice]:
        found = sorted(
            (s for s in self.slices if s.key.layer_index == layer_index),
            key=lambda s: s.key.slice_index,
        )
        if not found:
            raise PlanError(f"no layer {layer_index} in plan")
        return found

    def slices_on_server(self, server: int) -> list[Slice]:
        return [s for s in self.slices if s.server == server]

    def layer_indices(self) -> list[int]:
        return sorted({s.key.layer_index for s in self.slices})


def priority_sort_key(priority: int, key: SliceKey) -> tuple[int, int, int]:
    """Total-order key: lower priority value first, ties by layer then slice index."""
    return (priority, key.layer_index, key.slice_index)


def compare_priority(a: tuple[int, SliceKey], b: tuple[int, SliceKey]) -> int:
    """-1 if a transmits first, 1 if b does, 0 if identical."""
    ka = priority_sort_key(*a)
    kb = priority_sort_key(*b)
    return (ka > kb) - (ka < kb)


def _chunk_layer(param_count: int, chunk: int) -> list[tuple[int, int]]:
    """(offset, length) pairs: full-size chunks in offset order, remainder last."""
    out = []
    offset = 0
    while offset + chunk <= param_count:
        out.append((offset, chunk))
        offset += chunk
    if offset < param_count:
        out.append((offset, param_count - offset))
    return out


def make_p3_plan(
    profile: ModelProfile,
    num_servers: int,
    max_slice: int = DEFAULT_MAX_SLICE,
) -> SlicePlan:
    if num_servers < 1:
        raise PlanError("num_servers must be >= 1")
    if max_slice < 1:
        raise PlanError("max_slice must be >= 1")
    slices = []
    counter = 0
    for layer in profile.layers:
        for slice_index, (offset, length) in enumerate(_chunk_layer(layer.param_count, max_slice)):
            slices.append(
                Slice(
                    key=SliceKey(layer.index, slice_index),
                    offset=offset,
                    length=length,
                    priority=layer.index,
                    server=counter % num_servers,
                )
            )
            counter += 1
    return SlicePlan(
        mode=P3_MODE, slices=tuple(slices), num_servers=num_servers, max_slice=max_slice
    )


def make_baseline_plan(
    profile: ModelProfile,
    num_servers: int,
    big_threshold: int = DEFAULT_BIG_THRESHOLD,
    rng_seed: int = 0,
) -> SlicePlan:
    if num_servers < 1:
        raise PlanError("num_servers must be >= 1")
    slices = []
    for layer in profile.layers:
        if layer.param_count < big_threshold:
            server = splitmix64_stream(rng_seed, layer.index) % num_servers
            slices.append(
                Slice(
                    key=SliceKey(layer.index, 0),
                    offset=0,
                    length=layer.param_count,
                    priority=layer.index,
                    server=server,
                )
            )
        else:
            base = layer.param_count // num_servers
            offset = 0
            for part in range(num_servers):
                length = base if part < num_servers - 1 else layer.param_count - offset
                slices.append(
                    Slice(
                        key=SliceKey(layer.index, part),
                        offset=offset,
                        length=length,
                        priority=layer.index,
                        server=part,
                    )
                )
                offset += length
    return SlicePlan(
        mode=BASELINE_MODE,
        slices=tuple(slices),
        num_servers=num_servers,
        big_threshold=big_threshold,
        rng_seed=rng_seed,
    )


def validate_plan(plan: SlicePlan, profile: ModelProfile) -> None:
    """Check full, non-overlapping coverage of every layer (and p3 granularity)."""
    by_layer: dict[int, list[Slice]] = {}
    for s in plan.slices:
        by_layer.setdefault(s.key.layer_index, []).append(s)
    for layer in profile.layers:
        slices = sorted(by_layer.get(layer.index, []), key=lambda s: s.key.slice_index)
        if not slices:
            raise PlanError(f"layer {layer.index} not covered")
        cursor = 0
        for s in slices:
            if s.offset != cursor:
                raise PlanError(f"layer {layer.index}: gap/overlap at offset {cursor}")
            if s.length < 1:
                raise PlanError(f"layer {layer.index}: empty slice {s.key}")
            if plan.mode == P3_MODE and s.length > plan.max_slice:
                raise PlanError(f"layer {layer.index}: slice {s.key} exceeds max_slice")
            if s.priority != layer.index:
                raise PlanError(f"layer {layer.index}: slice priority {s.priority} != layer index")
            if not (0 <= s.server < plan.num_servers):
                raise PlanError(f"layer {layer.index}: bad server {s.server}")
            cursor += s.length
        if cursor != layer.param_count:
            raise PlanError(f"layer {layer.index}: covers {cursor} of {layer.param_count}")


PLAN_CSV_HEADER = "layer,slice,offset,len,priority,server"


def plan_to_csv(plan: SlicePlan) -> str:
    buf = io.StringIO()
    buf.write(
        f"# p3sync-plan mode={plan.mode} num_servers={plan.num_servers} "
        f"max_slice={plan.max_slice} big_threshold={plan.big_threshold} "
        f"rng_seed={plan.rng_seed}\n"
    )
    buf.write(PLAN_CSV_HEADER + "\n")
    for s in sorted(plan.slices, key=lambda s: (s.key.layer_index, s.key.slice_index)):
        buf.write(f"{s.key.layer_index},{s.key.slice_index},{s.offset},{s.length},{s.priority},{s.server}\n")
    return buf.getvalue()


def plan_from_csv(text: str) -> SlicePlan:
    lines = [ln.strip() for ln in text.splitlines() if ln.strip()]
    if not lines or not lines[0].startswith("# p3sync-plan "):
        raise PlanError("missing plan metadata line")
    meta = dict(kv.split("=", 1) for kv in lines[0][len("# p3sync-plan "):].split())
    if lines[1] != PLAN_CSV_HEADER:
        raise PlanError(f"bad plan header: {lines[1]!r}")
    slices = []
    for ln in lines[2:]:
        layer, sl, offset, length, priority, server = (int(x) for x in ln.split(","))
        slices.append(Slice(SliceKey(layer, sl), offset, length, priority, server))
    return SlicePlan(
        mode=meta["mode"],
        slices=tuple(slices),
        num_servers=int(meta["num_servers"]),
        max_slice=int(meta["max_slice"]),
        big_threshold=int(meta["big_threshold"]),
        rng_seed=int(meta["rng_seed"]),
    )


def load_plan(path: str | Path) -> SlicePlan:
    return plan_from_csv(Path(path).read_text())


def save_plan(plan: SlicePlan, path: str | Path) -> None:
    Path(path).write_text(plan_to_csv(plan))
