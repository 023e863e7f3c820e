from dataclasses import replace
from pathlib import Path

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from p3sync.model import LayerSpec, ModelProfile
from p3sync.sim import (
    AGGRESSIVE_COARSE,
    AGGRESSIVE_SLICED,
    COMPUTE,
    DOWNLINK,
    PRIORITY_SLICED,
    Scenario,
    ScenarioError,
    StageCost,
    TimelineEntry,
    UPDATE,
    UPLINK,
    load_scenario,
    scenario_from_dict,
    scenario_to_dict,
    simulate,
    sweep_slice_size,
)

REPO = Path(__file__).resolve().parent.parent


def tick_profile(fwd, bwd, n, name="sc"):
    return ModelProfile(name, 0, tuple(LayerSpec(i, f"L{i}", 1, fwd, bwd) for i in range(n)))


def fig4(policy):
    return Scenario(
        profile=tick_profile(1, 1, 3),
        stages=(StageCost(2, 0, 0),) * 3,
        policy=policy,
        slice_ticks=1,
        num_iterations=1,
    )


def fig6(policy):
    return Scenario(
        profile=tick_profile(0, 0, 3),
        stages=(StageCost(1, 1, 1), StageCost(3, 3, 3), StageCost(1, 1, 1)),
        policy=policy,
        slice_ticks=1,
        num_iterations=1,
    )


# hand-replayed event schedules, frozen
FIG4_AGGRESSIVE_GOLDEN = [
    (COMPUTE, "bwd:0:L2", 0, 1),
    (COMPUTE, "bwd:0:L1", 1, 2),
    (UPLINK, "up:0:L2:s0", 1, 3),
    (COMPUTE, "bwd:0:L0", 2, 3),
    (UPLINK, "up:0:L1:s0", 3, 5),
    (UPLINK, "up:0:L0:s0", 5, 7),
    (COMPUTE, "fwd:1:L0", 7, 8),
    (COMPUTE, "fwd:1:L1", 8, 9),
    (COMPUTE, "fwd:1:L2", 9, 10),
]

FIG4_PRIORITY_GOLDEN = [
    (COMPUTE, "bwd:0:L2", 0, 1),
    (COMPUTE, "bwd:0:L1", 1, 2),
    (UPLINK, "up:0:L2:s0", 1, 2),
    (COMPUTE, "bwd:0:L0", 2, 3),
    (UPLINK, "up:0:L1:s0", 2, 3),
    (UPLINK, "up:0:L0:s0", 3, 4),
    (UPLINK, "up:0:L0:s1", 4, 5),
    (COMPUTE, "fwd:1:L0", 5, 6),
    (UPLINK, "up:0:L1:s1", 5, 6),
    (COMPUTE, "fwd:1:L1", 6, 7),
    (UPLINK, "up:0:L2:s1", 6, 7),
    (COMPUTE, "fwd:1:L2", 7, 8),
]


def as_tuples(timeline):
    return [(e.resource, e.item, e.start, e.end) for e in timeline.entries]


def test_fig4_aggressive_golden_timeline():
    tl = simulate(fig4(AGGRESSIVE_COARSE))
    got = [t for t in as_tuples(tl) if t[0] in (COMPUTE, UPLINK)]
    assert sorted(got, key=lambda t: (t[2], t[3], t[0], t[1])) == sorted(
        FIG4_AGGRESSIVE_GOLDEN, key=lambda t: (t[2], t[3], t[0], t[1])
    )
    assert tl.inter_iteration_delay() == 4
    assert tl.makespan == 10
    assert tl.busy_intervals(UPLINK) == [(1, 7)]


def test_fig4_priority_golden_timeline():
    tl = simulate(fig4(PRIORITY_SLICED))
    got = [t for t in as_tuples(tl) if t[0] in (COMPUTE, UPLINK)]
    assert sorted(got, key=lambda t: (t[2], t[3], t[0], t[1])) == sorted(
        FIG4_PRIORITY_GOLDEN, key=lambda t: (t[2], t[3], t[0], t[1])
    )
    assert tl.inter_iteration_delay() == 2
    assert tl.busy_intervals(UPLINK) == [(1, 7)]
    fwd_spans = [
        (e.start, e.end) for e in tl.entries_for(COMPUTE) if e.item.startswith("fwd:1")
    ]
    assert fwd_spans == [(5, 6), (6, 7), (7, 8)]


def test_fig4_utilization():
    agg = simulate(fig4(AGGRESSIVE_COARSE))
    pri = simulate(fig4(PRIORITY_SLICED))
    assert agg.link_utilization(UPLINK) == pytest.approx(6 / 9)
    assert pri.link_utilization(UPLINK) >= agg.link_utilization(UPLINK)


def test_fig6_makespans_and_final_downlink():
    coarse = simulate(fig6(AGGRESSIVE_COARSE))
    sliced = simulate(fig6(AGGRESSIVE_SLICED))
    assert coarse.makespan == 10
    assert sliced.makespan == 7
    # the closing stretch of the coarse run is downlink-only
    spans = coarse.busy_intervals(DOWNLINK)
    assert spans[-1][1] == 10 and spans[-1][0] <= 7
    assert (10 - 7) / 10 == pytest.approx(0.3)


def test_fig6_update_overlap():
    # the heavy middle layer's update overlaps the light first layer's update
    coarse = simulate(fig6(AGGRESSIVE_COARSE))
    upd = {e.item: (e.start, e.end) for e in coarse.entries_for(UPDATE)}
    assert upd["upd:0:L1:s0"] == (4, 7)
    assert upd["upd:0:L0:s0"] == (5, 6)


def test_fig6_priority_dominates_utilization():
    coarse = simulate(fig6(AGGRESSIVE_COARSE))
    pri = simulate(fig6(PRIORITY_SLICED))
    assert pri.link_utilization(UPLINK) >= coarse.link_utilization(UPLINK)
    assert pri.link_utilization(DOWNLINK) >= coarse.link_utilization(DOWNLINK)


def test_policy_dominance_delay():
    for make in (fig4, fig6):
        agg = simulate(make(AGGRESSIVE_COARSE))
        pri = simulate(make(PRIORITY_SLICED))
        assert pri.inter_iteration_delay() <= agg.inter_iteration_delay()


def test_zero_cost_communication_zero_delay():
    sc = Scenario(
        profile=tick_profile(1, 1, 3),
        stages=(StageCost(0, 0, 0),) * 3,
        policy=AGGRESSIVE_COARSE,
        num_iterations=1,
    )
    assert simulate(sc).inter_iteration_delay() == 0


def test_shipped_scenarios_match_goldens():
    fig4_file = load_scenario(REPO / "scenarios" / "fig4.json")
    fig6_file = load_scenario(REPO / "scenarios" / "fig6.json")
    assert simulate(fig4_file).inter_iteration_delay() == 4
    assert simulate(replace(fig4_file, policy=PRIORITY_SLICED)).inter_iteration_delay() == 2
    assert simulate(fig6_file).makespan == 10
    assert simulate(replace(fig6_file, policy=AGGRESSIVE_SLICED)).makespan == 7


def test_scenario_json_roundtrip(tmp_path):
    sc = fig6(AGGRESSIVE_SLICED)
    assert scenario_from_dict(scenario_to_dict(sc)) == sc


def test_scenario_validation_errors():
    with pytest.raises(ScenarioError, match="policy"):
        fig4("whatever").validate()
    with pytest.raises(ScenarioError, match="divisible"):
        Scenario(
            profile=tick_profile(0, 0, 1),
            stages=(StageCost(3, 0, 0),),
            policy=AGGRESSIVE_SLICED,
            slice_ticks=2,
        ).validate()
    with pytest.raises(ScenarioError, match="divisible"):
        Scenario(
            profile=tick_profile(0, 0, 1),
            stages=(StageCost(4, 2, 0),),  # 4 slices, update 2 does not divide
            policy=AGGRESSIVE_SLICED,
            slice_ticks=1,
        ).validate()


# -- invariants over random scenarios ----------------------------------------


def random_scenarios(policies=(AGGRESSIVE_COARSE, AGGRESSIVE_SLICED, PRIORITY_SLICED)):
    @st.composite
    def build(draw):
        n = draw(st.integers(1, 4))
        layers = tuple(
            LayerSpec(i, f"L{i}", 1, draw(st.integers(0, 3)), draw(st.integers(0, 3)))
            for i in range(n)
        )
        ticks = draw(st.integers(1, 3))
        stages = []
        for _ in range(n):
            chunks = draw(st.integers(0, 4))
            up = ticks * chunks
            nsl = max(chunks, 1)
            stages.append(
                StageCost(up, nsl * draw(st.integers(0, 3)), nsl * draw(st.integers(0, 3)))
            )
        return Scenario(
            profile=ModelProfile("r", 0, layers),
            stages=tuple(stages),
            policy=draw(st.sampled_from(policies)),
            slice_ticks=ticks,
            num_iterations=draw(st.integers(1, 2)),
        )

    return build()


def intervals_disjoint(spans):
    spans = sorted(spans)
    return all(a[1] <= b[0] for a, b in zip(spans, spans[1:]))


@settings(max_examples=120, deadline=None)
@given(random_scenarios())
def test_serial_links_never_overlap(sc):
    tl = simulate(sc)
    for link in (UPLINK, DOWNLINK):
        spans = [(e.start, e.end) for e in tl.entries_for(link) if e.end > e.start]
        assert intervals_disjoint(spans)


@settings(max_examples=120, deadline=None)
@given(random_scenarios())
def test_causality(sc):
    tl = simulate(sc)
    by_item = {e.item: e for e in tl.entries}
    bwd_end = {}
    for e in tl.entries_for(COMPUTE):
        if e.item.startswith("bwd:"):
            _, k, lname = e.item.split(":")
            bwd_end[(int(k), int(lname[1:]))] = e.end
    for e in tl.entries_for(UPLINK):
        _, k, lname, s = e.item.split(":")
        assert e.start >= bwd_end[(int(k), int(lname[1:]))]
    for e in tl.entries_for(UPDATE):
        up = by_item.get(e.item.replace("upd:", "up:"))
        if up is not None:
            assert e.start >= up.end
    for e in tl.entries_for(DOWNLINK):
        upd = by_item.get(e.item.replace("down:", "upd:"))
        if upd is not None:
            assert e.start >= upd.end


@settings(max_examples=120, deadline=None)
@given(random_scenarios())
def test_determinism(sc):
    assert simulate(sc).entries == simulate(sc).entries


@settings(max_examples=120, deadline=None)
@given(random_scenarios())
def test_work_conservation_uplink(sc):
    tl = simulate(sc)
    # eligibility: slices of layer l become available at bwd end; the uplink
    # must never sit idle across a tick where an unserved slice was available
    bwd_end = {}
    for e in tl.entries_for(COMPUTE):
        if e.item.startswith("bwd:"):
            _, k, lname = e.item.split(":")
            bwd_end[(int(k), int(lname[1:]))] = e.end
    starts = {}
    for e in tl.entries_for(UPLINK):
        _, k, lname, s = e.item.split(":")
        starts[(int(k), int(lname[1:]), int(s[1:]))] = e.start
    busy = tl.busy_intervals(UPLINK)

    def link_busy_at(t):
        return any(s <= t < e for s, e in busy)

    for (k, l, s), started in starts.items():
        for t in range(bwd_end[(k, l)], started):
            assert link_busy_at(t), f"uplink idle at {t} while {(k, l, s)} waited"


# -- slice-size sweep ---------------------------------------------------------


def single_layer_scenario(cost, policy, overhead=0, slice_ticks=1):
    return Scenario(
        profile=tick_profile(1, 1, 1),
        stages=(StageCost(cost, cost, cost),),
        policy=policy,
        slice_ticks=slice_ticks,
        num_iterations=1,
        per_slice_overhead=overhead,
    )


@settings(max_examples=60, deadline=None)
@given(
    st.integers(1, 4),
    st.integers(1, 3),
    st.sampled_from([AGGRESSIVE_SLICED, PRIORITY_SLICED]),
)
def test_sweep_monotone_without_overhead_single_layer(m, t, policy):
    sc = single_layer_scenario(6 * t * m, policy, overhead=0, slice_ticks=6 * t)
    sizes = [6 * t, 3 * t, 2 * t, t]
    makespans = [ms for _, ms in sweep_slice_size(sc, sizes)]
    assert all(a >= b for a, b in zip(makespans, makespans[1:]))


@settings(max_examples=60, deadline=None)
@given(random_scenarios(policies=(AGGRESSIVE_SLICED,)), st.integers(1, 1))
def test_sweep_monotone_without_overhead_fifo(sc, _):
    base = max((st_.up for st_ in sc.stages), default=0)
    if base == 0:
        return
    ticks = sc.slice_ticks
    sizes = sorted({d * ticks for d in (6, 3, 2, 1) if all(
        st_.up % (d * ticks) == 0 and
        (st_.update % max(st_.up // (d * ticks), 1) == 0) and
        (st_.down % max(st_.up // (d * ticks), 1) == 0)
        for st_ in sc.stages if st_.up > 0
    )}, reverse=True)
    if len(sizes) < 2:
        return
    makespans = [ms for _, ms in sweep_slice_size(sc, sizes)]
    assert all(a >= b for a, b in zip(makespans, makespans[1:]))


def test_sweep_interior_minimum_with_overhead():
    cost = 60
    sc = single_layer_scenario(cost, PRIORITY_SLICED, overhead=1)
    sizes = [60, 30, 20, 15, 12, 10, 6, 5, 4, 3, 2, 1]
    table = sweep_slice_size(sc, sizes)
    makespans = [ms for _, ms in table]
    best = min(makespans)
    assert makespans[0] > best      # coarse strictly worse than the optimum
    assert makespans[-1] > best     # tiniest slices strictly worse too
    assert min(table, key=lambda kv: kv[1])[0] not in (sizes[0], sizes[-1])


def test_sweep_degenerate_single_slice_equals_coarse():
    cost = 8
    sliced = single_layer_scenario(cost, AGGRESSIVE_SLICED, slice_ticks=cost)
    coarse = single_layer_scenario(cost, AGGRESSIVE_COARSE)
    assert sweep_slice_size(sliced, [cost])[0][1] == simulate(coarse).makespan


def test_serial_update_variant_runs():
    sc = replace(fig6(AGGRESSIVE_COARSE), serial_update=True)
    tl = simulate(sc)
    spans = [(e.start, e.end) for e in tl.entries_for(UPDATE) if e.end > e.start]
    assert intervals_disjoint(spans)
    assert tl.makespan >= 10


def test_multi_iteration_delays():
    sc = replace(fig4(AGGRESSIVE_COARSE), num_iterations=3)
    tl = simulate(sc)
    delays = tl.all_inter_iteration_delays()
    assert len(delays) == 3
    assert all(d == 4 for d in delays)


def test_timeline_csv_shape():
    tl = simulate(fig4(AGGRESSIVE_COARSE))
    lines = tl.to_csv().strip().splitlines()
    assert lines[0] == "resource,item,start,end"
    assert len(lines) == len(tl.entries) + 1


def test_empty_link_utilization():
    tl = simulate(fig4(AGGRESSIVE_COARSE))
    assert tl.link_utilization(DOWNLINK) == 0.0
