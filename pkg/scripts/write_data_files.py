#!/usr/bin/env python3
"""Regenerate the shipped profile and scenario files from their in-code definitions."""

from pathlib import Path

from p3sync.model import BUILTIN_NAMES, LayerSpec, ModelProfile, builtin_profile, save_profile
from p3sync.sim import AGGRESSIVE_COARSE, Scenario, StageCost, save_scenario

ROOT = Path(__file__).resolve().parent.parent


def tick_profile(name: str, fwd: int, bwd: int, n_layers: int) -> ModelProfile:
    layers = tuple(LayerSpec(i, f"L{i}", 1, fwd, bwd) for i in range(n_layers))
    return ModelProfile(name=name, seed=0, layers=layers)


def main() -> None:
    profiles_dir = ROOT / "profiles"
    scenarios_dir = ROOT / "scenarios"
    profiles_dir.mkdir(exist_ok=True)
    scenarios_dir.mkdir(exist_ok=True)

    for name in BUILTIN_NAMES:
        save_profile(builtin_profile(name), profiles_dir / f"{name}.json")
        print(f"wrote profiles/{name}.json")

    # 3 layers, 1-tick compute per direction, 2-tick uplink per layer,
    # instant update/downlink; slices of 1 tick
    fig4 = Scenario(
        name="fig4",
        profile=tick_profile("fig4", fwd=1, bwd=1, n_layers=3),
        stages=(StageCost(2, 0, 0),) * 3,
        policy=AGGRESSIVE_COARSE,
        slice_ticks=1,
        num_iterations=1,
    )
    save_scenario(fig4, scenarios_dir / "fig4.json")
    print("wrote scenarios/fig4.json")

    # 3 layers, zero compute (everything eligible immediately, emitted
    # final-to-initial), middle layer 3x heavier on every stage
    fig6 = Scenario(
        name="fig6",
        profile=tick_profile("fig6", fwd=0, bwd=0, n_layers=3),
        stages=(StageCost(1, 1, 1), StageCost(3, 3, 3), StageCost(1, 1, 1)),
        policy=AGGRESSIVE_COARSE,
        slice_ticks=1,
        num_iterations=1,
    )
    save_scenario(fig6, scenarios_dir / "fig6.json")
    print("wrote scenarios/fig6.json")


if __name__ == "__main__":
    main()
