"""Declarative model profiles: per-layer parameter counts and emulated compute times.

A profile drives both the networked workload emulator (times in microseconds)
and the discrete-event simulator (times in abstract ticks). No real math is
attached to a layer; compute is represented purely by its declared duration.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path


class ProfileError(ValueError):
    """Raised when a profile file or structure violates its invariants."""


@dataclass(frozen=True)
class LayerSpec:
    index: int
    name: str
    param_count: int
    fwd_time: int
    bwd_time: int

    def validate(self) -> None:
        if self.param_count < 1:
            raise ProfileError(f"layer {self.index} ({self.name}): param_count must be >= 1")
        if self.fwd_time < 0 or self.bwd_time < 0:
            raise ProfileError(f"layer {self.index} ({self.name}): negative compute time")


@dataclass(frozen=True)
class ModelProfile:
    name: str
    seed: int
    layers: tuple[LayerSpec, ...] = field(default_factory=tuple)

    def validate(self) -> None:
        if not self.layers:
            raise ProfileError(f"profile {self.name}: needs at least one layer")
        for pos, layer in enumerate(self.layers):
            layer.validate()
            if layer.index != pos:
                raise ProfileError(
                    f"profile {self.name}: layer {layer.name!r} has index {layer.index}, "
                    f"expected {pos}"
                )

    @property
    def num_layers(self) -> int:
        return len(self.layers)


def total_params(profile: ModelProfile) -> int:
    return sum(layer.param_count for layer in profile.layers)


def profile_to_dict(profile: ModelProfile) -> dict:
    return {
        "name": profile.name,
        "seed": profile.seed,
        "layers": [
            {
                "index": l.index,
                "name": l.name,
                "param_count": l.param_count,
                "fwd_time": l.fwd_time,
                "bwd_time": l.bwd_time,
            }
            for l in profile.layers
        ],
    }


def profile_from_dict(obj: dict) -> ModelProfile:
    try:
        raw_layers = obj["layers"]
        layers = tuple(
            LayerSpec(
                index=int(l["index"]),
                name=str(l["name"]),
                param_count=int(l["param_count"]),
                fwd_time=int(l["fwd_time"]),
                bwd_time=int(l["bwd_time"]),
            )
            for l in raw_layers
        )
        profile = ModelProfile(name=str(obj["name"]), seed=int(obj["seed"]), layers=layers)
    except (KeyError, TypeError) as exc:
        raise ProfileError(f"malformed profile object: {exc}") from exc
    profile.validate()
    return profile


def load_profile(path: str | Path) -> ModelProfile:
    path = Path(path)
    try:
        obj = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ProfileError(f"{path}: not valid JSON: {exc}") from exc
    return profile_from_dict(obj)


def save_profile(profile: ModelProfile, path: str | Path) -> None:
    Path(path).write_text(json.dumps(profile_to_dict(profile), indent=2) + "\n")


def _mk(index: int, name: str, params: int, fwd: int, bwd: int) -> LayerSpec:
    return LayerSpec(index=index, name=name, param_count=params, fwd_time=fwd, bwd_time=bwd)


def _toy3() -> ModelProfile:
    layers = tuple(_mk(i, f"layer{i}", 1024, 1000, 1000) for i in range(3))
    return ModelProfile(name="toy3", seed=42, layers=layers)


def _vgg19_like() -> ModelProfile:
    # 19 layers, 1,000,000 params total; the fc layer at index 16 holds
    # exactly 715,000 (a 0.715 share), mirroring the heavy-FC skew.
    conv_sizes = [
        2_000, 4_000, 8_000, 8_000,
        16_000, 16_000, 16_000, 16_000,
        20_000, 20_000, 20_000, 20_000,
        24_000, 24_000, 24_000, 24_000,
    ]
    layers = []
    for i, params in enumerate(conv_sizes):
        layers.append(_mk(i, f"conv{i}", params, 1400, 2100))
    # fc layers carry the parameters but almost none of the compute
    layers.append(_mk(16, "fc16", 715_000, 400, 600))
    layers.append(_mk(17, "fc17", 18_000, 300, 450))
    layers.append(_mk(18, "fc18", 5_000, 200, 300))
    return ModelProfile(name="vgg19-like", seed=19, layers=tuple(layers))


def _resnet50_like() -> ModelProfile:
    # many small conv layers, a heavier final fc
    sizes = [4_000] * 12 + [6_000] * 12 + [8_000] * 13 + [12_000] * 12
    layers = [_mk(i, f"conv{i}", p, 700, 1100) for i, p in enumerate(sizes)]
    layers.append(_mk(len(sizes), "fc", 60_000, 900, 1400))
    return ModelProfile(name="resnet50-like", seed=50, layers=tuple(layers))


def _sockeye_like() -> ModelProfile:
    # translation-model skew: the embedding at index 0 is the heaviest layer
    layers = [_mk(0, "embed", 400_000, 1800, 2600)]
    for i in range(1, 13):
        layers.append(_mk(i, f"enc{i}", 10_000, 1200, 1800))
    for i in range(13, 25):
        layers.append(_mk(i, f"dec{i}", 15_000, 1200, 1800))
    return ModelProfile(name="sockeye-like", seed=7, layers=tuple(layers))


_BUILTINS = {
    "toy3": _toy3,
    "vgg19-like": _vgg19_like,
    "resnet50-like": _resnet50_like,
    "sockeye-like": _sockeye_like,
}

BUILTIN_NAMES = tuple(sorted(_BUILTINS))


def builtin_profile(name: str) -> ModelProfile:
    try:
        factory = _BUILTINS[name]
    except KeyError:
        raise ProfileError(f"unknown builtin profile {name!r}; have {', '.join(BUILTIN_NAMES)}") from None
    profile = factory()
    profile.validate()
    return profile


def resolve_profile(name_or_path: str | Path) -> ModelProfile:
    """Load a profile from a file path, falling back to a builtin name."""
    p = Path(name_or_path)
    if p.exists():
        return load_profile(p)
    if str(name_or_path) in _BUILTINS:
        return builtin_profile(str(name_or_path))
    raise ProfileError(f"no profile file or builtin named {name_or_path!r}")
