"""Per-layer parameter assignments shared by latency, search, and the CLI."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

from .failure import DerTarget
from .params import HEParams


@dataclass(frozen=True)
class LayerAssignment:
    layer_index: int
    target: DerTarget
    params: HEParams
    implied_rate: float  # estimated failure rate at these params

    def describe(self) -> str:
        return (f"L{self.layer_index}: d={self.target.d} "
                f"log_q={self.params.log_q:.1f} log_n={self.params.log_n}")


@dataclass(frozen=True)
class PolicyAssignment:
    """One full per-layer parameter policy plus its measured qualities."""

    name: str
    assignments: tuple
    estimated_latency: float | None = None  # seconds, linear layers
    accuracy: float | None = None
    episode: int | None = None
    clipped_layers: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "assignments", tuple(self.assignments))

    def assignment_for(self, layer_index: int) -> LayerAssignment:
        for a in self.assignments:
            if a.layer_index == layer_index:
                return a
        raise KeyError(layer_index)

    def with_fields(self, **kw) -> "PolicyAssignment":
        return replace(self, **kw)
