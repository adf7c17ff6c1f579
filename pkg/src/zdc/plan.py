"""Compression plans: per-layer important-token fractions and four drop ratios."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, replace
from pathlib import Path

from .tensor import kept_width

PROSE = "prose"
AS_PRINTED = "as-printed"


@dataclass(frozen=True)
class CompressionPlan:
    g: tuple[float, ...]
    p_qk_i: float = 0.0
    p_qk_u: float = 0.0
    p_vl_i: float = 0.0
    p_vl_u: float = 0.0
    group_map: tuple[int, ...] | None = None

    def __post_init__(self):
        object.__setattr__(self, "g", tuple(float(x) for x in self.g))
        if self.group_map is not None:
            object.__setattr__(self, "group_map", tuple(int(x) for x in self.group_map))

    @classmethod
    def zero(cls, n_layers: int) -> "CompressionPlan":
        return cls(g=(1.0,) * n_layers)

    @classmethod
    def uniform(cls, n_layers: int, p: float, g: float = 1.0) -> "CompressionPlan":
        return cls(g=(g,) * n_layers, p_qk_i=p, p_qk_u=p, p_vl_i=p, p_vl_u=p)

    @property
    def n_layers(self) -> int:
        return len(self.g)

    def representative(self, layer: int) -> int:
        return layer if self.group_map is None else self.group_map[layer]

    def widths(self, head_dim: int) -> dict[str, int]:
        return {"qk_i": kept_width(head_dim, self.p_qk_i), "qk_u": kept_width(head_dim, self.p_qk_u),
                "vl_i": kept_width(head_dim, self.p_vl_i), "vl_u": kept_width(head_dim, self.p_vl_u)}

    def ratios(self) -> tuple[float, float, float, float]:
        return (self.p_qk_i, self.p_qk_u, self.p_vl_i, self.p_vl_u)

    def with_group_map(self, group_map) -> "CompressionPlan":
        return replace(self, group_map=None if group_map is None else tuple(group_map))

    def violations(self, direction: str = PROSE, strict_g: bool = False) -> list[str]:
        """Constraint violations; an empty list means the plan is feasible."""
        out = []
        for name, p in zip(("p_qk_i", "p_qk_u", "p_vl_i", "p_vl_u"), self.ratios()):
            if not 0.0 <= p < 1.0:
                out.append(f"{name}={p} outside [0, 1)")
        for l, g in enumerate(self.g):
            if not 0.0 < g <= 1.0:
                out.append(f"g[{l}]={g} outside (0, 1]")
        for l in range(self.n_layers - 1):
            a, b = self.g[l], self.g[l + 1]
            if (a >= b) if strict_g else (a > b + 1e-12):
                out.append(f"g[{l}]={a} not below g[{l + 1}]={b}")
        if direction == PROSE:
            pairs = [("p_qk_u", "p_qk_i", self.p_qk_u, self.p_qk_i),
                     ("p_vl_u", "p_vl_i", self.p_vl_u, self.p_vl_i),
                     ("p_qk_i", "p_vl_i", self.p_qk_i, self.p_vl_i),
                     ("p_qk_u", "p_vl_u", self.p_qk_u, self.p_vl_u)]
            for hi_name, lo_name, hi, lo in pairs:
                if hi < lo - 1e-12:
                    out.append(f"{hi_name}={hi} below {lo_name}={lo}")
        elif direction == AS_PRINTED:
            if not self.p_qk_u < self.p_qk_i:
                out.append("p_qk_u must be < p_qk_i")
            if not self.p_vl_u < self.p_vl_i:
                out.append("p_vl_u must be < p_vl_i")
            if self.p_qk_u > self.p_vl_u + 1e-12 or self.p_qk_i > self.p_vl_i + 1e-12:
                out.append("p_qk must be <= p_vl")
        else:
            raise ValueError(f"unknown constraint direction {direction!r}")
        if self.group_map is not None:
            if len(self.group_map) != self.n_layers:
                out.append("group_map length differs from layer count")
            elif any(r > l or self.group_map[r] != r for l, r in enumerate(self.group_map)):
                out.append("group_map must point each layer at an earlier representative")
        return out

    def is_valid(self, direction: str = PROSE, strict_g: bool = False) -> bool:
        return not self.violations(direction, strict_g)

    def to_json(self) -> dict:
        d = asdict(self)
        d["g"] = list(self.g)
        d["group_map"] = None if self.group_map is None else list(self.group_map)
        return d

    @classmethod
    def from_json(cls, obj: dict) -> "CompressionPlan":
        return cls(g=obj["g"], p_qk_i=obj.get("p_qk_i", 0.0), p_qk_u=obj.get("p_qk_u", 0.0),
                   p_vl_i=obj.get("p_vl_i", 0.0), p_vl_u=obj.get("p_vl_u", 0.0),
                   group_map=obj.get("group_map"))


def save_plan(plan: CompressionPlan, path) -> None:
    Path(path).write_text(json.dumps(plan.to_json(), indent=2) + "\n")


def load_plan(path) -> CompressionPlan:
    return CompressionPlan.from_json(json.loads(Path(path).read_text()))
