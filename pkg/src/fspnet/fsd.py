"""Feature shrinkage decoder: AIM blocks wired as a 4-layer pyramid."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import functional as F
from .nn import CBR, Conv2d, Module
from .tensor import ShapeError, Tensor, concat

AIM_COUNTS = (6, 3, 2, 1)


@dataclass(frozen=True)
class AimSpec:
    layer: int
    n: int
    first: str  # F_i: concatenated with the incoming dF when there is one
    second: str  # F_{i-1}
    df_in: Optional[str]
    df_out: str
    f_out: str


@dataclass
class DecodeSchedule:
    aims: list[AimSpec]
    inputs: list[str]
    lateral_sources: list[str] = field(default_factory=list)

    @property
    def aim_counts(self) -> list[int]:
        return [sum(1 for a in self.aims if a.layer == i) for i in range(len(AIM_COUNTS))]

    def table(self, grid: Optional[int] = None) -> str:
        """Human-readable wiring table, one AIM per line in execution order."""
        head = f"{'aim':>3}  {'layer':>5}  {'n':>2}  {'F_i':<8}{'F_i-1':<8}{'dF_in':<8}{'dF_out':<8}{'F_out':<8}"
        if grid is not None:
            head += "  in_res  out_res"
        lines = [head]
        for idx, a in enumerate(self.aims, start=1):
            row = (
                f"{idx:>3}  {a.layer:>5}  {a.n:>2}  {a.first:<8}{a.second:<8}"
                f"{a.df_in or '-':<8}{a.df_out:<8}{a.f_out:<8}"
            )
            if grid is not None:
                r = grid * 2**a.layer
                row += f"  {r}x{r}".ljust(8) + f"  {2 * r}x{2 * r}"
            lines.append(row)
        lines.append("laterals: " + ", ".join(f"P{i}<-{s}" for i, s in enumerate(self.lateral_sources)))
        lines.append(f"aim_counts: {self.aim_counts}  total: {len(self.aims)}")
        return "\n".join(lines)


def build_schedule(num_inputs: int = 12) -> DecodeSchedule:
    """Wire the 12-input shrinkage pyramid.

    Feature ``F{i}_{n}`` is the n-th input of decoder layer i (layer 0 inputs
    are F0_1..F0_12, F0_k from encoder layer k).  Within a layer the AIMs
    run from the highest pair down and thread dF right to left.  Layer 2
    receives 3 features but runs 2 AIMs: its first AIM pairs (F3, F2)
    and the second reuses F2 alongside the incoming dF.
    """
    if num_inputs != 12:
        raise ValueError(f"the shrinkage pyramid is fixed at 12 inputs, got {num_inputs}")
    aims: list[AimSpec] = []
    available = num_inputs
    for i, m in enumerate(AIM_COUNTS):
        for n in range(m, 0, -1):
            a = min(2 * n, available)
            b = a - 1
            aims.append(
                AimSpec(
                    layer=i,
                    n=n,
                    first=f"F{i}_{a}",
                    second=f"F{i}_{b}",
                    df_in=None if n == m else f"dF{i}_{n + 1}",
                    df_out=f"dF{i}_{n}",
                    f_out=f"F{i + 1}_{n}",
                )
            )
        available = m
    schedule = DecodeSchedule(
        aims=aims,
        inputs=[f"F0_{k}" for k in range(num_inputs, 0, -1)],
        lateral_sources=[f"F{i + 1}_1" for i in range(len(AIM_COUNTS))],
    )
    _validate(schedule)
    return schedule


def _validate(schedule: DecodeSchedule) -> None:
    produced = set(schedule.inputs)
    for a in schedule.aims:
        needed = [a.first, a.second] + ([a.df_in] if a.df_in else [])
        for name in needed:
            if name not in produced:
                raise AssertionError(f"schedule is not a DAG: {name} used before it exists")
        produced.update((a.df_out, a.f_out))
    if len(schedule.aims) != sum(AIM_COUNTS):
        raise AssertionError("schedule must contain 12 AIMs")


class Aim(Module):
    """Adjacent interaction: fuse (dF, F_i), then F_{i-1}; emit dF and an upsampled F'."""

    def __init__(self, rng: np.random.Generator, width: int, has_prev: bool):
        self.has_prev = has_prev
        self.cbr_fuse1 = CBR(rng, 2 * width if has_prev else width, width)
        self.cbr_fuse2 = CBR(rng, 2 * width, width)
        self.cbr_out = CBR(rng, width, width)

    def forward(self, f_prev: Optional[Tensor], f_i: Tensor, f_im1: Tensor) -> tuple[Tensor, Tensor]:
        if f_i.shape[2:] != f_im1.shape[2:]:
            raise ShapeError(f"AIM: spatial sizes {f_i.shape[2:]} and {f_im1.shape[2:]} differ")
        if (f_prev is not None) != self.has_prev:
            raise ValueError("AIM: incoming dF presence does not match this block's wiring")
        if f_prev is not None:
            if f_prev.shape[2:] != f_i.shape[2:]:
                raise ShapeError(f"AIM: dF size {f_prev.shape[2:]} differs from {f_i.shape[2:]}")
            x = concat([f_prev, f_i], axis=1)
        else:
            x = f_i
        f_p = self.cbr_fuse2(concat([self.cbr_fuse1(x), f_im1], axis=1))
        f_out = F.upsample_2x(self.cbr_out(f_p))
        return f_p, f_out


def lateral_head(feature: Tensor, target_h: int, target_w: int, head: Conv2d) -> Tensor:
    """1x1 collapse to one channel, sigmoid, bilinear resize to the target size."""
    return F.bilinear_resize(F.sigmoid(head(feature)), target_h, target_w)


class FeatureShrinkageDecoder(Module):
    def __init__(self, rng: np.random.Generator, in_channels: Optional[int], width: int):
        self.schedule = build_schedule(12)
        self.width = width
        # per-input 1x1 adapters bring encoder-width features to the decoder width
        self.adapters = (
            [Conv2d(rng, in_channels, width, 1) for _ in range(12)] if in_channels is not None else []
        )
        self.aims = [Aim(rng, width, a.df_in is not None) for a in self.schedule.aims]
        self.heads = [Conv2d(rng, width, 1, 1, init="zeros") for _ in AIM_COUNTS]
        self.aim_calls = 0

    def forward(self, features: list[Tensor], target_h: int, target_w: int) -> list[Tensor]:
        """``features[k-1]`` is the map from encoder layer k. Returns [P0, P1, P2, P3]."""
        if len(features) != 12:
            raise ShapeError(f"decoder needs 12 input features, got {len(features)}")
        if self.adapters:
            features = [adapt(f) for adapt, f in zip(self.adapters, features)]
        env: dict[str, Tensor] = {f"F0_{k + 1}": f for k, f in enumerate(features)}
        ref = features[0].shape
        for name, f in env.items():
            if f.shape != ref or f.shape[1] != self.width:
                raise ShapeError(f"decoder input {name} has shape {f.shape}, expected {ref[:1]}x{self.width}x..")
        self.aim_calls = 0
        for spec, block in zip(self.schedule.aims, self.aims):
            prev = env[spec.df_in] if spec.df_in else None
            env[spec.df_out], env[spec.f_out] = block(prev, env[spec.first], env[spec.second])
            self.aim_calls += 1
        self.lateral_features = [env[s] for s in self.schedule.lateral_sources]
        return [
            lateral_head(f, target_h, target_w, head) for f, head in zip(self.lateral_features, self.heads)
        ]
