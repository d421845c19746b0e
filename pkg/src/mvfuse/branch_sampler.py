"""Multi-stage branch dropout: choose fbank, unit or fused input per draw."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError

FBANK, UNIT, FUSION = "fbank", "unit", "fusion"
BRANCHES = (FBANK, UNIT, FUSION)


class ScheduleError(ConfigError):
    pass


@dataclass(frozen=True)
class Stage:
    epoch_lo: int
    epoch_hi: float  # exclusive; math.inf for the open last stage
    delta_fbank: float
    delta_unit: float


def _check_thresholds(delta_fbank: float, delta_unit: float):
    if delta_fbank < 0 or delta_unit < 0 or delta_fbank + delta_unit > 1:
        raise ScheduleError(f"invalid thresholds ({delta_fbank}, {delta_unit})")


@dataclass(frozen=True)
class StageSchedule:
    stages: tuple[Stage, ...]

    def __post_init__(self):
        if not self.stages:
            raise ScheduleError("schedule has no stages")
        expect = 0
        for s in self.stages:
            _check_thresholds(s.delta_fbank, s.delta_unit)
            if s.epoch_lo != expect or not s.epoch_hi > s.epoch_lo:
                raise ScheduleError(f"stage {s} leaves a gap or overlaps at epoch {expect}")
            expect = s.epoch_hi
        if expect != math.inf:
            raise ScheduleError("last stage must be open-ended")

    @classmethod
    def from_records(cls, records) -> "StageSchedule":
        """Build from ``[[lo, hi_or_None, d_fbank, d_unit], ...]``."""
        stages = []
        for rec in records:
            lo, hi, df, du = rec
            stages.append(Stage(int(lo), math.inf if hi is None else int(hi), float(df), float(du)))
        return cls(tuple(stages))

    def to_records(self) -> list:
        return [[s.epoch_lo, None if s.epoch_hi == math.inf else int(s.epoch_hi),
                 s.delta_fbank, s.delta_unit] for s in self.stages]

    @property
    def final(self) -> Stage:
        return self.stages[-1]


def default_schedule() -> StageSchedule:
    """Three stages: [0,10) (0.3,0), [10,25) (0.5,0.3), [25,inf) (0.3,0)."""
    return StageSchedule.from_records([[0, 10, 0.3, 0.0], [10, 25, 0.5, 0.3], [25, None, 0.3, 0.0]])


def constant_schedule(delta_fbank: float = 0.0, delta_unit: float = 0.0) -> StageSchedule:
    return StageSchedule.from_records([[0, None, delta_fbank, delta_unit]])


def stage_for_epoch(schedule: StageSchedule, epoch: int) -> tuple[float, float]:
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    for s in schedule.stages:
        if s.epoch_lo <= epoch < s.epoch_hi:
            return s.delta_fbank, s.delta_unit
    raise AssertionError("schedule is total by construction")


def sample_branch(p: float, delta_fbank: float, delta_unit: float) -> str:
    _check_thresholds(delta_fbank, delta_unit)
    if p < delta_fbank:
        return FBANK
    if p < delta_fbank + delta_unit:
        return UNIT
    return FUSION


def draw_branch(rng: np.random.Generator, delta_fbank: float, delta_unit: float) -> str:
    return sample_branch(float(rng.random()), delta_fbank, delta_unit)
