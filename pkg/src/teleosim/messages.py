"""Wire messages linking the operator device, the mapper, and the simulator."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

from .geometry import Transform

PEDAL_CLUTCH = 0x01
PEDAL_START_STOP = 0x02
PEDAL_MODE = 0x04


@dataclass(frozen=True)
class MasterState:
    """Operator-side state: master tip pose, grip fraction, foot pedals."""

    tip_pose: Transform
    grip: float
    pedals: int
    stamp_ns: int

    def __post_init__(self) -> None:
        if not (0.0 <= self.grip <= 1.0) or not math.isfinite(self.grip):
            raise ValueError(f"grip {self.grip} outside [0, 1]")
        if not (0 <= self.pedals <= 0xFF):
            raise ValueError("pedals must fit in one byte")

    @property
    def clutch(self) -> bool:
        return bool(self.pedals & PEDAL_CLUTCH)

    @property
    def start_stop(self) -> bool:
        return bool(self.pedals & PEDAL_START_STOP)


@dataclass(frozen=True)
class RobotCommand:
    """Desired gripper pose in the simulator world frame plus jaw width."""

    target: Transform
    gripper_width: float
    stamp_ns: int

    def __post_init__(self) -> None:
        if not math.isfinite(self.gripper_width) or self.gripper_width < 0.0:
            raise ValueError(f"bad gripper width {self.gripper_width}")


@dataclass(frozen=True)
class ObjectPose:
    id: int
    pose: Transform


@dataclass(frozen=True)
class SimState:
    """Snapshot published by the simulator each tick."""

    q: tuple[float, ...]
    ee_pose: Transform
    objects: tuple[ObjectPose, ...]
    gripper_width: float
    task_success: bool
    tick: int

    def __post_init__(self) -> None:
        for qi in self.q:
            if not math.isfinite(qi):
                raise ValueError("non-finite joint angle")
        if not math.isfinite(self.gripper_width):
            raise ValueError("non-finite gripper width")


@dataclass(frozen=True)
class StepRecord:
    """One recorded (observation, action) pair streamed on record/step."""

    tick: int
    obs: tuple[float, ...] = field(default=())
    action: tuple[float, ...] = field(default=())
