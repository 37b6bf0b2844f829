"""Master-to-robot pose mapping with engagement alignment and a clutch.

The mapper turns master-arm tip poses into world-frame gripper commands in
three steps: express the master displacement in the camera frame with a
configurable scale, clamp the resulting translation to a workspace box, and
re-express the command in the world frame. Engagement aligns the commanded
orientation to the master by a rate-limited rotation before following
begins; the clutch freezes the command stream and re-anchors on release so
the robot never jumps.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, replace

from .geometry import (
    Rotation,
    Transform,
    Vec3,
    angle_between,
    compose,
    inverse,
    rotate_towards,
)
from .messages import MasterState, RobotCommand

_CAL_TOL = 1e-12


class MappingError(Exception):
    pass


class EngageWhileActive(MappingError):
    pass


class NotEngaged(MappingError):
    pass


class ClutchWhileIdle(MappingError):
    pass


@dataclass(frozen=True)
class FrameCalibration:
    """Fixed transforms between the master base, camera, and world frames.

    r_from_b carries the master-base orientation in the camera/robot frame
    (only its rotation enters the mapping); c_from_w locates the world in
    the camera frame, with its inverse cached for the world-frame step.
    """

    r_from_b: Transform
    c_from_w: Transform
    w_from_c: Transform

    def __post_init__(self):
        check = compose(self.c_from_w, self.w_from_c)
        if (
            math.dist(check.translation, (0.0, 0.0, 0.0)) > _CAL_TOL
            or angle_between(check.rotation, Rotation.identity()) > _CAL_TOL
        ):
            raise MappingError("w_from_c is not the inverse of c_from_w")

    @staticmethod
    def from_transforms(
        r_from_b: Transform | None = None, c_from_w: Transform | None = None
    ) -> "FrameCalibration":
        r_from_b = r_from_b if r_from_b is not None else Transform.identity()
        c_from_w = c_from_w if c_from_w is not None else Transform.identity()
        return FrameCalibration(r_from_b, c_from_w, inverse(c_from_w))

    @staticmethod
    def identity() -> "FrameCalibration":
        return FrameCalibration.from_transforms()


@dataclass(frozen=True)
class MappingConfig:
    # `motion_scale` is the unitless master-to-robot displacement gain
    motion_scale: float = 1.0
    engage_angle_tol: float = 1e-3
    align_rate: float = 0.05  # radians per tick
    workspace_min: Vec3 = (0.30, -0.22, 0.015)
    workspace_max: Vec3 = (0.58, 0.22, 0.32)
    gripper_w_min: float = 0.0
    gripper_w_max: float = 0.08

    def __post_init__(self):
        if not (self.motion_scale > 0 and math.isfinite(self.motion_scale)):
            raise MappingError(f"motion_scale {self.motion_scale} must be positive")
        if not (0 < self.engage_angle_tol <= math.pi):
            raise MappingError(f"engage_angle_tol {self.engage_angle_tol} out of (0, pi]")
        if not (self.align_rate > 0 and math.isfinite(self.align_rate)):
            raise MappingError(f"align_rate {self.align_rate} must be positive")
        if not all(lo < hi for lo, hi in zip(self.workspace_min, self.workspace_max)):
            raise MappingError("workspace_min must be below workspace_max componentwise")
        if not (0 <= self.gripper_w_min < self.gripper_w_max):
            raise MappingError("gripper bounds must satisfy 0 <= w_min < w_max")


class Phase(enum.Enum):
    IDLE = "idle"
    ALIGNING = "aligning"
    ENGAGED = "engaged"
    CLUTCHED = "clutched"


@dataclass(frozen=True)
class MappingState:
    """Mapper phase plus the anchors and frozen command that define it.

    Anchors are set exactly when the phase is not Idle. cmd_rotation is the
    orientation actually being commanded (it trails the mapped target by at
    most align_rate per tick); last_master lets the clutch re-anchor without
    an extra argument.
    """

    phase: Phase = Phase.IDLE
    anchor_master_p: Vec3 | None = None
    anchor_gripper_p_world: Vec3 | None = None
    cmd_rotation: Rotation | None = None
    last_command: RobotCommand | None = None
    last_master: MasterState | None = None


def engage(state: MappingState, master: MasterState, robot_pose: Transform) -> MappingState:
    """Capture anchors from the current master tip and gripper pose.

    The mapper then aligns the commanded orientation to the master over the
    following ticks (see align_tick) before entering the Engaged phase.
    """
    if state.phase is not Phase.IDLE:
        raise EngageWhileActive(f"engage in phase {state.phase.value}")
    return replace(
        state,
        phase=Phase.ALIGNING,
        anchor_master_p=master.tip_pose.translation,
        anchor_gripper_p_world=robot_pose.translation,
        cmd_rotation=robot_pose.rotation,
        last_master=master,
    )


def align_tick(state: MappingState, cfg: MappingConfig, cal: FrameCalibration, master: MasterState) -> MappingState:
    """Rotate the commanded orientation toward the mapped master orientation.

    The master anchor is refreshed every aligning tick so the gripper holds
    its engage position and following starts with zero displacement.
    """
    if state.phase is not Phase.ALIGNING:
        raise MappingError(f"align_tick in phase {state.phase.value}")
    target = cal.r_from_b.rotation * master.tip_pose.rotation
    cmd = rotate_towards(state.cmd_rotation, target, cfg.align_rate)
    phase = Phase.ENGAGED if angle_between(cmd, target) <= cfg.engage_angle_tol else Phase.ALIGNING
    return replace(
        state,
        phase=phase,
        anchor_master_p=master.tip_pose.translation,
        cmd_rotation=cmd,
        last_master=master,
    )


def clamp_to_workspace(cfg: MappingConfig, p: Vec3) -> Vec3:
    return tuple(
        min(hi, max(lo, v)) for v, lo, hi in zip(p, cfg.workspace_min, cfg.workspace_max)
    )


def map_pose(
    state: MappingState,
    cfg: MappingConfig,
    cal: FrameCalibration,
    master_tip: Transform,
) -> tuple[Vec3, Rotation]:
    """Camera-frame desired gripper pose for the current master tip pose.

    Translation: the engage-time gripper position re-expressed in the camera
    frame, plus the master displacement since its anchor, rotated by the
    master-base orientation and scaled; then clamped to the workspace box.
    Orientation: the master orientation rotated by the master-base
    orientation, independent of any translation.
    """
    if state.phase is not Phase.ENGAGED:
        raise NotEngaged(f"map_pose in phase {state.phase.value}")
    r_b = cal.r_from_b.rotation
    base = cal.c_from_w.apply(state.anchor_gripper_p_world)
    dm = tuple(m - a for m, a in zip(master_tip.translation, state.anchor_master_p))
    disp = r_b.rotate(dm)
    p = tuple(b + cfg.motion_scale * d for b, d in zip(base, disp))
    return clamp_to_workspace(cfg, p), r_b * master_tip.rotation


def camera_to_world(cal: FrameCalibration, desired: tuple[Vec3, Rotation]) -> Transform:
    """Re-express a camera-frame desired pose in the world frame."""
    p, rot = desired
    return compose(cal.w_from_c, Transform(rot, p))


def clutch(state: MappingState, pressed: bool) -> MappingState:
    """Freeze the command stream (press) or re-anchor and resume (release).

    On release both anchors are rebased — the master anchor to wherever the
    master is now, the gripper anchor to the frozen command's translation —
    so the first post-clutch command reproduces the frozen one and the robot
    does not jump.
    """
    if state.phase in (Phase.IDLE, Phase.ALIGNING):
        raise ClutchWhileIdle(f"clutch in phase {state.phase.value}")
    if pressed:
        if state.phase is Phase.CLUTCHED:
            return state
        if state.last_command is None:
            raise MappingError("no command to freeze")
        return replace(state, phase=Phase.CLUTCHED)
    if state.phase is Phase.ENGAGED:
        return state
    return replace(
        state,
        phase=Phase.ENGAGED,
        anchor_master_p=state.last_master.tip_pose.translation,
        anchor_gripper_p_world=state.last_command.target.translation,
        cmd_rotation=state.last_command.target.rotation,
    )


def map_gripper(master_grip: float, w_min: float = 0.0, w_max: float = 0.08) -> float:
    """Affine squeeze-fraction to jaw-width map; out-of-range inputs clamp."""
    grip = min(1.0, max(0.0, master_grip))
    return w_min + grip * (w_max - w_min)


class MapperNode:
    """Per-tick mapper: master states in, world-frame robot commands out.

    Owns a MappingState; pedal edges drive engagement and the clutch. The
    caller supplies the current gripper pose so engagement can anchor to it.
    """

    def __init__(self, cfg: MappingConfig | None = None, cal: FrameCalibration | None = None):
        self.cfg = cfg if cfg is not None else MappingConfig()
        self.cal = cal if cal is not None else FrameCalibration.identity()
        self.state = MappingState()

    def tick(self, master: MasterState, robot_pose: Transform | None = None) -> RobotCommand | None:
        prev = self.state.last_master
        was_clutched = prev.clutch if prev is not None else False
        was_started = prev.start_stop if prev is not None else False

        if self.state.phase is Phase.IDLE:
            if master.start_stop and not was_started and robot_pose is not None:
                self.state = engage(self.state, master, robot_pose)
            else:
                self.state = replace(self.state, last_master=master)
                return None

        if self.state.phase is Phase.ALIGNING:
            self.state = align_tick(self.state, self.cfg, self.cal, master)
            if self.state.phase is Phase.ALIGNING:
                return self._emit_hold(master)
            # fell through to Engaged on this tick: follow immediately

        if self.state.phase is Phase.ENGAGED and master.clutch and not was_clutched:
            self.state = clutch(self.state, True)

        if self.state.phase is Phase.CLUTCHED:
            # the release re-anchors to the master of THIS tick, so record it
            # before dispatching; the frozen command is repeated either way
            # and following resumes next tick with zero displacement
            self.state = replace(self.state, last_master=master)
            if not master.clutch and was_clutched:
                self.state = clutch(self.state, False)
            return self.state.last_command

        return self._emit_follow(master)

    def _emit_hold(self, master: MasterState) -> RobotCommand:
        """Command while aligning: hold the anchor, slew orientation only."""
        p_c = clamp_to_workspace(
            self.cfg, self.cal.c_from_w.apply(self.state.anchor_gripper_p_world)
        )
        cmd = RobotCommand(
            target=camera_to_world(self.cal, (p_c, self.state.cmd_rotation)),
            gripper_width=map_gripper(
                master.grip, self.cfg.gripper_w_min, self.cfg.gripper_w_max
            ),
            stamp_ns=master.stamp_ns,
        )
        self.state = replace(self.state, last_command=cmd, last_master=master)
        return cmd

    def _emit_follow(self, master: MasterState) -> RobotCommand:
        p_c, rot_target = map_pose(self.state, self.cfg, self.cal, master.tip_pose)
        rot = rotate_towards(self.state.cmd_rotation, rot_target, self.cfg.align_rate)
        cmd = RobotCommand(
            target=camera_to_world(self.cal, (p_c, rot)),
            gripper_width=map_gripper(
                master.grip, self.cfg.gripper_w_min, self.cfg.gripper_w_max
            ),
            stamp_ns=master.stamp_ns,
        )
        self.state = replace(
            self.state, cmd_rotation=rot, last_command=cmd, last_master=master
        )
        return cmd
