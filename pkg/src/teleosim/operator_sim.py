"""Scripted stand-in for the human master-arm operator.

Plans a small waypoint template per task (hover over the object, descend,
close, carry, open), expresses the waypoints in master coordinates through
the inverse of the pose mapping, and streams MasterState messages at the
simulation tick rate through the bus -> mapper -> simulator pipeline while a
recorder captures the episode. Waypoint positions can be jittered with
counter-based Gaussian noise to emulate operator variability, with a
feedback retry when a jittered grasp misses.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .bus import (
    TOPIC_MASTER_STATE,
    TOPIC_RECORD_STEP,
    TOPIC_ROBOT_COMMAND,
    TOPIC_SIM_STATE,
    standard_bus,
)
from .geometry import Rotation, Transform, Vec3
from .mapping import FrameCalibration, MapperNode, MappingConfig
from .messages import PEDAL_START_STOP, MasterState, SimState, StepRecord
from .recorder import (
    ActionIntegrator,
    Dataset,
    Demonstration,
    DemoRecorder,
    observation_dim,
    observation_vector,
)
from .sim import SimModel, TaskSpec, World, reset

DEFAULT_SPEED = 0.25  # m/s along straight master-space segments
# position waypoints get no dwell: pausing mid-path writes long runs of
# zero-delta training pairs that act as stall attractors for cloned policies
DWELL_MOVE = 0
DWELL_GRIP = 30  # ticks to let the jaw slew and the grasp rule fire
HOVER_Z = 0.10  # clearance above grasp points
TRANSPORT_Z = 0.14  # carry height for pick-and-place
MAX_TICKS = 3000
MAX_GRASP_RETRIES = 2
DEFAULT_NOISE_SIGMA = 0.005


class OperatorError(Exception):
    pass


class Unplannable(OperatorError):
    pass


class Timeout(OperatorError):
    pass


@dataclass(frozen=True)
class Waypoint:
    master_pose: Transform
    grip: float  # 0 closed .. 1 open
    dwell: int
    speed: float = DEFAULT_SPEED
    role: str = ""  # "close" marks grasp points eligible for retry
    object_id: int | None = None


@dataclass(frozen=True)
class WaypointPlan:
    waypoints: tuple[Waypoint, ...]
    noise_sigma: float = 0.0

    def __post_init__(self):
        if any(w.speed <= 0 for w in self.waypoints):
            raise OperatorError("waypoint speeds must be positive")


class MasterFrame:
    """Inverse of the pose mapping: world targets -> master poses.

    Shares the mapper's anchors, so driving the master through these poses
    makes the mapper emit exactly the intended world targets.
    """

    def __init__(
        self,
        cal: FrameCalibration,
        cfg: MappingConfig,
        anchor_master_p: Vec3,
        anchor_gripper_p_world: Vec3,
    ):
        self.cal = cal
        self.cfg = cfg
        self.anchor_master_p = anchor_master_p
        self.anchor_gripper_p_world = anchor_gripper_p_world
        self._r_inv = cal.r_from_b.rotation.inverse()
        self._base_c = cal.c_from_w.apply(anchor_gripper_p_world)

    def master_pose_for(self, world_target: Transform) -> Transform:
        p_c = self.cal.c_from_w.apply(world_target.translation)
        d = self._r_inv.rotate(tuple(a - b for a, b in zip(p_c, self._base_c)))
        p = tuple(
            a + v / self.cfg.motion_scale for a, v in zip(self.anchor_master_p, d)
        )
        rot = self._r_inv * (self.cal.c_from_w.rotation * world_target.rotation)
        return Transform(rot, p)


def _require_inside(cfg: MappingConfig, p, what: str) -> None:
    for v, lo, hi in zip(p, cfg.workspace_min, cfg.workspace_max):
        if not (lo <= v <= hi):
            raise Unplannable(f"{what} at {tuple(p)} outside workspace")


def plan_waypoints(
    task: TaskSpec,
    scene: SimState,
    frame: MasterFrame,
    down: Rotation,
    noise_sigma: float = 0.0,
) -> WaypointPlan:
    """Waypoint template achieving the task from the observed scene.

    All tasks share the grasp phrase (hover above the object, descend to its
    center, close); lift then raises the object, the placing tasks carry it
    over the target and open. Targets are expressed as master poses.
    """
    poses = {o.id: o.pose.translation for o in scene.objects}
    obj = task.objects[0]
    ox, oy, oz = poses[obj.id]
    _require_inside(frame.cfg, (ox, oy, oz), obj.name)

    def wp(p, grip, dwell, role="", oid=None, speed=DEFAULT_SPEED):
        return Waypoint(
            master_pose=frame.master_pose_for(Transform(down, p)),
            grip=grip,
            dwell=dwell,
            speed=speed,
            role=role,
            object_id=oid,
        )

    grasp = [
        wp((ox, oy, oz + HOVER_Z), 1.0, DWELL_MOVE),
        wp((ox, oy, oz), 1.0, DWELL_MOVE),
        wp((ox, oy, oz), 0.0, DWELL_GRIP, role="close", oid=obj.id),
    ]
    if task.kind == "lift":
        table_z = float(task.goal["table_z"])
        top = table_z + float(task.goal["lift_height"]) + 0.06
        pts = grasp + [wp((ox, oy, top), 0.0, DWELL_GRIP)]
    elif task.kind == "pickplace":
        bx, by = task.goal["bin_center"]
        _require_inside(frame.cfg, (bx, by, oz), "bin center")
        pts = grasp + [
            wp((ox, oy, TRANSPORT_Z), 0.0, DWELL_MOVE),
            wp((bx, by, TRANSPORT_Z), 0.0, DWELL_MOVE),
            wp((bx, by, oz + 0.005), 0.0, DWELL_MOVE),
            wp((bx, by, oz + 0.005), 1.0, DWELL_GRIP, role="open"),
        ]
    elif task.kind == "stack":
        target = task.objects[1] if task.objects[1].id == int(task.goal["target_id"]) else task.objects[0]
        tx, ty, tz = poses[int(task.goal["target_id"])]
        _require_inside(frame.cfg, (tx, ty, tz), target.name)
        rest_z = tz + target.half_extents[2] + obj.half_extents[2]
        pts = grasp + [
            wp((ox, oy, TRANSPORT_Z), 0.0, DWELL_MOVE),
            wp((tx, ty, TRANSPORT_Z), 0.0, DWELL_MOVE),
            wp((tx, ty, rest_z + 0.005), 0.0, DWELL_MOVE),
            wp((tx, ty, rest_z + 0.005), 1.0, DWELL_GRIP, role="open"),
        ]
    else:
        raise Unplannable(f"no plan template for task {task.kind!r}")
    return WaypointPlan(waypoints=tuple(pts), noise_sigma=noise_sigma)


def jitter_plan(plan: WaypointPlan, rng: np.random.Generator) -> WaypointPlan:
    """Gaussian position jitter per waypoint (orientation left exact)."""
    if plan.noise_sigma == 0.0:
        return plan
    out = []
    for w in plan.waypoints:
        d = rng.normal(0.0, plan.noise_sigma, size=3)
        pose = Transform(
            w.master_pose.rotation,
            tuple(p + float(dv) for p, dv in zip(w.master_pose.translation, d)),
        )
        out.append(replace(w, master_pose=pose))
    return WaypointPlan(waypoints=tuple(out), noise_sigma=plan.noise_sigma)


class ScriptedOperator:
    """Streams master states along a waypoint plan at the sim tick rate.

    Travels in a straight master-space line toward each waypoint, dwells,
    then advances. After a grasp waypoint it checks the observed scene; if
    the jaw closed on nothing it re-plans the grasp phrase at the object's
    true position (bounded retries), mimicking a human correcting a miss.
    """

    def __init__(
        self,
        plan: WaypointPlan,
        frame: MasterFrame,
        grasp_width: float,
        proximity: float,
        start_master_p: Vec3,
        dt: float,
    ):
        self.frame = frame
        self.grasp_width = grasp_width
        self.proximity = proximity
        self.dt = dt
        self._queue = list(plan.waypoints)
        self._idx = 0
        self._pos = start_master_p
        self._grip = 1.0
        self._dwell_left = -1  # -1: traveling
        self._retries = 0
        self._tick = 0

    @property
    def done(self) -> bool:
        return self._idx >= len(self._queue)

    def _grasped(self, state: SimState, oid: int) -> bool:
        if state.gripper_width >= self.grasp_width:
            return False
        for obj in state.objects:
            if obj.id == oid:
                return (
                    math.dist(state.ee_pose.translation, obj.pose.translation)
                    <= self.proximity
                )
        return False

    def _retry_grasp(self, state: SimState, wp: Waypoint) -> None:
        for obj in state.objects:
            if obj.id == wp.object_id:
                ox, oy, oz = obj.pose.translation
                break
        else:
            return
        down_world = self.frame.cal.w_from_c.rotation * (
            self.frame.cal.r_from_b.rotation
            * self._queue[self._idx].master_pose.rotation
        )
        def exact(p, grip, dwell, role="", oid=None):
            return Waypoint(
                master_pose=self.frame.master_pose_for(Transform(down_world, p)),
                grip=grip,
                dwell=dwell,
                role=role,
                object_id=oid,
            )
        self._queue[self._idx + 1 : self._idx + 1] = [
            exact((ox, oy, oz + HOVER_Z), 1.0, DWELL_MOVE),
            exact((ox, oy, oz), 1.0, DWELL_MOVE),
            exact((ox, oy, oz), 0.0, DWELL_GRIP, role="close", oid=wp.object_id),
        ]
        self._retries += 1

    def tick(self, state: SimState) -> MasterState:
        """Emit the current master state, then advance toward the plan.

        Emitting before moving makes the very first message carry the start
        pose, which is what the mapper anchors to on engagement.
        """
        self._tick += 1
        rot = (
            self._queue[min(self._idx, len(self._queue) - 1)].master_pose.rotation
            if self._queue
            else Rotation.identity()
        )
        out = MasterState(
            tip_pose=Transform(rot, self._pos),
            grip=self._grip,
            pedals=PEDAL_START_STOP,
            stamp_ns=self._tick,
        )
        self._advance(state)
        return out

    def _advance(self, state: SimState) -> None:
        if self.done:
            return
        wp = self._queue[self._idx]
        if self._dwell_left < 0:
            step = wp.speed * self.dt
            target = wp.master_pose.translation
            dist = math.dist(self._pos, target)
            if dist <= step:
                self._pos = target
                self._dwell_left = wp.dwell
            else:
                self._pos = tuple(
                    p + (t - p) * step / dist for p, t in zip(self._pos, target)
                )
        else:
            self._grip = wp.grip
            self._dwell_left -= 1
            if self._dwell_left < 0:
                if (
                    wp.role == "close"
                    and not self._grasped(state, wp.object_id)
                    and self._retries < MAX_GRASP_RETRIES
                ):
                    self._retry_grasp(state, wp)
                self._idx += 1


def _pipeline_config(model: SimModel) -> MappingConfig:
    return MappingConfig(
        workspace_min=model.workspace_min,
        workspace_max=model.workspace_max,
        gripper_w_min=model.gripper.w_min,
        gripper_w_max=model.gripper.w_max,
    )


def run_episode_full(
    model: SimModel,
    task_name: str,
    seed: int,
    noise_sigma: float = 0.0,
    operator_id: str = "scripted",
    max_ticks: int = MAX_TICKS,
    raise_on_timeout: bool = False,
    cal: FrameCalibration | None = None,
) -> tuple[Demonstration, SimState]:
    """One full teleoperated episode; returns the demo and the final state.

    Single-threaded and deterministic in (task, seed, noise_sigma): every
    tick the operator emits a master state onto the bus, the mapper turns it
    into a command, the command is re-encoded through the action integrator
    (so the recorded deltas reproduce it exactly), and the world steps.
    """
    task = model.tasks[task_name]
    world: World = reset(model, task, seed)
    cal = cal if cal is not None else FrameCalibration.identity()
    cfg = _pipeline_config(model)
    bus = standard_bus()
    sub_master = bus.subscribe(TOPIC_MASTER_STATE)
    sub_cmd = bus.subscribe(TOPIC_ROBOT_COMMAND)
    sub_state = bus.subscribe(TOPIC_SIM_STATE)
    sub_rec = bus.subscribe(TOPIC_RECORD_STEP)

    frame = MasterFrame(
        cal, cfg, anchor_master_p=(0.0, 0.0, 0.0),
        anchor_gripper_p_world=world.ee_pose.translation,
    )
    state = world.state()
    bus.publish(TOPIC_SIM_STATE, state)
    plan = plan_waypoints(
        task, state, frame, down=world.ee_pose.rotation, noise_sigma=noise_sigma
    )
    plan = jitter_plan(plan, np.random.Generator(np.random.Philox(key=[seed, 1])))
    op = ScriptedOperator(
        plan,
        frame,
        grasp_width=model.gripper.grasp_width,
        proximity=model.gripper.proximity,
        start_master_p=(0.0, 0.0, 0.0),
        dt=model.dt,
    )
    node = MapperNode(cfg, cal)
    integ = ActionIntegrator(world.ee_pose)
    rec = DemoRecorder(task_name, operator_id, seed, model.dt)

    for tick in range(max_ticks):
        bus.publish(TOPIC_MASTER_STATE, op.tick(sub_state.poll() or state))
        master = sub_master.poll()
        raw = node.tick(master, robot_pose=world.ee_pose)
        action = integ.encode(raw)
        cmd = integ.apply(action)
        bus.publish(TOPIC_ROBOT_COMMAND, cmd)
        obs = observation_vector(state)
        state = world.step(sub_cmd.poll(), model.dt)
        bus.publish(TOPIC_SIM_STATE, state)
        bus.publish(TOPIC_RECORD_STEP, StepRecord(tick=tick, obs=obs, action=action))
        rec.drain(sub_rec)
        if state.task_success:
            break
    if not state.task_success and raise_on_timeout:
        raise Timeout(f"{task_name} seed {seed}: no success in {max_ticks} ticks")
    return rec.finalize(state.task_success), state


def run_episode(
    model: SimModel,
    task_name: str,
    seed: int,
    noise_sigma: float = 0.0,
    **kwargs,
) -> Demonstration:
    demo, _ = run_episode_full(model, task_name, seed, noise_sigma, **kwargs)
    return demo


def collect_dataset(
    model: SimModel,
    task_name: str,
    count: int,
    base_seed: int = 0,
    noise_sigma: float = DEFAULT_NOISE_SIGMA,
    operator_id: str = "scripted",
) -> Dataset:
    """count episodes with consecutive seeds; failures are kept, flagged."""
    demos = tuple(
        run_episode(model, task_name, base_seed + i, noise_sigma, operator_id=operator_id)
        for i in range(count)
    )
    return Dataset(
        task=task_name,
        dt=model.dt,
        obs_dim=observation_dim(model.tasks[task_name]),
        action_dim=7,
        model_hash=model.model_hash,
        demonstrations=demos,
    )
