"""Kinematic stand-in for a physics simulator: a 7-DoF arm tracked by a
damped-least-squares pose servo, rigid boxes with a grasp/release rule, and
task success predicates for Lift, Pick-and-Place, and Stack.

All arm and task constants live in a versioned JSON model file so every
number here is reproducible by an external reader.
"""
from __future__ import annotations

import functools
import hashlib
import importlib.resources
import json
import math
from dataclasses import dataclass

import numpy as np

from .geometry import Rotation, Transform, Vec3, compose, inverse, pose_from_floats
from .messages import ObjectPose, RobotCommand, SimState

DEFAULT_MODEL = "desk7"


class SimError(Exception):
    pass


class JointLimit(SimError):
    pass


@dataclass(frozen=True)
class Joint:
    offset: Transform
    axis: Vec3
    lower: float
    upper: float


@dataclass(frozen=True)
class ArmModel:
    name: str
    joints: tuple[Joint, ...]
    tip_offset: Transform
    home_q: tuple[float, ...]
    max_joint_speed: float
    damping: float
    step_gain: float

    @property
    def n(self) -> int:
        return len(self.joints)


@dataclass(frozen=True)
class ObjectSpec:
    id: int
    name: str
    half_extents: Vec3
    nominal: Vec3
    xy_jitter: float


@dataclass(frozen=True)
class TaskSpec:
    kind: str
    objects: tuple[ObjectSpec, ...]
    goal: dict


@dataclass(frozen=True)
class GripperSpec:
    w_min: float
    w_max: float
    grasp_width: float
    release_width: float
    proximity: float
    slew_rate: float


@dataclass(frozen=True)
class SimModel:
    """Everything the JSON model file declares, plus its content hash."""

    arm: ArmModel
    gripper: GripperSpec
    tasks: dict[str, TaskSpec]
    table_z: float
    table_x_range: tuple[float, float]
    table_y_range: tuple[float, float]
    workspace_min: Vec3
    workspace_max: Vec3
    dt: float
    model_hash: str


def _vec3(v) -> Vec3:
    return (float(v[0]), float(v[1]), float(v[2]))


@functools.lru_cache(maxsize=None)
def load_model(name: str = DEFAULT_MODEL) -> SimModel:
    raw = (
        importlib.resources.files("teleosim.data").joinpath(f"{name}.json").read_bytes()
    )
    return parse_model(raw)


def parse_model(raw: bytes) -> SimModel:
    doc = json.loads(raw)
    if doc.get("model_version") != 1:
        raise SimError(f"unsupported model_version {doc.get('model_version')!r}")
    joints = []
    for j in doc["joints"]:
        axis = _vec3(j["axis"])
        norm = math.sqrt(sum(a * a for a in axis))
        if abs(norm - 1.0) > 1e-9:
            raise SimError(f"joint axis {axis} not unit-norm")
        lo, hi = float(j["limits"][0]), float(j["limits"][1])
        if lo >= hi:
            raise SimError(f"joint limits [{lo}, {hi}] not ordered")
        joints.append(Joint(pose_from_floats(j["offset_pose"]), axis, lo, hi))
    arm = ArmModel(
        name=doc["name"],
        joints=tuple(joints),
        tip_offset=pose_from_floats(doc["tip_offset_pose"]),
        home_q=tuple(float(v) for v in doc["home_q"]),
        max_joint_speed=float(doc["max_joint_speed"]),
        damping=float(doc["servo"]["damping"]),
        step_gain=float(doc["servo"]["step_gain"]),
    )
    g = doc["gripper"]
    gripper = GripperSpec(
        float(g["w_min"]),
        float(g["w_max"]),
        float(g["grasp_width"]),
        float(g["release_width"]),
        float(g["proximity"]),
        float(g["slew_rate"]),
    )
    table_z = float(doc["table"]["z"])
    tasks = {}
    for kind, t in doc["tasks"].items():
        objs = tuple(
            ObjectSpec(
                int(o["id"]),
                o["name"],
                _vec3(o["half_extents"]),
                _vec3(o["nominal"]),
                float(o["xy_jitter"]),
            )
            for o in t["objects"]
        )
        # goals carry the table height so predicates need no table context
        tasks[kind] = TaskSpec(kind, objs, {**t["goal"], "table_z": table_z})
    return SimModel(
        arm=arm,
        gripper=gripper,
        tasks=tasks,
        table_z=float(doc["table"]["z"]),
        table_x_range=(float(doc["table"]["x_range"][0]), float(doc["table"]["x_range"][1])),
        table_y_range=(float(doc["table"]["y_range"][0]), float(doc["table"]["y_range"][1])),
        workspace_min=_vec3(doc["workspace"]["min"]),
        workspace_max=_vec3(doc["workspace"]["max"]),
        dt=float(doc["dt"]),
        model_hash=hashlib.sha256(raw).hexdigest(),
    )


# ---------------------------------------------------------------------------
# Kinematics

def _check_limits(arm: ArmModel, q) -> None:
    if len(q) != arm.n:
        raise JointLimit(f"expected {arm.n} joints, got {len(q)}")
    for i, (qi, joint) in enumerate(zip(q, arm.joints)):
        if not math.isfinite(qi) or qi < joint.lower or qi > joint.upper:
            raise JointLimit(
                f"joint {i} at {qi} outside [{joint.lower}, {joint.upper}]"
            )


def forward_kinematics(arm: ArmModel, q) -> Transform:
    """World pose of the gripper frame for joint vector q."""
    _check_limits(arm, q)
    x = Transform.identity()
    for qi, joint in zip(q, arm.joints):
        x = compose(x, joint.offset)
        x = Transform(x.rotation * Rotation.from_axis_angle(joint.axis, qi), x.translation)
    return compose(x, arm.tip_offset)


def _fk_frames(arm: ArmModel, q):
    """FK plus each joint's world-frame origin and axis (for the Jacobian)."""
    x = Transform.identity()
    origins = []
    axes = []
    for qi, joint in zip(q, arm.joints):
        x = compose(x, joint.offset)
        origins.append(x.translation)
        axes.append(x.rotation.rotate(joint.axis))
        x = Transform(x.rotation * Rotation.from_axis_angle(joint.axis, qi), x.translation)
    return compose(x, arm.tip_offset), origins, axes


def jacobian(arm: ArmModel, q) -> np.ndarray:
    """Geometric Jacobian (6 x n): rows are [linear; angular] world-frame."""
    ee, origins, axes = _fk_frames(arm, q)
    p_ee = np.array(ee.translation)
    jac = np.zeros((6, arm.n))
    for i in range(arm.n):
        z = np.array(axes[i])
        jac[:3, i] = np.cross(z, p_ee - np.array(origins[i]))
        jac[3:, i] = z
    return jac


def pose_error(current: Transform, target: Transform) -> np.ndarray:
    """6-vector [position error; world-frame rotation error as a rotvec]."""
    e_p = np.array(target.translation) - np.array(current.translation)
    e_r = np.array((target.rotation * current.rotation.inverse()).to_rotvec())
    return np.concatenate([e_p, e_r])


def servo_step(arm: ArmModel, q, target: Transform, dt: float) -> tuple[float, ...]:
    """One damped-least-squares step of the pose servo toward target.

    The update is scaled (not per-joint clipped) to respect the joint speed
    budget without changing its direction, then clamped to joint limits.
    """
    q = tuple(float(v) for v in q)
    current, origins, axes = _fk_frames(arm, q)
    err = pose_error(current, target)
    p_ee = np.array(current.translation)
    jac = np.zeros((6, arm.n))
    for i in range(arm.n):
        z = np.array(axes[i])
        jac[:3, i] = np.cross(z, p_ee - np.array(origins[i]))
        jac[3:, i] = z
    mu2 = arm.damping * arm.damping
    dq = jac.T @ np.linalg.solve(jac @ jac.T + mu2 * np.eye(6), err)
    dq *= arm.step_gain
    max_dq = arm.max_joint_speed * dt
    peak = float(np.max(np.abs(dq)))
    if peak > max_dq:
        dq *= max_dq / peak
    out = []
    for qi, dqi, joint in zip(q, dq, arm.joints):
        out.append(min(joint.upper, max(joint.lower, qi + float(dqi))))
    return tuple(out)


# ---------------------------------------------------------------------------
# World

@dataclass
class SceneObject:
    id: int
    name: str
    half_extents: Vec3
    pose: Transform
    attached: bool = False


class World:
    """Deterministic fixed-timestep world owned by a single stepping task."""

    def __init__(self, model: SimModel, task: TaskSpec, seed: int):
        self.model = model
        self.task = task
        self.seed = seed
        rng = np.random.Generator(np.random.Philox(key=seed))
        self.q = model.arm.home_q
        self.gripper_width = model.gripper.w_max
        self.tick = 0
        self.task_success = False
        self._attached_id: int | None = None
        self._grasp_offset: Transform | None = None
        self.objects: list[SceneObject] = []
        for spec in task.objects:
            dx, dy = rng.uniform(-spec.xy_jitter, spec.xy_jitter, size=2)
            pose = Transform.from_translation(
                (spec.nominal[0] + float(dx), spec.nominal[1] + float(dy), spec.nominal[2])
            )
            self.objects.append(SceneObject(spec.id, spec.name, spec.half_extents, pose))
        self.ee_pose = forward_kinematics(model.arm, self.q)

    def _object(self, oid: int) -> SceneObject:
        for obj in self.objects:
            if obj.id == oid:
                return obj
        raise SimError(f"no object with id {oid}")

    def _settle(self, obj: SceneObject) -> None:
        """Drop obj straight down onto the highest support under its center."""
        x, y, _ = obj.pose.translation
        top = self.model.table_z
        for other in self.objects:
            if other.id == obj.id:
                continue
            ox, oy, oz = other.pose.translation
            if abs(x - ox) <= other.half_extents[0] and abs(y - oy) <= other.half_extents[1]:
                top = max(top, oz + other.half_extents[2])
        obj.pose = Transform(obj.pose.rotation, (x, y, top + obj.half_extents[2]))

    def step(self, cmd: RobotCommand | None, dt: float) -> SimState:
        """Advance one tick; fully determined by (state, cmd, dt)."""
        g = self.model.gripper
        if cmd is not None:
            self.q = servo_step(self.model.arm, self.q, cmd.target, dt)
            width_target = min(g.w_max, max(g.w_min, cmd.gripper_width))
        else:
            width_target = self.gripper_width
        self.ee_pose = forward_kinematics(self.model.arm, self.q)

        max_dw = g.slew_rate * dt
        dw = width_target - self.gripper_width
        if abs(dw) > max_dw:
            dw = math.copysign(max_dw, dw)
        self.gripper_width += dw

        ee_p = self.ee_pose.translation
        if self._attached_id is None:
            if self.gripper_width < g.grasp_width:
                best = None
                best_d = g.proximity
                for obj in self.objects:
                    op = obj.pose.translation
                    d = math.dist(ee_p, op)
                    if d <= best_d:
                        best, best_d = obj, d
                if best is not None:
                    best.attached = True
                    self._attached_id = best.id
                    self._grasp_offset = compose(inverse(self.ee_pose), best.pose)
        else:
            obj = self._object(self._attached_id)
            if self.gripper_width > g.release_width:
                obj.attached = False
                self._attached_id = None
                self._grasp_offset = None
                self._settle(obj)
            else:
                pose = compose(self.ee_pose, self._grasp_offset)
                floor = self.model.table_z + obj.half_extents[2]
                x, y, z = pose.translation
                if z < floor:
                    pose = Transform(pose.rotation, (x, y, floor))
                obj.pose = pose

        self.tick += 1
        if not self.task_success and check_success(
            self.task, self._snapshot(), attached_id=self._attached_id, gripper=g
        ):
            self.task_success = True
        return self.state()

    def _snapshot(self) -> SimState:
        return SimState(
            q=self.q,
            ee_pose=self.ee_pose,
            objects=tuple(
                ObjectPose(o.id, o.pose) for o in sorted(self.objects, key=lambda o: o.id)
            ),
            gripper_width=self.gripper_width,
            task_success=self.task_success,
            tick=self.tick,
        )

    def state(self) -> SimState:
        return self._snapshot()

    @property
    def attached_id(self) -> int | None:
        return self._attached_id


def reset(model: SimModel, task: TaskSpec, seed: int) -> World:
    """Fresh world: arm at home, object poses drawn by a counter-based RNG."""
    return World(model, task, seed)


_INFER = object()


def infer_attached_id(gripper: GripperSpec, state: SimState) -> int | None:
    """Best-effort attachment estimate from a wire snapshot.

    The serialized state carries no attachment flag, so consumers that only
    see snapshots approximate it: gripper within the release band and an
    object center inside the grasp proximity radius. The world itself tracks
    attachment exactly and passes it to check_success explicitly.
    """
    if state.gripper_width > gripper.release_width:
        return None
    best = None
    best_d = gripper.proximity
    for obj in state.objects:
        d = math.dist(state.ee_pose.translation, obj.pose.translation)
        if d <= best_d:
            best, best_d = obj.id, d
    return best


def check_success(
    task: TaskSpec,
    state: SimState,
    attached_id: int | None | object = _INFER,
    gripper: GripperSpec | None = None,
) -> bool:
    """Task success for a single snapshot (the world latches it across ticks).

    Lift wants the object held above the goal height; Pick-and-Place and
    Stack want it released in place. Callers that know the true attachment
    (the world) pass attached_id; otherwise it is inferred from the snapshot.
    """
    if attached_id is _INFER:
        if gripper is None:
            gripper = load_model().gripper
        attached_id = infer_attached_id(gripper, state)
    poses = {o.id: o.pose for o in state.objects}
    if task.kind == "lift":
        oid = task.objects[0].id
        goal_z = float(task.goal["table_z"]) + float(task.goal["lift_height"])
        return attached_id == oid and poses[oid].translation[2] >= goal_z
    if task.kind == "pickplace":
        oid = task.objects[0].id
        obj = poses[oid]
        cx, cy = task.goal["bin_center"]
        hx, hy = task.goal["bin_half"]
        inside = abs(obj.translation[0] - cx) <= hx and abs(obj.translation[1] - cy) <= hy
        return inside and attached_id != oid
    if task.kind == "stack":
        moved_id = int(task.goal["moved_id"])
        moved = poses[moved_id]
        target = poses[int(task.goal["target_id"])]
        moved_spec = _spec_for(task, moved_id)
        target_spec = _spec_for(task, int(task.goal["target_id"]))
        dxy = math.hypot(
            moved.translation[0] - target.translation[0],
            moved.translation[1] - target.translation[1],
        )
        rest_z = target.translation[2] + target_spec.half_extents[2] + moved_spec.half_extents[2]
        return (
            dxy <= float(task.goal["xy_tol"])
            and abs(moved.translation[2] - rest_z) <= float(task.goal["z_tol"])
            and attached_id != moved_id
        )
    raise SimError(f"unknown task kind {task.kind!r}")


def _spec_for(task: TaskSpec, oid: int) -> ObjectSpec:
    for spec in task.objects:
        if spec.id == oid:
            return spec
    raise SimError(f"task has no object {oid}")
