"""Demonstration buffer, dataset files, completion-time statistics, and
subset sampling.

Actions are stored as per-tick deltas of the commanded gripper pose (world
frame) plus an absolute jaw width, so a demonstration is invariant to where
the episode started. The absolute command stream is reconstructed by
integrating the deltas from the episode's starting pose — and the simulator
consumes that reconstructed stream during recording, which makes replay from
file bit-exact by construction.
"""
from __future__ import annotations

import statistics
import struct
from dataclasses import dataclass, field

import numpy as np

from .fileio import BadVersion, CorruptFile, read_framed, write_framed
from .geometry import Rotation, Transform, pose_to_floats
from .messages import RobotCommand, SimState, StepRecord
from .sim import SimModel, TaskSpec, World, reset

__all__ = [
    "Step",
    "Demonstration",
    "Dataset",
    "DemoRecorder",
    "ActionIntegrator",
    "RecorderError",
    "Finalized",
    "DimMismatch",
    "RecordOverflow",
    "Empty",
    "BadVersion",
    "CorruptFile",
    "observation_vector",
    "observation_dim",
    "ACTION_DIM",
    "stats",
    "stats_report",
    "subset",
    "save",
    "load",
    "replay",
]

DATASET_MAGIC = b"DS4D"
DATASET_VERSION = 1
ACTION_DIM = 7
ACTION_ENCODING = (
    "delta: world-frame d_position[3], axis-angle d_orientation[3] applied on "
    "the left, absolute gripper width[1]; integrate from the episode start pose"
)

# Hardware teleoperation baseline for the lift task, quoted for comparison
# in reports: completion time mean/std in seconds and demonstration count.
REFERENCE_LIFT = ("lift (dVRK hardware)", 3.54, 1.28, 238)


class RecorderError(Exception):
    pass


class Finalized(RecorderError):
    pass


class DimMismatch(RecorderError):
    pass


class RecordOverflow(RecorderError):
    pass


class Empty(RecorderError):
    pass


@dataclass(frozen=True)
class Step:
    obs: tuple[float, ...]
    action: tuple[float, ...]
    tick: int

    def __post_init__(self):
        if not all(map(np.isfinite, self.obs)) or not all(map(np.isfinite, self.action)):
            raise RecorderError("non-finite step data")
        if self.tick < 0:
            raise RecorderError(f"negative tick {self.tick}")


@dataclass(frozen=True)
class Demonstration:
    task: str
    operator_id: str
    steps: tuple[Step, ...]
    duration_s: float
    success: bool
    seed: int


@dataclass(frozen=True)
class Dataset:
    task: str
    dt: float
    obs_dim: int
    action_dim: int
    model_hash: str
    demonstrations: tuple[Demonstration, ...]

    def __post_init__(self):
        for demo in self.demonstrations:
            _check_demo(self, demo)


def _check_demo(ds: Dataset, demo: Demonstration) -> None:
    if demo.task != ds.task:
        raise DimMismatch(f"demo task {demo.task!r} != dataset task {ds.task!r}")
    for step in demo.steps:
        if len(step.obs) != ds.obs_dim or len(step.action) != ds.action_dim:
            raise DimMismatch(
                f"step dims ({len(step.obs)}, {len(step.action)}) != "
                f"({ds.obs_dim}, {ds.action_dim})"
            )
    if abs(demo.duration_s - len(demo.steps) * ds.dt) > 1e-9:
        raise RecorderError(
            f"duration {demo.duration_s} != {len(demo.steps)} steps x dt {ds.dt}"
        )
    if demo.success and not demo.steps:
        raise RecorderError("successful demo with no steps")


# ---------------------------------------------------------------------------
# Observations and action integration

def observation_vector(state: SimState) -> tuple[float, ...]:
    """Flat observation: EE pose 7, jaw width 1, then per object (sorted by
    id) its absolute pose 7 and its position relative to the EE 3."""
    out = list(pose_to_floats(state.ee_pose))
    out.append(state.gripper_width)
    ee_p = state.ee_pose.translation
    for obj in sorted(state.objects, key=lambda o: o.id):
        out.extend(pose_to_floats(obj.pose))
        out.extend(o - e for o, e in zip(obj.pose.translation, ee_p))
    return tuple(out)


def observation_dim(task: TaskSpec) -> int:
    return 8 + 10 * len(task.objects)


class ActionIntegrator:
    """Delta encoding and its exact inverse for the command stream.

    encode() turns the next absolute command into a delta from the running
    pose; apply() advances the running pose by a delta and returns the
    absolute command. Recording pipes every command through encode+apply and
    feeds the simulator the *reconstructed* command, so replaying the stored
    deltas repeats the exact same arithmetic.
    """

    def __init__(self, start: Transform):
        self.pose = start

    def encode(self, cmd: RobotCommand) -> tuple[float, ...]:
        dp = tuple(c - p for c, p in zip(cmd.target.translation, self.pose.translation))
        drot = (cmd.target.rotation * self.pose.rotation.inverse()).to_rotvec()
        return (*dp, *drot, cmd.gripper_width)

    def apply(
        self, action, stamp_ns: int = 0, max_translation: float | None = None
    ) -> RobotCommand:
        if len(action) != ACTION_DIM:
            raise DimMismatch(f"action length {len(action)} != {ACTION_DIM}")
        dp = tuple(float(v) for v in action[:3])
        if max_translation is not None:
            norm = sum(v * v for v in dp) ** 0.5
            if norm > max_translation:
                dp = tuple(v * max_translation / norm for v in dp)
        p = tuple(a + b for a, b in zip(self.pose.translation, dp))
        rot = Rotation.from_rotvec(tuple(float(v) for v in action[3:6])) * self.pose.rotation
        self.pose = Transform(rot, p)
        width = max(0.0, float(action[6]))
        return RobotCommand(target=self.pose, gripper_width=width, stamp_ns=stamp_ns)


# ---------------------------------------------------------------------------
# Recording

class DemoRecorder:
    """Accumulates one episode's steps; finalize() freezes it."""

    def __init__(self, task: str, operator_id: str, seed: int, dt: float):
        self.task = task
        self.operator_id = operator_id
        self.seed = seed
        self.dt = dt
        self._steps: list[Step] = []
        self._demo: Demonstration | None = None

    def append_step(self, obs, action, tick: int | None = None) -> None:
        if self._demo is not None:
            raise Finalized("append_step after finalize")
        self._steps.append(
            Step(
                obs=tuple(float(v) for v in obs),
                action=tuple(float(v) for v in action),
                tick=tick if tick is not None else len(self._steps),
            )
        )

    def append_record(self, rec: StepRecord) -> None:
        self.append_step(rec.obs, rec.action, rec.tick)

    def drain(self, subscription) -> None:
        """Pull every queued StepRecord; any observed drop aborts the episode."""
        while True:
            rec = subscription.poll()
            if rec is None:
                break
            self.append_record(rec)
        if subscription.drops:
            raise RecordOverflow(f"record stream dropped {subscription.drops} steps")

    def finalize(self, success: bool) -> Demonstration:
        if self._demo is not None:
            raise Finalized("finalize called twice")
        self._demo = Demonstration(
            task=self.task,
            operator_id=self.operator_id,
            steps=tuple(self._steps),
            duration_s=len(self._steps) * self.dt,
            success=success,
            seed=self.seed,
        )
        return self._demo


# ---------------------------------------------------------------------------
# Files

def save(dataset: Dataset, path) -> None:
    header = {
        "format": "demonstration dataset",
        "version": DATASET_VERSION,
        "task": dataset.task,
        "dt": dataset.dt,
        "obs_dim": dataset.obs_dim,
        "action_dim": dataset.action_dim,
        "model_hash": dataset.model_hash,
        "action_encoding": ACTION_ENCODING,
        "demo_count": len(dataset.demonstrations),
    }
    blocks = [_pack_demo(dataset, demo) for demo in dataset.demonstrations]
    write_framed(path, DATASET_MAGIC, DATASET_VERSION, header, blocks)


def load(path) -> Dataset:
    header, blocks = read_framed(path, DATASET_MAGIC, DATASET_VERSION)
    try:
        ds_args = dict(
            task=header["task"],
            dt=float(header["dt"]),
            obs_dim=int(header["obs_dim"]),
            action_dim=int(header["action_dim"]),
            model_hash=header["model_hash"],
        )
        count = int(header["demo_count"])
    except (KeyError, TypeError, ValueError) as e:
        raise CorruptFile(f"{path}: malformed header ({e})") from e
    if count != len(blocks):
        raise CorruptFile(f"{path}: header says {count} demos, file has {len(blocks)}")
    demos = tuple(
        _unpack_demo(ds_args["obs_dim"], ds_args["action_dim"], block, path)
        for block in blocks
    )
    try:
        return Dataset(demonstrations=demos, **ds_args)
    except RecorderError:
        raise
    except ValueError as e:
        raise CorruptFile(f"{path}: {e}") from e


_DEMO_META = struct.Struct("<QdB")  # seed, duration_s, success
_STEP_HEAD = struct.Struct("<Q")  # tick


def _pack_demo(ds: Dataset, demo: Demonstration) -> bytes:
    out = bytearray()
    op = demo.operator_id.encode()
    task = demo.task.encode()
    out += struct.pack("<H", len(task)) + task
    out += struct.pack("<H", len(op)) + op
    out += _DEMO_META.pack(demo.seed, demo.duration_s, 1 if demo.success else 0)
    out += struct.pack("<I", len(demo.steps))
    row = struct.Struct(f"<Q{ds.obs_dim}d{ds.action_dim}d")
    for step in demo.steps:
        out += row.pack(step.tick, *step.obs, *step.action)
    return bytes(out)


def _unpack_demo(obs_dim: int, action_dim: int, block: bytes, path) -> Demonstration:
    try:
        pos = 0
        (tlen,) = struct.unpack_from("<H", block, pos)
        pos += 2
        task = block[pos : pos + tlen].decode()
        pos += tlen
        (olen,) = struct.unpack_from("<H", block, pos)
        pos += 2
        operator_id = block[pos : pos + olen].decode()
        pos += olen
        seed, duration_s, success = _DEMO_META.unpack_from(block, pos)
        pos += _DEMO_META.size
        (n,) = struct.unpack_from("<I", block, pos)
        pos += 4
        row = struct.Struct(f"<Q{obs_dim}d{action_dim}d")
        steps = []
        for _ in range(n):
            vals = row.unpack_from(block, pos)
            pos += row.size
            steps.append(
                Step(
                    obs=vals[1 : 1 + obs_dim],
                    action=vals[1 + obs_dim :],
                    tick=vals[0],
                )
            )
        if pos != len(block):
            raise CorruptFile(f"{path}: demo block has trailing bytes")
    except struct.error as e:
        raise CorruptFile(f"{path}: demo block truncated ({e})") from e
    return Demonstration(
        task=task,
        operator_id=operator_id,
        steps=tuple(steps),
        duration_s=duration_s,
        success=bool(success),
        seed=seed,
    )


# ---------------------------------------------------------------------------
# Statistics, subsetting, replay

@dataclass(frozen=True)
class StatsSummary:
    mean: float
    std: float
    count: int
    degenerate: bool = False  # single sample: std reported as 0


def stats(durations) -> StatsSummary:
    vals = [float(v) for v in durations]
    if not vals:
        raise Empty("stats of an empty duration list")
    if len(vals) == 1:
        return StatsSummary(mean=vals[0], std=0.0, count=1, degenerate=True)
    return StatsSummary(
        mean=statistics.fmean(vals),
        std=statistics.stdev(vals),
        count=len(vals),
    )


def dataset_durations(dataset: Dataset, successful_only: bool = True) -> list[float]:
    return [
        d.duration_s
        for d in dataset.demonstrations
        if d.success or not successful_only
    ]


def stats_report(rows: list[tuple[str, StatsSummary]], include_reference: bool = True) -> str:
    """Aligned completion-time table: Mean, Standard Deviation, Demonstrations."""
    entries = [(label, f"{s.mean:.2f}", f"{s.std:.2f}", str(s.count)) for label, s in rows]
    if include_reference:
        label, mean, std, count = REFERENCE_LIFT
        entries.append((label, f"{mean:.2f}", f"{std:.2f}", str(count)))
    header = ("Task", "Mean (s)", "Std (s)", "Demos")
    widths = [
        max(len(header[i]), *(len(e[i]) for e in entries)) if entries else len(header[i])
        for i in range(4)
    ]
    lines = [
        "  ".join(h.ljust(w) for h, w in zip(header, widths)),
        "  ".join("-" * w for w in widths),
    ]
    for e in entries:
        lines.append("  ".join(v.ljust(w) for v, w in zip(e, widths)))
    return "\n".join(lines)


def subset(dataset: Dataset, fraction: float, seed: int) -> Dataset:
    """floor(fraction*N) demos sampled without replacement, original order."""
    if not (0 < fraction <= 1):
        raise RecorderError(f"fraction {fraction} out of (0, 1]")
    n = len(dataset.demonstrations)
    k = int(fraction * n)
    rng = np.random.Generator(np.random.Philox(key=seed))
    idx = sorted(rng.choice(n, size=k, replace=False).tolist()) if n else []
    return Dataset(
        task=dataset.task,
        dt=dataset.dt,
        obs_dim=dataset.obs_dim,
        action_dim=dataset.action_dim,
        model_hash=dataset.model_hash,
        demonstrations=tuple(dataset.demonstrations[i] for i in idx),
    )


def replay(demo: Demonstration, model: SimModel) -> SimState:
    """Re-run a demo's actions from its seed; returns the final state.

    Because recording fed the simulator integrator-reconstructed commands,
    the replayed trajectory repeats the original arithmetic exactly.
    """
    task = model.tasks[demo.task]
    world: World = reset(model, task, demo.seed)
    integ = ActionIntegrator(world.ee_pose)
    state = world.state()
    for step in demo.steps:
        cmd = integ.apply(step.action)
        state = world.step(cmd, model.dt)
    return state
