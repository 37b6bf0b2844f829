"""Bit-exact wire codec: binary envelope framing plus a JSON text variant.

Frame layout (all integers little-endian):

    magic   2 bytes  0x44 0x53
    version u8       (= 1)
    msg_type u8
    seq     u64      monotone per topic
    timestamp_ns u64
    payload_len  u32
    payload      bytes

Payload layouts use the canonical pose order (qw, qx, qy, qz, px, py, pz)
as 7 little-endian f64, quaternion canonicalized to w >= 0 on encode.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass

from .geometry import Transform, pose_from_floats, pose_to_floats
from .messages import MasterState, ObjectPose, RobotCommand, SimState, StepRecord

MAGIC = b"DS"
VERSION = 1
HEADER = struct.Struct("<2sBBQQI")
MAX_PAYLOAD = 1 << 20

MSG_MASTER_STATE = 1
MSG_ROBOT_COMMAND = 2
MSG_SIM_STATE = 3
MSG_STEP_RECORD = 4

# wire kind strings double as the standard topic names
KIND_FOR_TYPE = {
    MSG_MASTER_STATE: "master/state",
    MSG_ROBOT_COMMAND: "robot/command",
    MSG_SIM_STATE: "sim/state",
    MSG_STEP_RECORD: "record/step",
}
TYPE_FOR_KIND = {v: k for k, v in KIND_FOR_TYPE.items()}
MSG_TYPE_OF = {
    MasterState: MSG_MASTER_STATE,
    RobotCommand: MSG_ROBOT_COMMAND,
    SimState: MSG_SIM_STATE,
    StepRecord: MSG_STEP_RECORD,
}
CLASS_OF_TYPE = {v: k for k, v in MSG_TYPE_OF.items()}

_POSE = struct.Struct("<7d")
_F64 = struct.Struct("<d")
_U64 = struct.Struct("<Q")
_U16 = struct.Struct("<H")


class CodecError(Exception):
    """Base for all decode rejections; decoding never raises anything else."""


class BadMagic(CodecError):
    pass


class BadVersion(CodecError):
    pass


class BadLength(CodecError):
    pass


class UnknownType(CodecError):
    pass


class TrailingBytes(CodecError):
    pass


class BadPayload(CodecError):
    """Structurally parseable but semantically invalid payload."""


@dataclass(frozen=True)
class Frame:
    msg_type: int
    seq: int
    timestamp_ns: int
    message: object


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise BadLength(f"payload truncated: need {n} bytes at offset {self.pos}")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def u8(self) -> int:
        return self.take(1)[0]

    def u16(self) -> int:
        return _U16.unpack(self.take(2))[0]

    def u64(self) -> int:
        return _U64.unpack(self.take(8))[0]

    def f64(self) -> float:
        return _F64.unpack(self.take(8))[0]

    def pose(self) -> Transform:
        vals = _POSE.unpack(self.take(56))
        try:
            return pose_from_floats(vals)
        except ValueError as e:
            raise BadPayload(str(e)) from e

    def done(self) -> None:
        if self.pos != len(self.buf):
            raise TrailingBytes(f"{len(self.buf) - self.pos} unconsumed payload bytes")


def _pack_pose(t: Transform) -> bytes:
    return _POSE.pack(*pose_to_floats(t))


def encode_payload(msg) -> tuple[int, bytes]:
    """Serialize a message; returns (msg_type, payload bytes)."""
    if isinstance(msg, MasterState):
        payload = _pack_pose(msg.tip_pose) + struct.pack(
            "<dBQ", msg.grip, msg.pedals, msg.stamp_ns
        )
        return MSG_MASTER_STATE, payload
    if isinstance(msg, RobotCommand):
        payload = _pack_pose(msg.target) + struct.pack(
            "<dQ", msg.gripper_width, msg.stamp_ns
        )
        return MSG_ROBOT_COMMAND, payload
    if isinstance(msg, SimState):
        parts = [struct.pack("<B", len(msg.q))]
        parts.append(struct.pack(f"<{len(msg.q)}d", *msg.q))
        parts.append(_pack_pose(msg.ee_pose))
        parts.append(struct.pack("<B", len(msg.objects)))
        for obj in msg.objects:
            parts.append(_U16.pack(obj.id))
            parts.append(_pack_pose(obj.pose))
        parts.append(
            struct.pack("<dBQ", msg.gripper_width, 1 if msg.task_success else 0, msg.tick)
        )
        return MSG_SIM_STATE, b"".join(parts)
    if isinstance(msg, StepRecord):
        payload = struct.pack("<QHH", msg.tick, len(msg.obs), len(msg.action))
        payload += struct.pack(f"<{len(msg.obs)}d", *msg.obs)
        payload += struct.pack(f"<{len(msg.action)}d", *msg.action)
        return MSG_STEP_RECORD, payload
    raise TypeError(f"not a wire message: {type(msg).__name__}")


def decode_payload(msg_type: int, payload: bytes):
    """Parse and validate one payload; raises a CodecError subclass on any defect."""
    r = _Reader(payload)
    try:
        if msg_type == MSG_MASTER_STATE:
            pose = r.pose()
            grip, pedals, stamp = struct.unpack("<dBQ", r.take(17))
            r.done()
            msg = MasterState(pose, grip, pedals, stamp)
        elif msg_type == MSG_ROBOT_COMMAND:
            pose = r.pose()
            width, stamp = struct.unpack("<dQ", r.take(16))
            r.done()
            msg = RobotCommand(pose, width, stamp)
        elif msg_type == MSG_SIM_STATE:
            n = r.u8()
            if n == 0 or n > 32:
                raise BadPayload(f"implausible joint count {n}")
            q = struct.unpack(f"<{n}d", r.take(8 * n))
            ee = r.pose()
            n_obj = r.u8()
            objects = []
            for _ in range(n_obj):
                oid = r.u16()
                objects.append(ObjectPose(oid, r.pose()))
            width, success, tick = struct.unpack("<dBQ", r.take(17))
            if success > 1:
                raise BadPayload(f"success flag must be 0 or 1, got {success}")
            r.done()
            msg = SimState(q, ee, tuple(objects), width, bool(success), tick)
        elif msg_type == MSG_STEP_RECORD:
            tick, obs_dim, act_dim = struct.unpack("<QHH", r.take(12))
            obs = struct.unpack(f"<{obs_dim}d", r.take(8 * obs_dim))
            action = struct.unpack(f"<{act_dim}d", r.take(8 * act_dim))
            r.done()
            msg = StepRecord(tick, obs, action)
        else:
            raise UnknownType(f"unknown msg_type {msg_type}")
    except CodecError:
        raise
    except (ValueError, struct.error) as e:
        raise BadPayload(str(e)) from e
    return msg


def encode_frame(msg, seq: int, timestamp_ns: int) -> bytes:
    msg_type, payload = encode_payload(msg)
    header = HEADER.pack(MAGIC, VERSION, msg_type, seq, timestamp_ns, len(payload))
    return header + payload


def decode_frame(buf: bytes) -> Frame:
    """Decode one complete frame; buf must contain exactly one frame."""
    if len(buf) < HEADER.size:
        raise BadLength(f"frame shorter than header: {len(buf)} bytes")
    magic, version, msg_type, seq, ts, payload_len = HEADER.unpack_from(buf, 0)
    if magic != MAGIC:
        raise BadMagic(f"bad magic {magic!r}")
    if version != VERSION:
        raise BadVersion(f"unsupported version {version}")
    if payload_len > MAX_PAYLOAD:
        raise BadLength(f"payload_len {payload_len} exceeds cap")
    body = buf[HEADER.size :]
    if len(body) < payload_len:
        raise BadLength(f"expected {payload_len} payload bytes, got {len(body)}")
    if len(body) > payload_len:
        raise TrailingBytes(f"{len(body) - payload_len} bytes after frame end")
    return Frame(msg_type, seq, ts, decode_payload(msg_type, body))


# ---------------------------------------------------------------------------
# JSON text variant (field-for-field), used over the WebSocket endpoint.

def _pose_list(t: Transform) -> list[float]:
    return list(pose_to_floats(t))


def message_to_obj(msg) -> dict:
    if isinstance(msg, MasterState):
        return {
            "tip_pose": _pose_list(msg.tip_pose),
            "grip": msg.grip,
            "pedals": msg.pedals,
            "stamp_ns": msg.stamp_ns,
        }
    if isinstance(msg, RobotCommand):
        return {
            "target": _pose_list(msg.target),
            "gripper_width": msg.gripper_width,
            "stamp_ns": msg.stamp_ns,
        }
    if isinstance(msg, SimState):
        return {
            "q": list(msg.q),
            "ee_pose": _pose_list(msg.ee_pose),
            "objects": [{"id": o.id, "pose": _pose_list(o.pose)} for o in msg.objects],
            "gripper_width": msg.gripper_width,
            "task_success": msg.task_success,
            "tick": msg.tick,
        }
    if isinstance(msg, StepRecord):
        return {"tick": msg.tick, "obs": list(msg.obs), "action": list(msg.action)}
    raise TypeError(f"not a wire message: {type(msg).__name__}")


def message_from_obj(kind: str, obj: dict):
    if kind not in TYPE_FOR_KIND:
        raise UnknownType(f"unknown message kind {kind!r}")
    try:
        if kind == "master/state":
            return MasterState(
                pose_from_floats(obj["tip_pose"]),
                float(obj["grip"]),
                int(obj["pedals"]),
                int(obj["stamp_ns"]),
            )
        if kind == "robot/command":
            return RobotCommand(
                pose_from_floats(obj["target"]),
                float(obj["gripper_width"]),
                int(obj["stamp_ns"]),
            )
        if kind == "sim/state":
            return SimState(
                tuple(float(v) for v in obj["q"]),
                pose_from_floats(obj["ee_pose"]),
                tuple(
                    ObjectPose(int(o["id"]), pose_from_floats(o["pose"]))
                    for o in obj["objects"]
                ),
                float(obj["gripper_width"]),
                bool(obj["task_success"]),
                int(obj["tick"]),
            )
        return StepRecord(
            int(obj["tick"]),
            tuple(float(v) for v in obj["obs"]),
            tuple(float(v) for v in obj["action"]),
        )
    except CodecError:
        raise
    except (KeyError, TypeError, ValueError) as e:
        raise BadPayload(str(e)) from e


def encode_text_frame(msg, seq: int, timestamp_ns: int) -> str:
    msg_type, _ = encode_payload(msg)
    return json.dumps(
        {
            "v": VERSION,
            "type": KIND_FOR_TYPE[msg_type],
            "seq": seq,
            "timestamp_ns": timestamp_ns,
            "msg": message_to_obj(msg),
        }
    )


def decode_text_frame(text: str) -> Frame:
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as e:
        raise BadPayload(f"invalid JSON: {e}") from e
    if not isinstance(obj, dict):
        raise BadPayload("frame must be a JSON object")
    if obj.get("v") != VERSION:
        raise BadVersion(f"unsupported version {obj.get('v')!r}")
    kind = obj.get("type")
    if kind not in TYPE_FOR_KIND:
        raise UnknownType(f"unknown message kind {kind!r}")
    try:
        seq = int(obj["seq"])
        ts = int(obj["timestamp_ns"])
        body = obj["msg"]
    except (KeyError, TypeError, ValueError) as e:
        raise BadPayload(str(e)) from e
    msg = message_from_obj(kind, body)
    return Frame(TYPE_FOR_KIND[kind], seq, ts, msg)
