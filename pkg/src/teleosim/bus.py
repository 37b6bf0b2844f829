"""Topic-based pub/sub decoupling the interface, mapper, and simulator nodes.

Control topics are latest-wins mailboxes (stale commands are harmful, so
older unread messages are dropped and counted). The record/step topic keeps
bounded history: the bus drops oldest past the depth and counts the loss,
and the recorder treats any observed drop as an episode error.
"""
from __future__ import annotations

import threading
from collections import deque
from dataclasses import dataclass
from enum import Enum

from .codec import MSG_TYPE_OF
from .messages import MasterState, RobotCommand, SimState, StepRecord

TOPIC_MASTER_STATE = "master/state"
TOPIC_ROBOT_COMMAND = "robot/command"
TOPIC_SIM_STATE = "sim/state"
TOPIC_RECORD_STEP = "record/step"

RECORD_DEPTH = 256


class BusError(Exception):
    pass


class UnknownTopic(BusError):
    pass


class TypeMismatch(BusError):
    pass


class Mode(Enum):
    LATEST_WINS = "latest_wins"
    BOUNDED = "bounded"


@dataclass
class _TopicInfo:
    name: str
    msg_class: type
    msg_type: int
    mode: Mode
    depth: int
    next_seq: int


class Subscription:
    """One consumer's mailbox on a topic. Owned by a single consumer."""

    def __init__(self, bus: "Bus", info: _TopicInfo):
        self._bus = bus
        self._info = info
        self._queue: deque = deque()
        self.drops = 0
        self.closed = False

    @property
    def topic(self) -> str:
        return self._info.name

    def _offer(self, seq: int, msg) -> None:
        # caller holds the bus lock
        if self._info.mode is Mode.LATEST_WINS:
            if self._queue:
                self._queue.clear()
                self.drops += 1
            self._queue.append((seq, msg))
        else:
            if len(self._queue) >= self._info.depth:
                self._queue.popleft()
                self.drops += 1
            self._queue.append((seq, msg))

    def poll(self):
        """Next unconsumed message, or None. Latest-wins keeps only the newest."""
        with self._bus._lock:
            if not self._queue:
                return None
            return self._queue.popleft()[1]

    def poll_seq(self):
        """Like poll() but returns (seq, message), or None."""
        with self._bus._lock:
            if not self._queue:
                return None
            return self._queue.popleft()

    def close(self) -> None:
        with self._bus._lock:
            self.closed = True
            self._bus._subs[self._info.name].discard(self)
            self._queue.clear()


class Bus:
    """Thread-safe topic registry; messages are immutable after publish."""

    def __init__(self):
        self._lock = threading.RLock()
        self._topics: dict[str, _TopicInfo] = {}
        self._subs: dict[str, set[Subscription]] = {}

    def register(self, name: str, msg_class: type, mode: Mode, depth: int = 0) -> None:
        with self._lock:
            if name in self._topics:
                raise BusError(f"topic {name!r} already registered")
            if msg_class not in MSG_TYPE_OF:
                raise TypeMismatch(f"{msg_class.__name__} is not a wire message class")
            self._topics[name] = _TopicInfo(
                name, msg_class, MSG_TYPE_OF[msg_class], mode, depth, 0
            )
            self._subs[name] = set()

    def topic_names(self) -> list[str]:
        with self._lock:
            return list(self._topics)

    def msg_class_for(self, topic: str) -> type:
        with self._lock:
            info = self._topics.get(topic)
            if info is None:
                raise UnknownTopic(topic)
            return info.msg_class

    def publish(self, topic: str, msg) -> int:
        """Deliver msg to every subscriber; returns the assigned sequence number."""
        with self._lock:
            info = self._topics.get(topic)
            if info is None:
                raise UnknownTopic(f"publish to unregistered topic {topic!r}")
            if type(msg) is not info.msg_class:
                raise TypeMismatch(
                    f"topic {topic!r} carries {info.msg_class.__name__}, "
                    f"got {type(msg).__name__}"
                )
            seq = info.next_seq
            info.next_seq += 1
            for sub in self._subs[topic]:
                sub._offer(seq, msg)
            return seq

    def subscribe(self, topic: str) -> Subscription:
        with self._lock:
            info = self._topics.get(topic)
            if info is None:
                raise UnknownTopic(f"subscribe to unregistered topic {topic!r}")
            sub = Subscription(self, info)
            self._subs[topic].add(sub)
            return sub


def standard_bus() -> Bus:
    """The four standard topics wired with their spec'd modes."""
    bus = Bus()
    bus.register(TOPIC_MASTER_STATE, MasterState, Mode.LATEST_WINS)
    bus.register(TOPIC_ROBOT_COMMAND, RobotCommand, Mode.LATEST_WINS)
    bus.register(TOPIC_SIM_STATE, SimState, Mode.LATEST_WINS)
    bus.register(TOPIC_RECORD_STEP, StepRecord, Mode.BOUNDED, depth=RECORD_DEPTH)
    return bus
