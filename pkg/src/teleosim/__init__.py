"""Teleoperated desk manipulation: master-to-robot pose mapping, a kinematic
simulator, demonstration recording, and behavior cloning, joined by a typed
message bus and a small binary/JSON wire protocol.
"""

__version__ = "0.1.0"
