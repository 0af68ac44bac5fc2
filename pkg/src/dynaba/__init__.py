"""Bundle adjustment for scenes with articulated dynamic objects.

Jointly optimizes camera poses, static landmarks, per-frame dynamic object
points, rigid segment lengths, and per-frame object motions, with outlier
pruning and an evaluation harness for simulated sequences.
"""

__version__ = "0.1.0"

from .geometry import Pose, Rotation, LogMapError, exp, log, compose, inverse, act

__all__ = [
    "Pose",
    "Rotation",
    "LogMapError",
    "exp",
    "log",
    "compose",
    "inverse",
    "act",
    "__version__",
]
