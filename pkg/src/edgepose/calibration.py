"""Three-frame transform graph: AR device, robot, and the robot's map.

The AR-to-map transform is the composition of the AR-to-robot pose estimate
with the robot-to-map pose the robot's own localization supplies. Spatial
anchors are modeled as a freshness contract: edges carry timestamps and
queries reject stale inputs.

Single-writer, multi-reader: updates are serialized by a lock; queries read
an immutable snapshot of each edge.
"""

from __future__ import annotations

import threading
import time
from dataclasses import dataclass

from .errors import MissingEdge, NoCycle, NonMonotonicTimestamp, StaleEdge
from .geometry import Pose, compose, inverse

FRAMES = ("AR", "Robot", "Map")


def _monotonic_ms() -> float:
    return time.monotonic() * 1000.0


@dataclass(frozen=True)
class Edge:
    pose: Pose
    timestamp_ms: float


class FrameGraph:
    """Timestamped rigid transforms between the AR, Robot and Map frames.

    Edges are stored in one canonical direction; the reverse query returns
    the inverse. ``clock`` is injectable for tests and defaults to the
    monotonic clock in milliseconds.
    """

    def __init__(self, clock=None):
        self._edges: dict[tuple[str, str], Edge] = {}
        self._lock = threading.Lock()
        self.clock = clock or _monotonic_ms

    @staticmethod
    def _validate_frames(a: str, b: str):
        if a not in FRAMES or b not in FRAMES:
            raise ValueError(f"frames must be among {FRAMES}, got {a!r} -> {b!r}")
        if a == b:
            raise ValueError(f"self-edge {a!r} -> {b!r} is not meaningful")

    def update_edge(self, from_frame: str, to_frame: str, pose: Pose,
                    t: float | None = None) -> None:
        """Replace the edge; the reverse direction updates implicitly.

        Raises:
            NonMonotonicTimestamp: ``t`` is older than the stored edge (in
                either direction).
        """
        self._validate_frames(from_frame, to_frame)
        if t is None:
            t = self.clock()
        with self._lock:
            for key, stored_pose in (((from_frame, to_frame), pose),
                                     ((to_frame, from_frame), inverse(pose))):
                prev = self._edges.get(key)
                if prev is not None and t < prev.timestamp_ms:
                    raise NonMonotonicTimestamp(
                        f"edge {key[0]}->{key[1]}: timestamp {t} ms is older than "
                        f"stored {prev.timestamp_ms} ms")
                self._edges[key] = Edge(pose=stored_pose, timestamp_ms=t)

    def edge(self, from_frame: str, to_frame: str) -> Edge:
        self._validate_frames(from_frame, to_frame)
        e = self._edges.get((from_frame, to_frame))
        if e is None:
            raise MissingEdge(f"no edge {from_frame}->{to_frame}")
        return e

    def _fresh_edge(self, from_frame: str, to_frame: str,
                    max_staleness_ms: float, now: float) -> Edge:
        e = self.edge(from_frame, to_frame)
        age = now - e.timestamp_ms
        if age > max_staleness_ms:
            raise StaleEdge(
                f"edge {from_frame}-{to_frame} is {age:.0f} ms old "
                f"(limit {max_staleness_ms:.0f} ms)",
                edge=f"{from_frame}-{to_frame}", age_ms=age)
        return e

    def ar_to_map(self, max_staleness_ms: float = float("inf")) -> tuple[Pose, float]:
        """T_AR->Map = T_AR->Robot composed with T_Robot->Map.

        Returns the pose and its effective timestamp (the older input).

        Raises:
            MissingEdge: a constituent edge was never observed.
            StaleEdge: a constituent edge is older than the limit; the
                message names the edge and its age.
        """
        now = self.clock()
        ar_robot = self._fresh_edge("AR", "Robot", max_staleness_ms, now)
        robot_map = self._fresh_edge("Robot", "Map", max_staleness_ms, now)
        pose = compose(ar_robot.pose, robot_map.pose)
        return pose, min(ar_robot.timestamp_ms, robot_map.timestamp_ms)

    def consistency_check(self) -> tuple[float, float]:
        """Residual of the AR->Robot->Map->AR cycle against identity.

        Requires a directly observed AR->Map edge to close the cycle.
        Returns (rotation residual in radians, translation residual in m).

        Raises:
            NoCycle: one of the three edges is missing.
        """
        try:
            ar_robot = self.edge("AR", "Robot").pose
            robot_map = self.edge("Robot", "Map").pose
            map_ar = self.edge("Map", "AR").pose
        except MissingEdge as exc:
            raise NoCycle(f"cannot close AR->Robot->Map->AR cycle: {exc}") from exc
        cycle = compose(compose(ar_robot, robot_map), map_ar)
        identity = Pose.identity()
        return (cycle.rotation_angle_to(identity),
                cycle.translation_distance_to(identity))
