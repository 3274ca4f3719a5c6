"""Pose-quality metrics: ADD, accuracy at threshold, reprojection rms,
sampled oriented-box IoU, and the object model they are computed against.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from itertools import product
from pathlib import Path

import numpy as np

from .errors import EmptyDataset, EmptyModel
from .geometry import CameraIntrinsics, Pose, project_points, transform_points, inverse

DEFAULT_ADD_THRESHOLD = 0.10  # fraction of model diameter

_BBOX_SLACK = 1e-9


def _pairwise_max_distance(pts: np.ndarray) -> float:
    diffs = pts[:, None, :] - pts[None, :, :]
    return float(np.sqrt(np.max(np.sum(diffs ** 2, axis=-1))))


def _corner_name(ix: int, iy: int, iz: int) -> str:
    return f"corner_{ix}{iy}{iz}"


@dataclass(frozen=True)
class ObjectModel:
    """A rigid object: vertices, named keypoints, 3D bounding box, diameter.

    The default keypoint vocabulary is the 9-point set detectors emit: the
    8 bounding-box corners plus the box center ("centroid").
    """

    name: str
    vertices: np.ndarray                      # (N, 3) object frame, meters
    keypoints: dict[str, np.ndarray]          # name -> (3,)
    bbox_corners: np.ndarray                  # (8, 3)
    centroid: np.ndarray                      # (3,)
    diameter: float

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=float).reshape(-1, 3)
        if len(v) == 0:
            raise EmptyModel(f"model {self.name!r} has no vertices")
        bb = np.asarray(self.bbox_corners, dtype=float).reshape(8, 3)
        c = np.asarray(self.centroid, dtype=float).reshape(3)
        expected = _pairwise_max_distance(v)
        if abs(expected - self.diameter) > 1e-9 * max(1.0, expected):
            raise ValueError(
                f"model {self.name!r}: stored diameter {self.diameter} does not match "
                f"max pairwise vertex distance {expected}")
        lo, hi = bb.min(axis=0), bb.max(axis=0)
        if np.any(v < lo - _BBOX_SLACK) or np.any(v > hi + _BBOX_SLACK):
            raise ValueError(f"model {self.name!r}: bbox corners do not enclose all vertices")
        for arr in (v, bb, c):
            arr.flags.writeable = False
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "bbox_corners", bb)
        object.__setattr__(self, "centroid", c)
        object.__setattr__(self, "keypoints",
                           {k: np.asarray(p, dtype=float).reshape(3) for k, p in self.keypoints.items()})

    @staticmethod
    def from_vertices(name: str, vertices, keypoints: dict | None = None) -> "ObjectModel":
        """Build a model from raw vertices; bbox, centroid and diameter are derived.

        When ``keypoints`` is omitted the 9-point corner+centroid vocabulary
        is generated.
        """
        v = np.asarray(vertices, dtype=float).reshape(-1, 3)
        if len(v) == 0:
            raise EmptyModel(f"model {name!r} has no vertices")
        lo, hi = v.min(axis=0), v.max(axis=0)
        corners = np.array([[x, y, z] for x, y, z in product((lo[0], hi[0]),
                                                             (lo[1], hi[1]),
                                                             (lo[2], hi[2]))])
        center = (lo + hi) / 2.0
        if keypoints is None:
            keypoints = {}
            for idx, (ix, iy, iz) in enumerate(product((0, 1), repeat=3)):
                keypoints[_corner_name(ix, iy, iz)] = corners[idx]
            keypoints["centroid"] = center
        return ObjectModel(
            name=name,
            vertices=v,
            keypoints=keypoints,
            bbox_corners=corners,
            centroid=center,
            diameter=_pairwise_max_distance(v),
        )

    @property
    def keypoint_names(self) -> list[str]:
        return list(self.keypoints.keys())

    def keypoint_array(self, names: list[str] | None = None) -> np.ndarray:
        names = names or self.keypoint_names
        return np.array([self.keypoints[n] for n in names])

    # --- serialization ---------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "vertices": self.vertices.tolist(),
            "keypoints": {k: v.tolist() for k, v in self.keypoints.items()},
            "bbox_corners": self.bbox_corners.tolist(),
            "centroid": self.centroid.tolist(),
            "diameter": self.diameter,
        }

    @staticmethod
    def from_dict(d: dict) -> "ObjectModel":
        return ObjectModel(
            name=d["name"],
            vertices=np.asarray(d["vertices"], dtype=float),
            keypoints={k: np.asarray(v, dtype=float) for k, v in d["keypoints"].items()},
            bbox_corners=np.asarray(d["bbox_corners"], dtype=float),
            centroid=np.asarray(d["centroid"], dtype=float),
            diameter=float(d["diameter"]),
        )

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))

    @staticmethod
    def load(path) -> "ObjectModel":
        return ObjectModel.from_dict(json.loads(Path(path).read_text()))


def unit_cube_model(name: str = "unit_cube", size: float = 1.0) -> ObjectModel:
    """Convenience model: an axis-centered cube of the given edge length."""
    h = size / 2.0
    verts = [[x, y, z] for x, y, z in product((-h, h), repeat=3)]
    return ObjectModel.from_vertices(name, verts)


# --- metrics -----------------------------------------------------------------


def add_metric(pred: Pose, gt: Pose, model: ObjectModel, symmetric: bool = False) -> float:
    """Average distance between model vertices under the two poses (meters).

    ``symmetric=True`` computes the closest-point variant for objects with
    ambiguous views: each predicted vertex is matched to the nearest
    ground-truth-transformed vertex instead of its own counterpart.
    """
    if len(model.vertices) == 0:
        raise EmptyModel(f"model {model.name!r} has no vertices")
    a = transform_points(pred, model.vertices)
    b = transform_points(gt, model.vertices)
    if symmetric:
        d2 = np.sum((a[:, None, :] - b[None, :, :]) ** 2, axis=-1)
        return float(np.mean(np.sqrt(d2.min(axis=1))))
    return float(np.mean(np.linalg.norm(a - b, axis=1)))


def add_accuracy(records: list[tuple[Pose, Pose]], model: ObjectModel,
                 threshold_fraction: float = DEFAULT_ADD_THRESHOLD,
                 symmetric: bool = False) -> float:
    """Fraction of (pred, gt) pairs with ADD below threshold * diameter."""
    if not records:
        raise EmptyDataset("no records to score")
    if threshold_fraction <= 0:
        raise ValueError(f"threshold_fraction must be > 0, got {threshold_fraction}")
    limit = threshold_fraction * model.diameter
    hits = sum(1 for pred, gt in records if add_metric(pred, gt, model, symmetric) < limit)
    return hits / len(records)


def reprojection_rms(pred: Pose, gt: Pose, model: ObjectModel,
                     k: CameraIntrinsics) -> float:
    """RMS pixel distance between keypoints projected under the two poses."""
    kp = model.keypoint_array()
    a = project_points(kp, pred, k)
    b = project_points(kp, gt, k)
    return float(np.sqrt(np.mean(np.sum((a - b) ** 2, axis=1))))


def obb_iou_sampled(pred: Pose, gt: Pose, model: ObjectModel,
                    n_samples: int = 100_000, seed: int = 0) -> float:
    """Monte-Carlo IoU of the model's oriented bounding box under two poses.

    Points are sampled uniformly in the joint axis-aligned bound of the two
    transformed boxes; membership is tested in each pose's object frame.
    Deterministic for a fixed seed.
    """
    if n_samples < 10_000:
        raise ValueError(f"n_samples must be >= 10000 for a stable estimate, got {n_samples}")
    lo_box = model.bbox_corners.min(axis=0)
    hi_box = model.bbox_corners.max(axis=0)

    corners_a = transform_points(pred, model.bbox_corners)
    corners_b = transform_points(gt, model.bbox_corners)
    all_corners = np.vstack([corners_a, corners_b])
    lo, hi = all_corners.min(axis=0), all_corners.max(axis=0)

    rng = np.random.default_rng(seed)
    samples = rng.uniform(lo, hi, size=(n_samples, 3))

    def inside(pose: Pose) -> np.ndarray:
        local = transform_points(inverse(pose), samples)
        return np.all((local >= lo_box) & (local <= hi_box), axis=1)

    in_a = inside(pred)
    in_b = inside(gt)
    union = np.count_nonzero(in_a | in_b)
    if union == 0:
        return 0.0
    return float(np.count_nonzero(in_a & in_b) / union)
