"""Annotation records, JSON dataset persistence, pose-consistent
augmentation, and synthetic frame generation.

Wire schema (version 1.0)::

    {
      "schema_version": "1.0",
      "model": "<object model name>",
      "records": [
        {
          "image_id": str, "image_path": str, "object_class": str,
          "pose": {"q": [w, x, y, z], "t": [x, y, z]},
          "intrinsics": {"fx", "fy", "cx", "cy", "width", "height", "k1", "k2"},
          "keypoints_2d": {"<name>": [u, v], ...},
          "bbox_2d": [u_min, v_min, u_max, v_max],
          "source": "real" | "synthetic" | "augmented",
          "parent_id": str?,            # augmented records only
          "chirality_approximate": bool?  # hflip records only
        }, ...
      ]
    }

Unknown JSON keys are preserved verbatim through a load/save round trip.
Synthetic images are written as PNG; JPEG is accepted on load.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np
from PIL import Image, ImageDraw

from .errors import (
    EdgePoseError,
    KeypointsOutOfFrame,
    MalformedRecord,
    PnPFailure,
    SchemaVersionMismatch,
    UnsatisfiablePose,
)
from .geometry import CameraIntrinsics, Pose, compose, project_points
from .metrics import ObjectModel
from .pnp import Correspondence, solve_pnp

SCHEMA_VERSION = "1.0"
CONSISTENCY_TOL_PX = 0.5

_RECORD_KEYS = {"image_id", "image_path", "object_class", "pose", "intrinsics",
                "keypoints_2d", "bbox_2d", "source", "parent_id", "chirality_approximate"}
_DATASET_KEYS = {"schema_version", "model", "records"}
_SOURCES = ("real", "synthetic", "augmented")


@dataclass
class AnnotationRecord:
    """Ground truth for one image: object-in-camera pose plus 2D labels."""

    image_id: str
    image_path: str
    object_class: str
    pose: Pose
    intrinsics: CameraIntrinsics
    keypoints_2d: dict[str, np.ndarray]
    bbox_2d: tuple[float, float, float, float]
    source: str = "real"
    parent_id: str | None = None
    chirality_approximate: bool = False
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.source not in _SOURCES:
            raise ValueError(f"source must be one of {_SOURCES}, got {self.source!r}")
        self.keypoints_2d = {k: np.asarray(v, dtype=float).reshape(2)
                             for k, v in self.keypoints_2d.items()}
        u0, v0, u1, v1 = (float(x) for x in self.bbox_2d)
        if not (u0 < u1 and v0 < v1):
            raise ValueError(f"degenerate bbox {self.bbox_2d} on record {self.image_id!r}")
        for name, (u, v) in self.keypoints_2d.items():
            if not (u0 <= u <= u1 and v0 <= v <= v1):
                raise ValueError(
                    f"keypoint {name!r} at ({u:.1f}, {v:.1f}) outside bbox on "
                    f"record {self.image_id!r}")
        self.bbox_2d = (u0, v0, u1, v1)

    def to_dict(self) -> dict:
        d = {
            "image_id": self.image_id,
            "image_path": self.image_path,
            "object_class": self.object_class,
            "pose": {"q": self.pose.q.tolist(), "t": self.pose.t.tolist()},
            "intrinsics": self.intrinsics.to_dict(),
            "keypoints_2d": {k: v.tolist() for k, v in self.keypoints_2d.items()},
            "bbox_2d": list(self.bbox_2d),
            "source": self.source,
        }
        if self.parent_id is not None:
            d["parent_id"] = self.parent_id
        if self.chirality_approximate:
            d["chirality_approximate"] = True
        d.update(self.extra)
        return d

    @staticmethod
    def from_dict(d: dict, index: int | None = None) -> "AnnotationRecord":
        def need(key):
            if key not in d:
                raise MalformedRecord(
                    f"record {index if index is not None else '?'} missing field {key!r}",
                    index=index, field=key)
            return d[key]

        pose_d = need("pose")
        intr_d = need("intrinsics")
        try:
            pose = Pose(q=pose_d["q"], t=pose_d["t"])
        except (KeyError, TypeError, ValueError) as exc:
            raise MalformedRecord(f"record {index}: bad pose block ({exc})",
                                  index=index, field="pose") from exc
        try:
            intr = CameraIntrinsics.from_dict(intr_d)
        except (KeyError, TypeError, ValueError) as exc:
            raise MalformedRecord(f"record {index}: bad intrinsics block ({exc})",
                                  index=index, field="intrinsics") from exc
        extra = {k: v for k, v in d.items() if k not in _RECORD_KEYS}
        try:
            return AnnotationRecord(
                image_id=str(need("image_id")),
                image_path=str(need("image_path")),
                object_class=str(need("object_class")),
                pose=pose,
                intrinsics=intr,
                keypoints_2d={k: v for k, v in need("keypoints_2d").items()},
                bbox_2d=tuple(need("bbox_2d")),
                source=str(need("source")),
                parent_id=d.get("parent_id"),
                chirality_approximate=bool(d.get("chirality_approximate", False)),
                extra=extra,
            )
        except (TypeError, ValueError) as exc:
            raise MalformedRecord(f"record {index}: {exc}", index=index,
                                  field="record") from exc

    def keypoint_consistency_px(self, model: ObjectModel) -> float:
        """Max deviation between stored keypoints and fresh projections."""
        names = [n for n in self.keypoints_2d if n in model.keypoints]
        if not names:
            return 0.0
        proj = project_points(model.keypoint_array(names), self.pose, self.intrinsics)
        stored = np.array([self.keypoints_2d[n] for n in names])
        return float(np.max(np.linalg.norm(proj - stored, axis=1)))


@dataclass
class Dataset:
    records: list[AnnotationRecord]
    model_name: str
    schema_version: str = SCHEMA_VERSION
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        ids = [r.image_id for r in self.records]
        if len(ids) != len(set(ids)):
            dupes = sorted({i for i in ids if ids.count(i) > 1})
            raise ValueError(f"duplicate image_id(s) in dataset: {dupes}")

    def __len__(self):
        return len(self.records)

    def by_id(self, image_id: str) -> AnnotationRecord | None:
        for r in self.records:
            if r.image_id == image_id:
                return r
        return None

    def to_dict(self) -> dict:
        d = {
            "schema_version": self.schema_version,
            "model": self.model_name,
            "records": [r.to_dict() for r in self.records],
        }
        d.update(self.extra)
        return d


def save_dataset(ds: Dataset, path) -> None:
    Path(path).write_text(json.dumps(ds.to_dict(), indent=2))


def load_dataset(path) -> Dataset:
    """Parse a dataset file, preserving unknown fields.

    Raises:
        SchemaVersionMismatch: the file declares a different schema version.
        MalformedRecord: a record is missing or has an invalid field; the
            message names the record index and the field.
    """
    raw = json.loads(Path(path).read_text())
    version = raw.get("schema_version")
    if version != SCHEMA_VERSION:
        raise SchemaVersionMismatch(
            f"expected schema_version {SCHEMA_VERSION!r}, file has {version!r}")
    records = [AnnotationRecord.from_dict(rd, index=i)
               for i, rd in enumerate(raw.get("records", []))]
    extra = {k: v for k, v in raw.items() if k not in _DATASET_KEYS}
    return Dataset(records=records, model_name=raw.get("model", ""),
                   schema_version=version, extra=extra)


# --- augmentation -------------------------------------------------------------


@dataclass(frozen=True)
class Rotate:
    """In-plane rotation about the principal point, degrees, visually CCW."""
    degrees: float


@dataclass(frozen=True)
class Scale:
    factor: float


@dataclass(frozen=True)
class HFlip:
    pass


@dataclass(frozen=True)
class Contrast:
    """Linear contrast stretch about mid-gray; simulates bad lighting."""
    gamma: float


AugmentOp = Rotate | Scale | HFlip | Contrast


def _rotation_matrix_2d(theta_img: float) -> np.ndarray:
    # visually-CCW rotation by theta in (u, v) coordinates with +v down
    c, s = math.cos(theta_img), math.sin(theta_img)
    return np.array([[c, s], [-s, c]])


def _check_in_frame(points: dict[str, np.ndarray], k: CameraIntrinsics, what: str):
    for name, (u, v) in points.items():
        if not (0 <= u <= k.width - 1 and 0 <= v <= k.height - 1):
            raise KeypointsOutOfFrame(
                f"{what}: keypoint {name!r} lands at ({u:.1f}, {v:.1f}), "
                f"outside {k.width}x{k.height}")


def _bbox_of(points: np.ndarray, pad: float = 0.0) -> tuple[float, float, float, float]:
    lo = points.min(axis=0) - pad
    hi = points.max(axis=0) + pad
    return (float(lo[0]), float(lo[1]), float(hi[0]), float(hi[1]))


def augment(rec: AnnotationRecord, image: Image.Image, op: AugmentOp,
            model: ObjectModel | None = None) -> tuple[AnnotationRecord, Image.Image]:
    """Apply one augmentation, keeping annotations consistent with pixels.

    hflip re-solves the pose from the mirrored keypoints (a mirrored view of
    a chiral object has no exact rigid pose) and needs ``model``; the output
    record is flagged ``chirality_approximate``.

    Raises:
        KeypointsOutOfFrame: rotate/scale pushed a keypoint outside the image.
        PnPFailure: hflip pose re-solve failed.
    """
    k = rec.intrinsics

    if isinstance(op, Contrast):
        out = _apply_contrast(image, op.gamma)
        new = replace(rec,
                      image_id=f"{rec.image_id}_contrast{op.gamma:g}",
                      source="augmented", parent_id=rec.image_id,
                      keypoints_2d=dict(rec.keypoints_2d))
        return new, out

    if isinstance(op, Scale):
        s = op.factor
        if s <= 0:
            raise ValueError(f"scale factor must be positive, got {s}")
        new_k = k.scaled(s)
        kps = {n: p * s for n, p in rec.keypoints_2d.items()}
        _check_in_frame(kps, new_k, f"scale({s:g})")
        out = image.resize((new_k.width, new_k.height), Image.BILINEAR)
        bbox = tuple(np.asarray(rec.bbox_2d) * s)
        new = replace(rec,
                      image_id=f"{rec.image_id}_scale{s:g}",
                      source="augmented", parent_id=rec.image_id,
                      intrinsics=new_k, keypoints_2d=kps, bbox_2d=bbox)
        return new, out

    if isinstance(op, Rotate):
        if abs(k.fx - k.fy) > 1e-9 * k.fx:
            raise ValueError(
                "in-plane rotation requires square pixels (fx == fy); "
                f"got fx={k.fx}, fy={k.fy}")
        theta = math.radians(op.degrees)
        m = _rotation_matrix_2d(theta)
        center = np.array([k.cx, k.cy])
        kps = {n: center + m @ (p - center) for n, p in rec.keypoints_2d.items()}
        _check_in_frame(kps, k, f"rotate({op.degrees:g})")
        # camera-frame roll by -theta reproduces the pixel rotation exactly
        new_pose = compose(Pose.from_axis_angle([0, 0, 1], -theta), rec.pose)
        # PIL centers live on pixel corners; +0.5 puts the axis on (cx, cy)
        out = image.rotate(op.degrees, center=(k.cx + 0.5, k.cy + 0.5),
                           resample=Image.BILINEAR)
        u0, v0, u1, v1 = rec.bbox_2d
        box_pts = np.array([[u0, v0], [u1, v0], [u1, v1], [u0, v1]])
        bbox = _bbox_of((box_pts - center) @ m.T + center)
        new = replace(rec,
                      image_id=f"{rec.image_id}_rot{op.degrees:g}",
                      source="augmented", parent_id=rec.image_id,
                      pose=new_pose, keypoints_2d=kps, bbox_2d=bbox)
        return new, out

    if isinstance(op, HFlip):
        if model is None:
            raise ValueError("hflip needs the object model to re-solve the pose")
        w = k.width
        kps = {n: np.array([w - 1 - p[0], p[1]]) for n, p in rec.keypoints_2d.items()}
        corrs = [Correspondence(model.keypoints[n], p)
                 for n, p in kps.items() if n in model.keypoints]
        try:
            result = solve_pnp(corrs, k)
        except EdgePoseError as exc:
            raise PnPFailure(f"hflip pose re-solve failed: {exc}") from exc
        out = image.transpose(Image.FLIP_LEFT_RIGHT)
        u0, v0, u1, v1 = rec.bbox_2d
        bbox = (w - 1 - u1, v0, w - 1 - u0, v1)
        new = replace(rec,
                      image_id=f"{rec.image_id}_hflip",
                      source="augmented", parent_id=rec.image_id,
                      pose=result.pose, keypoints_2d=kps, bbox_2d=bbox,
                      chirality_approximate=True)
        return new, out

    raise TypeError(f"unknown augmentation op: {op!r}")


def _apply_contrast(image: Image.Image, gamma: float) -> Image.Image:
    arr = np.asarray(image).astype(np.float64)
    out = np.clip((arr - 127.5) * gamma + 127.5, 0, 255).astype(np.uint8)
    return Image.fromarray(out, mode=image.mode)


# --- synthetic generation ------------------------------------------------------

PoseSampler = Callable[[np.random.Generator], Pose]

_BOX_EDGES = [(0, 1), (0, 2), (1, 3), (2, 3),
              (4, 5), (4, 6), (5, 7), (6, 7),
              (0, 4), (1, 5), (2, 6), (3, 7)]


def uniform_pose_sampler(distance_range=(1.0, 4.0), max_offset_frac=0.15,
                         max_angle=math.pi) -> PoseSampler:
    """Poses at a uniformly drawn distance, random orientation, small lateral offset."""
    def sample(rng: np.random.Generator) -> Pose:
        d = rng.uniform(*distance_range)
        axis = rng.normal(size=3)
        angle = rng.uniform(0, max_angle)
        off = rng.uniform(-max_offset_frac, max_offset_frac, 2) * d
        return Pose.from_axis_angle(axis, angle, (off[0], off[1], d))
    return sample


def fixed_distance_sampler(distance: float, max_offset_frac=0.05,
                           max_angle=math.pi) -> PoseSampler:
    """Poses at an exact distance from the camera (for distance sweeps)."""
    def sample(rng: np.random.Generator) -> Pose:
        axis = rng.normal(size=3)
        angle = rng.uniform(0, max_angle)
        off = rng.uniform(-max_offset_frac, max_offset_frac, 2) * distance
        t = np.array([off[0], off[1], 0.0])
        t[2] = math.sqrt(max(distance ** 2 - t[0] ** 2 - t[1] ** 2, 1e-6))
        return Pose.from_axis_angle(axis, angle, t)
    return sample


def render_wireframe(model: ObjectModel, pose: Pose, k: CameraIntrinsics,
                     rng: np.random.Generator | None = None,
                     noise_background: bool = True) -> Image.Image:
    """Point-sprite + bbox-edge rendering of the model; no photorealism."""
    if noise_background and rng is not None:
        bg = rng.integers(20, 60, size=(k.height, k.width, 3), dtype=np.uint8)
        img = Image.fromarray(bg, "RGB")
    else:
        img = Image.new("RGB", (k.width, k.height), (32, 32, 32))
    draw = ImageDraw.Draw(img)
    corners = project_points(model.bbox_corners, pose, k)
    for i, j in _BOX_EDGES:
        draw.line([tuple(corners[i]), tuple(corners[j])], fill=(0, 200, 80), width=1)
    kp = project_points(model.keypoint_array(), pose, k)
    for u, v in kp:
        draw.ellipse([u - 2, v - 2, u + 2, v + 2], fill=(255, 60, 60))
    return img


def record_from_pose(model: ObjectModel, k: CameraIntrinsics, pose: Pose,
                     image_id: str, image_path: str = "",
                     source: str = "synthetic", bbox_pad: float = 2.0) -> AnnotationRecord:
    """Exactly consistent record: keypoints are fresh projections of the model."""
    names = model.keypoint_names
    proj = project_points(model.keypoint_array(names), pose, k)
    return AnnotationRecord(
        image_id=image_id,
        image_path=image_path,
        object_class=model.name,
        pose=pose,
        intrinsics=k,
        keypoints_2d={n: proj[i] for i, n in enumerate(names)},
        bbox_2d=_bbox_of(proj, pad=bbox_pad),
        source=source,
    )


def _all_keypoints_in_frame(model: ObjectModel, pose: Pose, k: CameraIntrinsics,
                            margin: float = 4.0) -> bool:
    try:
        proj = project_points(model.keypoint_array(), pose, k)
    except Exception:
        return False
    return bool(np.all((proj[:, 0] >= margin) & (proj[:, 0] <= k.width - 1 - margin)
                       & (proj[:, 1] >= margin) & (proj[:, 1] <= k.height - 1 - margin)))


def synth_generate(model: ObjectModel, camera: CameraIntrinsics,
                   pose_sampler: PoseSampler, n: int, seed: int,
                   out_dir=None, render: bool = True,
                   max_attempts: int = 1000) -> Dataset:
    """Generate n annotated synthetic frames; deterministic for a fixed seed.

    Images go to ``out_dir`` as PNG when rendering is on; with
    ``render=False`` only annotations are produced (the oracle detector never
    looks at pixels).

    Raises:
        UnsatisfiablePose: the sampler failed 1000 straight rejection attempts.
    """
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    rng = np.random.default_rng(seed)
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)

    records = []
    for i in range(n):
        pose = None
        for _ in range(max_attempts):
            cand = pose_sampler(rng)
            if _all_keypoints_in_frame(model, cand, camera):
                pose = cand
                break
        if pose is None:
            raise UnsatisfiablePose(
                f"pose sampler exhausted {max_attempts} attempts for frame {i} "
                "(every draw left keypoints outside the frame)")
        image_id = f"synth_{i:05d}"
        rel_path = f"{image_id}.png"  # stored relative so the dataset can move
        if render and out_dir is not None:
            img = render_wireframe(model, pose, camera, rng)
            img.save(out_dir / rel_path)
        records.append(record_from_pose(model, camera, pose, image_id, rel_path))
    return Dataset(records=records, model_name=model.name)
