"""Pluggable keypoint/bbox detection backends and the two pose pipelines.

The oracle backend stands in for trained networks: it emits ground-truth
keypoint projections perturbed by a configurable noise/dropout model,
deterministic per (seed, image_id). The remote backend defines the HTTP
contract real networks plug into later.
"""

from __future__ import annotations

import io
import json
import time
import urllib.error
import urllib.request
import zlib
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

from .dataset import AnnotationRecord, Dataset
from .errors import BackendUnavailable, ObjectNotFound, TooFewPoints, UnknownFrame
from .geometry import CameraIntrinsics
from .metrics import ObjectModel
from .pnp import Correspondence, PnPResult, solve_pnp

MIN_PIPELINE_POINTS = 4


@dataclass
class DetectionResult:
    """One backend's answer for one frame."""

    object_class: str
    confidence: float
    bbox_2d: tuple[float, float, float, float]
    keypoints_2d: dict[str, np.ndarray]
    keypoint_confidence: dict[str, float]
    timing_ms: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"confidence must be in [0,1], got {self.confidence}")
        for name, c in self.keypoint_confidence.items():
            if not 0.0 <= c <= 1.0:
                raise ValueError(f"keypoint {name!r} confidence {c} not in [0,1]")
        self.keypoints_2d = {k: np.asarray(v, dtype=float).reshape(2)
                             for k, v in self.keypoints_2d.items()}

    def to_dict(self) -> dict:
        return {
            "object_class": self.object_class,
            "confidence": self.confidence,
            "bbox_2d": list(self.bbox_2d),
            "keypoints_2d": {k: v.tolist() for k, v in self.keypoints_2d.items()},
            "keypoint_confidence": dict(self.keypoint_confidence),
            "timing_ms": self.timing_ms,
        }

    @staticmethod
    def from_dict(d: dict) -> "DetectionResult":
        return DetectionResult(
            object_class=d["object_class"],
            confidence=float(d["confidence"]),
            bbox_2d=tuple(d["bbox_2d"]),
            keypoints_2d={k: np.asarray(v, float) for k, v in d["keypoints_2d"].items()},
            keypoint_confidence={k: float(v) for k, v in d.get("keypoint_confidence", {}).items()},
            timing_ms=float(d.get("timing_ms", 0.0)),
        )


@dataclass(frozen=True)
class OracleNoiseModel:
    """Keypoint corruption applied by the oracle backend.

    Effective noise grows with object distance:
    sigma_effective = sigma_px + distance_noise_gain * |t|.
    """

    sigma_px: float = 0.0
    dropout_p: float = 0.0
    distance_noise_gain: float = 0.0  # px per meter
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.dropout_p <= 1.0:
            raise ValueError(f"dropout_p must be in [0,1], got {self.dropout_p}")
        if self.sigma_px < 0:
            raise ValueError(f"sigma_px must be >= 0, got {self.sigma_px}")

    def to_dict(self) -> dict:
        return {"sigma_px": self.sigma_px, "dropout_p": self.dropout_p,
                "distance_noise_gain": self.distance_noise_gain, "seed": self.seed}

    @staticmethod
    def from_dict(d: dict) -> "OracleNoiseModel":
        return OracleNoiseModel(
            sigma_px=float(d.get("sigma_px", 0.0)),
            dropout_p=float(d.get("dropout_p", 0.0)),
            distance_noise_gain=float(d.get("distance_noise_gain", 0.0)),
            seed=int(d.get("seed", 0)),
        )


@dataclass
class FrameRef:
    """What a backend may need to identify or process one frame."""

    image_id: str
    image: Image.Image | None = None
    annotation: AnnotationRecord | None = None


def _as_frame_ref(frame_ref) -> FrameRef:
    if isinstance(frame_ref, FrameRef):
        return frame_ref
    if isinstance(frame_ref, str):
        return FrameRef(image_id=frame_ref)
    if isinstance(frame_ref, Image.Image):
        return FrameRef(image_id="", image=frame_ref)
    raise TypeError(f"frame_ref must be FrameRef, image_id or image, got {type(frame_ref)}")


class OracleBackend:
    """Emits ground-truth projections perturbed per the noise model.

    Stateless after construction; safe for concurrent detect calls. Results
    are deterministic per (noise seed, image_id).
    """

    def __init__(self, lookup=None, noise: OracleNoiseModel | None = None,
                 delay_ms: float = 0.0, fail_image_ids=()):
        self.noise = noise or OracleNoiseModel()
        self.delay_ms = float(delay_ms)
        self.fail_image_ids = frozenset(fail_image_ids)
        if isinstance(lookup, Dataset):
            self._records = {r.image_id: r for r in lookup.records}
        elif isinstance(lookup, dict):
            self._records = dict(lookup)
        elif lookup is None:
            self._records = {}
        else:
            raise TypeError(f"lookup must be Dataset, dict or None, got {type(lookup)}")

    def _record_for(self, ref: FrameRef) -> AnnotationRecord:
        if ref.annotation is not None:
            return ref.annotation
        rec = self._records.get(ref.image_id)
        if rec is None:
            raise UnknownFrame(f"oracle has no annotation for frame {ref.image_id!r}")
        return rec

    def detect(self, frame_ref, ds_lookup=None) -> DetectionResult:
        t0 = time.perf_counter()
        ref = _as_frame_ref(frame_ref)
        if ref.image_id in self.fail_image_ids:
            raise BackendUnavailable(f"injected failure for frame {ref.image_id!r}")
        if ds_lookup is not None and ref.annotation is None:
            rec = ds_lookup(ref.image_id) if callable(ds_lookup) else ds_lookup.get(ref.image_id)
            if rec is not None:
                ref = FrameRef(ref.image_id, ref.image, rec)
        rec = self._record_for(ref)
        if self.delay_ms > 0:
            time.sleep(self.delay_ms / 1000.0)

        rng = np.random.default_rng(
            [self.noise.seed & 0xFFFFFFFF, zlib.crc32(ref.image_id.encode())])
        distance = float(np.linalg.norm(rec.pose.t))
        sigma = self.noise.sigma_px + self.noise.distance_noise_gain * distance
        k = rec.intrinsics

        keypoints: dict[str, np.ndarray] = {}
        confidences: dict[str, float] = {}
        for name, truth in rec.keypoints_2d.items():
            dropped = rng.uniform() < self.noise.dropout_p
            jitter = rng.normal(0.0, 1.0, 2)  # drawn regardless to keep streams aligned
            if dropped:
                continue
            pt = truth + sigma * jitter
            if not (0 <= pt[0] <= k.width - 1 and 0 <= pt[1] <= k.height - 1):
                continue  # out-of-frame points count as dropped
            keypoints[name] = pt
            confidences[name] = 1.0

        return DetectionResult(
            object_class=rec.object_class,
            confidence=1.0,
            bbox_2d=rec.bbox_2d,
            keypoints_2d=keypoints,
            keypoint_confidence=confidences,
            timing_ms=(time.perf_counter() - t0) * 1000.0,
        )

    def detect_in_crop(self, frame_ref, crop: tuple[int, int, int, int],
                       ds_lookup=None) -> DetectionResult:
        """Detection restricted to a crop; keypoints in crop coordinates.

        The noise draw happens on full-image coordinates first, so the result
        is independent of where the crop sits (as long as points fall inside).
        """
        full = self.detect(frame_ref, ds_lookup)
        u0, v0, u1, v1 = crop
        keypoints = {}
        confidences = {}
        for name, pt in full.keypoints_2d.items():
            if u0 <= pt[0] <= u1 and v0 <= pt[1] <= v1:
                keypoints[name] = pt - [u0, v0]
                confidences[name] = full.keypoint_confidence[name]
        return DetectionResult(
            object_class=full.object_class,
            confidence=full.confidence,
            bbox_2d=(0.0, 0.0, float(u1 - u0), float(v1 - v0)),
            keypoints_2d=keypoints,
            keypoint_confidence=confidences,
            timing_ms=full.timing_ms,
        )


class RemoteBackend:
    """HTTP client for an external detector serving POST /detect.

    Request: PNG or JPEG body with matching content-type and an X-Frame-Id
    header. Response: DetectionResult JSON. No trained model ships with this
    package; this class pins the contract networks plug into.
    """

    def __init__(self, url: str, timeout_s: float = 10.0):
        self.url = url.rstrip("/")
        self.timeout_s = timeout_s

    def _post(self, payload: bytes, frame_id: str) -> DetectionResult:
        req = urllib.request.Request(
            f"{self.url}/detect", data=payload, method="POST",
            headers={"Content-Type": "image/png", "X-Frame-Id": frame_id})
        try:
            with urllib.request.urlopen(req, timeout=self.timeout_s) as resp:
                return DetectionResult.from_dict(json.loads(resp.read()))
        except (urllib.error.URLError, OSError, json.JSONDecodeError) as exc:
            raise BackendUnavailable(f"remote backend at {self.url}: {exc}") from exc

    @staticmethod
    def _encode(image: Image.Image) -> bytes:
        buf = io.BytesIO()
        image.save(buf, format="PNG")
        return buf.getvalue()

    def detect(self, frame_ref, ds_lookup=None) -> DetectionResult:
        ref = _as_frame_ref(frame_ref)
        if ref.image is None:
            raise BackendUnavailable("remote backend needs the frame image")
        return self._post(self._encode(ref.image), ref.image_id)

    def detect_in_crop(self, frame_ref, crop, ds_lookup=None) -> DetectionResult:
        ref = _as_frame_ref(frame_ref)
        if ref.image is None:
            raise BackendUnavailable("remote backend needs the frame image")
        u0, v0, u1, v1 = crop
        return self._post(self._encode(ref.image.crop((u0, v0, u1, v1))), ref.image_id)


def detect(backend, frame_ref, ds_lookup=None) -> DetectionResult:
    """Run one backend on one frame."""
    return backend.detect(frame_ref, ds_lookup=ds_lookup)


def build_backend(spec: dict, dataset: Dataset | None = None):
    """Instantiate a backend from a config mapping.

    ``{"type": "oracle", "noise": {...}, "delay_ms": 0, "fail_image_ids": []}``
    or ``{"type": "remote", "url": "http://..."}``.
    """
    kind = spec.get("type", "oracle")
    if kind == "oracle":
        return OracleBackend(
            lookup=dataset,
            noise=OracleNoiseModel.from_dict(spec.get("noise", {})),
            delay_ms=float(spec.get("delay_ms", 0.0)),
            fail_image_ids=spec.get("fail_image_ids", ()),
        )
    if kind == "remote":
        return RemoteBackend(spec["url"], timeout_s=float(spec.get("timeout_s", 10.0)))
    raise ValueError(f"unknown backend type {kind!r}")


# --- pipelines ----------------------------------------------------------------


@dataclass
class PipelineResult:
    """PnP output plus what the stages saw and how long they took."""

    pnp: PnPResult
    detection: DetectionResult
    stage_timings_ms: dict[str, float] = field(default_factory=dict)

    @property
    def pose(self):
        return self.pnp.pose


def _correspondences(keypoints_2d: dict[str, np.ndarray], model: ObjectModel,
                     confidences: dict[str, float] | None = None) -> list[Correspondence]:
    corrs = []
    for name, pix in keypoints_2d.items():
        if name in model.keypoints:
            w = confidences.get(name, 1.0) if confidences else 1.0
            corrs.append(Correspondence(model.keypoints[name], pix, w))
    return corrs


def run_sspe_pipeline(backend, frame_ref, model: ObjectModel,
                      k: CameraIntrinsics) -> PipelineResult:
    """Single-stage pipeline: keypoint detection straight to PnP.

    Raises:
        TooFewPoints: fewer than 4 keypoints survived detection.
    """
    t0 = time.perf_counter()
    det = backend.detect(frame_ref)
    t1 = time.perf_counter()
    corrs = _correspondences(det.keypoints_2d, model, det.keypoint_confidence)
    if len(corrs) < MIN_PIPELINE_POINTS:
        raise TooFewPoints(
            f"pipeline needs >= {MIN_PIPELINE_POINTS} surviving keypoints, got {len(corrs)}")
    result = solve_pnp(corrs, k)
    t2 = time.perf_counter()
    return PipelineResult(
        pnp=result,
        detection=det,
        stage_timings_ms={"detect_ms": (t1 - t0) * 1000.0, "pnp_ms": (t2 - t1) * 1000.0},
    )


def crop_region(bbox: tuple[float, float, float, float], k: CameraIntrinsics,
                margin: float = 0.1) -> tuple[int, int, int, int]:
    """Integer crop box: the detection bbox grown by a relative margin."""
    u0, v0, u1, v1 = bbox
    mu = (u1 - u0) * margin
    mv = (v1 - v0) * margin
    return (int(max(0, np.floor(u0 - mu))),
            int(max(0, np.floor(v0 - mv))),
            int(min(k.width - 1, np.ceil(u1 + mu))),
            int(min(k.height - 1, np.ceil(v1 + mv))))


def run_betapose_pipeline(bbox_backend, kp_backend, frame_ref, model: ObjectModel,
                          k: CameraIntrinsics, confidence_threshold: float = 0.5,
                          crop_margin: float = 0.1,
                          crop: tuple[int, int, int, int] | None = None) -> PipelineResult:
    """Two-stage pipeline: bbox detection, keypoints inside the crop, PnP.

    Keypoints come back in crop coordinates and are shifted by the crop
    origin before solving. A ``crop`` override skips the bbox-derived region
    (used to verify crop invariance).

    Raises:
        ObjectNotFound: bbox stage confidence below the threshold.
        TooFewPoints: fewer than 4 keypoints landed inside the crop.
    """
    t0 = time.perf_counter()
    bbox_det = bbox_backend.detect(frame_ref)
    t1 = time.perf_counter()
    if bbox_det.confidence < confidence_threshold:
        raise ObjectNotFound(
            f"bbox stage confidence {bbox_det.confidence:.3f} below "
            f"threshold {confidence_threshold}")
    region = crop if crop is not None else crop_region(bbox_det.bbox_2d, k, crop_margin)
    kp_det = kp_backend.detect_in_crop(frame_ref, region)
    t2 = time.perf_counter()
    origin = np.array([region[0], region[1]], dtype=float)
    full_kps = {n: p + origin for n, p in kp_det.keypoints_2d.items()}
    corrs = _correspondences(full_kps, model, kp_det.keypoint_confidence)
    if len(corrs) < MIN_PIPELINE_POINTS:
        raise TooFewPoints(
            f"pipeline needs >= {MIN_PIPELINE_POINTS} keypoints inside the crop, "
            f"got {len(corrs)}")
    result = solve_pnp(corrs, k)
    t3 = time.perf_counter()
    merged = DetectionResult(
        object_class=bbox_det.object_class,
        confidence=bbox_det.confidence,
        bbox_2d=bbox_det.bbox_2d,
        keypoints_2d=full_kps,
        keypoint_confidence=dict(kp_det.keypoint_confidence),
        timing_ms=bbox_det.timing_ms + kp_det.timing_ms,
    )
    return PipelineResult(
        pnp=result,
        detection=merged,
        stage_timings_ms={"detect_ms": (t1 - t0) * 1000.0,
                          "kpd_ms": (t2 - t1) * 1000.0,
                          "pnp_ms": (t3 - t2) * 1000.0},
    )
