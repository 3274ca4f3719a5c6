"""Edge server hosting named pose-estimation proxies over HTTP.

Endpoints:

* ``POST /proxies/{name}/frames`` -- body: PNG/JPEG bytes; headers:
  ``X-Frame-Id`` (echoed back), optional ``X-Intrinsics`` (JSON override of
  the proxy default), optional ``X-Annotation`` (JSON annotation record, an
  oracle-backend convenience so synthetic sweeps need no server-side
  dataset). Returns a PoseResponse JSON.
* ``POST /pnp`` -- JSON ``{correspondences: [{model_point, image_point,
  weight?}], intrinsics: {...}}``; returns the solver result. Used by the
  annotation UI.
* ``GET /health`` -- per-proxy status and in-flight counts.

Back-pressure is immediate rejection: past ``max_in_flight`` concurrent
frames a proxy answers 429 instead of queueing -- an AR client wants fresh
frames, not stale queued results.

betapose_style proxies run their two detector stages on dedicated worker
threads connected by bounded queues, so the bbox stage of frame n+1 overlaps
the keypoint stage of frame n. A stage failure fails only its own frame.
"""

from __future__ import annotations

import asyncio
import io
import json
import logging
import queue
import socket
import threading
import time
from concurrent.futures import Future
from contextlib import asynccontextmanager
from dataclasses import dataclass, field

import numpy as np
import uvicorn
from fastapi import FastAPI, Request
from fastapi.middleware.cors import CORSMiddleware
from fastapi.responses import JSONResponse
from fastapi.staticfiles import StaticFiles
from PIL import Image, UnidentifiedImageError
from starlette.concurrency import run_in_threadpool

from .dataset import AnnotationRecord, Dataset
from .detector import (
    DetectionResult,
    FrameRef,
    MIN_PIPELINE_POINTS,
    build_backend,
    crop_region,
    run_sspe_pipeline,
)
from .errors import (
    Busy,
    DegenerateConfiguration,
    DuplicateProxyName,
    EdgePoseError,
    NoValidCandidate,
    ObjectNotFound,
    PortInUse,
    TooFewPoints,
    UndecodableImage,
    UnknownProxy,
)
from .geometry import CameraIntrinsics, Pose, project_points
from .metrics import ObjectModel
from .pnp import Correspondence, solve_pnp

log = logging.getLogger("edgepose.server")

PIPELINES = ("sspe_style", "betapose_style")

_STATUS_BY_CODE = {
    "unknown_proxy": 404,
    "undecodable_image": 400,
    "busy": 429,
    "too_few_points": 422,
    "degenerate_configuration": 422,
    "no_valid_candidate": 422,
    "object_not_found": 422,
    "unknown_frame": 422,
    "backend_unavailable": 502,
}


@dataclass
class ProxyConfig:
    """One named pipeline deployment."""

    name: str
    pipeline: str
    model: ObjectModel
    intrinsics: CameraIntrinsics
    backend: dict = field(default_factory=lambda: {"type": "oracle"})
    kp_backend: dict | None = None  # betapose keypoint stage; defaults to `backend`
    dataset: Dataset | None = None
    max_in_flight: int = 4
    confidence_threshold: float = 0.5
    crop_margin: float = 0.1

    def __post_init__(self):
        if self.pipeline not in PIPELINES:
            raise ValueError(f"pipeline must be one of {PIPELINES}, got {self.pipeline!r}")
        if self.max_in_flight < 1:
            raise ValueError(f"max_in_flight must be >= 1, got {self.max_in_flight}")


def _error_body(code: str, message: str, stage: str | None = None) -> dict:
    body = {"error": code, "message": message}
    if stage:
        body["stage"] = stage
    return body


def _error_response(exc: Exception, stage: str | None = None) -> JSONResponse:
    code = exc.code if isinstance(exc, EdgePoseError) else "internal_error"
    status = _STATUS_BY_CODE.get(code, 500)
    return JSONResponse(status_code=status, content=_error_body(code, str(exc), stage))


class _StageJob:
    __slots__ = ("ref", "intrinsics", "bbox_det", "kp_det", "region",
                 "timings", "future")

    def __init__(self, ref: FrameRef, intrinsics: CameraIntrinsics):
        self.ref = ref
        self.intrinsics = intrinsics
        self.bbox_det: DetectionResult | None = None
        self.kp_det: DetectionResult | None = None
        self.region: tuple[int, int, int, int] | None = None
        self.timings: dict[str, float] = {}
        self.future: Future = Future()


class ProxyRuntime:
    """Live state of one proxy: backends, in-flight gate, stage workers."""

    def __init__(self, config: ProxyConfig):
        self.config = config
        self.backend = build_backend(config.backend, config.dataset)
        kp_spec = config.kp_backend if config.kp_backend is not None else config.backend
        self.kp_backend = build_backend(kp_spec, config.dataset)
        self._in_flight = 0
        self._lock = threading.Lock()
        self._stop = False
        self._bbox_q: queue.Queue | None = None
        self._kpd_q: queue.Queue | None = None
        self._workers: list[threading.Thread] = []
        if config.pipeline == "betapose_style":
            cap = config.max_in_flight
            self._bbox_q = queue.Queue(maxsize=cap)
            self._kpd_q = queue.Queue(maxsize=cap)
            for name, target in (("bbox", self._bbox_worker), ("kpd", self._kpd_worker)):
                t = threading.Thread(target=target, daemon=True,
                                     name=f"{config.name}-{name}")
                t.start()
                self._workers.append(t)

    # --- in-flight accounting -------------------------------------------

    @property
    def in_flight(self) -> int:
        with self._lock:
            return self._in_flight

    def try_acquire(self) -> bool:
        with self._lock:
            if self._in_flight >= self.config.max_in_flight:
                return False
            self._in_flight += 1
            return True

    def release(self):
        with self._lock:
            self._in_flight -= 1

    # --- staged betapose execution ----------------------------------------

    def _bbox_worker(self):
        while not self._stop:
            job = self._bbox_q.get()
            if job is None:
                return
            try:
                t0 = time.perf_counter()
                det = self.backend.detect(job.ref)
                job.timings["detect_ms"] = (time.perf_counter() - t0) * 1000.0
                if det.confidence < self.config.confidence_threshold:
                    raise ObjectNotFound(
                        f"bbox stage confidence {det.confidence:.3f} below "
                        f"threshold {self.config.confidence_threshold}")
                job.bbox_det = det
                job.region = crop_region(det.bbox_2d, job.intrinsics,
                                         self.config.crop_margin)
                self._kpd_q.put(job)
            except Exception as exc:  # fail this frame only
                exc.stage = "detect"
                job.future.set_exception(exc)

    def _kpd_worker(self):
        while not self._stop:
            job = self._kpd_q.get()
            if job is None:
                return
            try:
                t0 = time.perf_counter()
                job.kp_det = self.kp_backend.detect_in_crop(job.ref, job.region)
                job.timings["kpd_ms"] = (time.perf_counter() - t0) * 1000.0
                job.future.set_result(job)
            except Exception as exc:
                exc.stage = "kpd"
                job.future.set_exception(exc)

    def submit_betapose(self, ref: FrameRef, intrinsics: CameraIntrinsics) -> Future:
        job = _StageJob(ref, intrinsics)
        try:
            self._bbox_q.put_nowait(job)
        except queue.Full:
            raise Busy(f"proxy {self.config.name!r} stage queue full") from None
        return job.future

    def finish_betapose(self, job: _StageJob) -> tuple[Pose, DetectionResult, dict]:
        """PnP on the staged detections; runs on the request's own thread."""
        t0 = time.perf_counter()
        origin = np.array([job.region[0], job.region[1]], dtype=float)
        kps = {n: p + origin for n, p in job.kp_det.keypoints_2d.items()}
        corrs = [Correspondence(self.config.model.keypoints[n], p,
                                job.kp_det.keypoint_confidence.get(n, 1.0))
                 for n, p in kps.items() if n in self.config.model.keypoints]
        if len(corrs) < MIN_PIPELINE_POINTS:
            exc = TooFewPoints(
                f"pipeline needs >= {MIN_PIPELINE_POINTS} keypoints inside the crop, "
                f"got {len(corrs)}")
            exc.stage = "pnp"
            raise exc
        result = solve_pnp(corrs, job.intrinsics)
        job.timings["pnp_ms"] = (time.perf_counter() - t0) * 1000.0
        merged = DetectionResult(
            object_class=job.bbox_det.object_class,
            confidence=job.bbox_det.confidence,
            bbox_2d=job.bbox_det.bbox_2d,
            keypoints_2d=kps,
            keypoint_confidence=dict(job.kp_det.keypoint_confidence),
            timing_ms=job.bbox_det.timing_ms + job.kp_det.timing_ms,
        )
        return result.pose, merged, job.timings

    def run_sspe(self, ref: FrameRef, intrinsics: CameraIntrinsics):
        out = run_sspe_pipeline(self.backend, ref, self.config.model, intrinsics)
        return out.pose, out.detection, out.stage_timings_ms

    def shutdown(self):
        self._stop = True
        for q in (self._bbox_q, self._kpd_q):
            if q is not None:
                q.put(None)
        for w in self._workers:
            w.join(timeout=2.0)


def _pose_response(proxy: ProxyRuntime, frame_id: str, pose: Pose,
                   detection: DetectionResult, intrinsics: CameraIntrinsics,
                   timings: dict) -> dict:
    model = proxy.config.model
    pts = np.vstack([model.centroid[None, :], model.bbox_corners])
    corners = project_points(pts, pose, intrinsics)
    return {
        "frame_id": frame_id,
        "proxy_name": proxy.config.name,
        "pose": {"q": pose.q.tolist(), "t": pose.t.tolist()},
        "detection": detection.to_dict(),
        "projected_bbox_corners": corners.tolist(),  # centroid first, then 8 corners
        "timings": timings,
    }


def create_app(configs: list[ProxyConfig], ui_dir=None) -> FastAPI:
    names = [c.name for c in configs]
    if len(names) != len(set(names)):
        dupes = sorted({n for n in names if names.count(n) > 1})
        raise DuplicateProxyName(f"duplicate proxy name(s): {dupes}")

    proxies = {c.name: ProxyRuntime(c) for c in configs}

    @asynccontextmanager
    async def lifespan(_app):
        yield
        for p in proxies.values():
            p.shutdown()

    app = FastAPI(title="edgepose server", lifespan=lifespan)
    app.state.proxies = proxies
    # the annotation UI may be served from any static host; allow its origin
    app.add_middleware(CORSMiddleware, allow_origins=["*"],
                       allow_methods=["*"], allow_headers=["*"])
    if ui_dir is not None:
        app.mount("/ui", StaticFiles(directory=str(ui_dir), html=True), name="ui")

    @app.middleware("http")
    async def wall_clock(request: Request, call_next):
        t0 = time.perf_counter()
        response = await call_next(request)
        response.headers["X-Server-Wall-Ms"] = f"{(time.perf_counter() - t0) * 1000.0:.3f}"
        return response

    @app.get("/health")
    async def health():
        return {"proxies": [
            {"name": p.config.name, "pipeline": p.config.pipeline,
             "status": "ok", "in_flight": p.in_flight}
            for p in proxies.values()
        ]}

    @app.post("/proxies/{name}/frames")
    async def handle_frame(name: str, request: Request):
        t_start = time.perf_counter()
        body = await request.body()
        receive_ms = (time.perf_counter() - t_start) * 1000.0

        proxy = proxies.get(name)
        if proxy is None:
            return _error_response(UnknownProxy(f"no proxy named {name!r}"))

        frame_id = request.headers.get("X-Frame-Id", "")
        intrinsics = proxy.config.intrinsics
        if "X-Intrinsics" in request.headers:
            try:
                intrinsics = CameraIntrinsics.from_dict(
                    json.loads(request.headers["X-Intrinsics"]))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                return JSONResponse(status_code=422, content=_error_body(
                    "config_error", f"bad X-Intrinsics header: {exc}"))
        annotation = None
        if "X-Annotation" in request.headers:
            try:
                annotation = AnnotationRecord.from_dict(
                    json.loads(request.headers["X-Annotation"]))
            except Exception as exc:
                return JSONResponse(status_code=422, content=_error_body(
                    "malformed_record", f"bad X-Annotation header: {exc}"))

        if not proxy.try_acquire():
            return _error_response(Busy(
                f"proxy {name!r} already has {proxy.config.max_in_flight} frames in flight"))
        try:
            t_decode = time.perf_counter()
            try:
                image = await run_in_threadpool(_decode_image, body)
            except UndecodableImage as exc:
                return _error_response(exc, stage="decode")
            decode_ms = (time.perf_counter() - t_decode) * 1000.0

            ref = FrameRef(image_id=frame_id, image=image, annotation=annotation)
            try:
                if proxy.config.pipeline == "betapose_style":
                    future = proxy.submit_betapose(ref, intrinsics)
                    job = await asyncio.wrap_future(future)
                    pose, detection, stage_ms = await run_in_threadpool(
                        proxy.finish_betapose, job)
                else:
                    pose, detection, stage_ms = await run_in_threadpool(
                        proxy.run_sspe, ref, intrinsics)
            except Exception as exc:
                return _error_response(exc, stage=getattr(exc, "stage", "detect"))

            timings = {"receive_ms": receive_ms, "decode_ms": decode_ms}
            timings.update(stage_ms)
            timings["total_ms"] = (time.perf_counter() - t_start) * 1000.0
            return JSONResponse(_pose_response(proxy, frame_id, pose, detection,
                                               intrinsics, timings))
        finally:
            proxy.release()

    @app.post("/pnp")
    async def handle_pnp(request: Request):
        try:
            payload = json.loads(await request.body())
            corrs = [Correspondence(c["model_point"], c["image_point"],
                                    float(c.get("weight", 1.0)))
                     for c in payload["correspondences"]]
            intrinsics = CameraIntrinsics.from_dict(payload["intrinsics"])
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            return JSONResponse(status_code=422, content=_error_body(
                "malformed_request", f"bad /pnp payload: {exc}"))
        try:
            result = await run_in_threadpool(solve_pnp, corrs, intrinsics)
        except (TooFewPoints, DegenerateConfiguration, NoValidCandidate) as exc:
            return _error_response(exc, stage="pnp")
        return {
            "pose": {"q": result.pose.q.tolist(), "t": result.pose.t.tolist()},
            "rms_reprojection_error": result.rms_reprojection_error,
            "per_point_errors": result.per_point_errors,
            "candidates_considered": result.candidates_considered,
        }

    return app


def _decode_image(body: bytes) -> Image.Image:
    try:
        image = Image.open(io.BytesIO(body))
        image.load()
        return image
    except (UnidentifiedImageError, OSError, ValueError) as exc:
        raise UndecodableImage(f"frame payload is not a decodable image: {exc}") from exc


class ServerHandle:
    """A uvicorn server running on a background thread."""

    def __init__(self, app: FastAPI, host: str, port: int):
        self.host = host
        self.port = port
        config = uvicorn.Config(app, host=host, port=port, log_level="warning")
        self._server = uvicorn.Server(config)
        self._thread = threading.Thread(target=self._server.run, daemon=True,
                                        name=f"edgepose-server-{port}")
        self.app = app

    @property
    def address(self) -> str:
        return f"http://{self.host}:{self.port}"

    def start(self, timeout_s: float = 10.0):
        self._thread.start()
        deadline = time.monotonic() + timeout_s
        while not self._server.started:
            if time.monotonic() > deadline:
                raise RuntimeError("server failed to start in time")
            if not self._thread.is_alive():
                raise PortInUse(f"server thread exited; is {self.host}:{self.port} busy?")
            time.sleep(0.01)
        return self

    def stop(self):
        self._server.should_exit = True
        self._thread.join(timeout=10.0)
        for p in self.app.state.proxies.values():
            p.shutdown()


def serve(configs: list[ProxyConfig], bind_addr: str = "127.0.0.1:8000",
          ui_dir=None) -> ServerHandle:
    """Start all proxies on one server; returns a running handle.

    Raises:
        PortInUse: the address is already bound.
        DuplicateProxyName: two configs share a name.
    """
    host, _, port_s = bind_addr.partition(":")
    port = int(port_s or 8000)
    probe = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
    try:
        probe.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        probe.bind((host, port))
    except OSError as exc:
        raise PortInUse(f"cannot bind {bind_addr}: {exc}") from exc
    finally:
        probe.close()
    app = create_app(configs, ui_dir=ui_dir)
    return ServerHandle(app, host, port).start()


def free_port() -> int:
    s = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
    s.bind(("127.0.0.1", 0))
    port = s.getsockname()[1]
    s.close()
    return port
