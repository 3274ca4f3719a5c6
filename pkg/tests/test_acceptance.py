"""Acceptance suite: one test per release criterion, tolerances pinned.

Each test prints a PASS/FAIL line through the conftest summary hook. The
statistical tests document their sampling allowances inline.
"""

import time
from concurrent.futures import ThreadPoolExecutor

import numpy as np
import pytest
import requests
from PIL import Image

from edgepose.bench import distance_sweep, run_benchmark
from edgepose.calibration import FrameGraph
from edgepose.dataset import (
    HFlip,
    Rotate,
    Scale,
    augment,
    load_dataset,
    save_dataset,
    synth_generate,
    uniform_pose_sampler,
)
from edgepose.detector import OracleBackend, OracleNoiseModel, run_betapose_pipeline
from edgepose.geometry import CameraIntrinsics, Pose, compose, project_points
from edgepose.metrics import add_accuracy, add_metric, obb_iou_sampled, unit_cube_model
from edgepose.pnp import Correspondence, solve_pnp
from edgepose.server import ProxyConfig, free_port, serve

K = CameraIntrinsics(fx=500.0, fy=500.0, cx=320.0, cy=240.0, width=640, height=480)
MODEL = unit_cube_model("robot", size=0.4)
CUBE = unit_cube_model("unit", size=1.0)


def random_pose_in_view(rng, points, k=K, z_range=(0.5, 10.0), tries=100):
    for _ in range(tries):
        depth = rng.uniform(*z_range)
        pose = Pose.from_axis_angle(rng.normal(size=3), rng.uniform(0, np.pi),
                                    (rng.uniform(-0.1, 0.1) * depth,
                                     rng.uniform(-0.1, 0.1) * depth,
                                     depth + 1.0))
        try:
            project_points(points, pose, k)
            return pose
        except Exception:
            continue
    raise RuntimeError("could not sample a visible pose")


def test_pnp_round_trip_100_random_poses():
    """100 noiseless 9-point solves recover the pose to 1e-6 in under 5 s."""
    rng = np.random.default_rng(2024)
    cube = CUBE.keypoint_array()
    t0 = time.perf_counter()
    solved = 0
    for _ in range(100):
        gt = random_pose_in_view(rng, cube)
        pix = project_points(cube, gt, K)
        res = solve_pnp([Correspondence(cube[i], pix[i]) for i in range(9)], K)
        assert res.pose.rotation_angle_to(gt) < 1e-6, "rotation error over 1e-6 rad"
        assert res.pose.translation_distance_to(gt) < 1e-6, "translation error over 1e-6 m"
        solved += 1
    elapsed = time.perf_counter() - t0
    assert solved == 100
    assert elapsed < 5.0, f"runtime {elapsed:.2f}s exceeds 5s budget"


def test_pnp_noise_sweep_median_add():
    """Median ADD grows with pixel noise; at sigma=2px/1m it stays under 5%
    of the model diameter (bound verified against the project-perturb-solve
    oracle: measured ~0.7% for this geometry)."""
    rng = np.random.default_rng(7)
    cube = MODEL.keypoint_array()
    medians = []
    for sigma in (0.0, 1.0, 2.0, 4.0, 8.0):
        adds = []
        for _ in range(200):
            gt = Pose.from_axis_angle(rng.normal(size=3), rng.uniform(0, np.pi),
                                      (0.0, 0.0, 1.0))
            pix = project_points(cube, gt, K) + rng.normal(0, sigma, (9, 2))
            res = solve_pnp([Correspondence(cube[i], pix[i]) for i in range(9)], K)
            adds.append(add_metric(res.pose, gt, MODEL))
        medians.append(float(np.median(adds)))
    assert all(medians[i] <= medians[i + 1] + 1e-12 for i in range(len(medians) - 1)), \
        f"median ADD not monotone: {medians}"
    assert medians[2] < 0.05 * MODEL.diameter, \
        f"sigma=2px median ADD {medians[2]:.4f} m is not under 5% of diameter"


def test_add_oracle_equivalence_1000_pairs():
    """add_metric equals per-vertex brute force to 1e-12; translation exact."""
    rng = np.random.default_rng(99)
    for _ in range(1000):
        a = Pose.from_axis_angle(rng.normal(size=3), rng.uniform(0, np.pi),
                                 rng.uniform(-2, 2, 3))
        b = Pose.from_axis_angle(rng.normal(size=3), rng.uniform(0, np.pi),
                                 rng.uniform(-2, 2, 3))
        brute = np.mean([np.linalg.norm(
            (a.rotation_matrix @ v + a.t) - (b.rotation_matrix @ v + b.t))
            for v in MODEL.vertices])
        assert abs(add_metric(a, b, MODEL) - brute) < 1e-12
    gt = Pose.from_axis_angle([0.3, 0.5, 0.1], 0.7, (0.1, 0.0, 2.0))
    t = np.array([0.004, -0.003, 0.012])
    assert add_metric(compose(Pose(t=t), gt), gt, MODEL) == pytest.approx(
        np.linalg.norm(t), abs=1e-15)


def test_obb_iou_offset_cube_calibration():
    """Axis-aligned unit cubes offset 0.5 along x: IoU = 1/3 +- 0.02 at 100k."""
    gt = Pose(t=[0.0, 0.0, 2.0])
    pred = compose(Pose(t=[0.5, 0.0, 0.0]), gt)
    iou = obb_iou_sampled(pred, gt, CUBE, n_samples=100_000, seed=11)
    assert abs(iou - 1.0 / 3.0) < 0.02, f"IoU {iou:.4f} off the closed-form 1/3"


def test_calibration_chain_matches_matrix_oracle():
    """ar_to_map equals the homogeneous product on 1000 random edge pairs;
    an injected 1 cm error shows up in the cycle residual exactly."""
    rng = np.random.default_rng(5)
    for _ in range(1000):
        g = FrameGraph(clock=lambda: 0.0)
        a = Pose.from_axis_angle(rng.normal(size=3), rng.uniform(0, np.pi),
                                 rng.uniform(-2, 2, 3))
        b = Pose.from_axis_angle(rng.normal(size=3), rng.uniform(0, np.pi),
                                 rng.uniform(-2, 2, 3))
        g.update_edge("AR", "Robot", a, t=0.0)
        g.update_edge("Robot", "Map", b, t=0.0)
        pose, _ = g.ar_to_map()
        np.testing.assert_allclose(pose.matrix, a.matrix @ b.matrix, atol=1e-12)

    g = FrameGraph(clock=lambda: 0.0)
    a = Pose.from_axis_angle([0.2, 0.9, -0.1], 0.8, (0.3, -0.2, 1.0))
    b = Pose.from_axis_angle([-0.5, 0.1, 0.4], 1.2, (-0.1, 0.6, 0.2))
    g.update_edge("AR", "Robot", a, t=0.0)
    g.update_edge("Robot", "Map", b, t=0.0)
    g.update_edge("AR", "Map", compose(compose(a, b), Pose(t=[0.01, 0, 0])), t=0.0)
    _, trans_residual = g.consistency_check()
    assert trans_residual == pytest.approx(0.01, abs=1e-9)


@pytest.fixture(scope="module")
def served(tmp_path_factory):
    root = tmp_path_factory.mktemp("e2e_frames")
    ds = synth_generate(MODEL, K, uniform_pose_sampler((1.2, 2.8)), n=100,
                        seed=77, out_dir=root)
    save_dataset(ds, root / "annotations.json")
    configs = [
        ProxyConfig(name="sspe", pipeline="sspe_style", model=MODEL,
                    intrinsics=K, dataset=ds, max_in_flight=8),
        ProxyConfig(name="pipelined", pipeline="betapose_style", model=MODEL,
                    intrinsics=K, dataset=ds, max_in_flight=16,
                    backend={"type": "oracle", "delay_ms": 50},
                    kp_backend={"type": "oracle", "delay_ms": 50}),
        ProxyConfig(name="flaky", pipeline="betapose_style", model=MODEL,
                    intrinsics=K, dataset=ds, max_in_flight=8,
                    kp_backend={"type": "oracle",
                                "fail_image_ids": ["synth_00002"]}),
    ]
    handle = serve(configs, f"127.0.0.1:{free_port()}")
    yield handle.address, ds, root
    handle.stop()


def test_end_to_end_accuracy_and_latency(served):
    """100 zero-noise frames over loopback: accuracy 1.0, server p95 under
    50 ms per 640x480 frame, per-frame decomposition holds."""
    addr, ds, root = served
    report = run_benchmark(addr, "sspe", ds, MODEL, repeats=1, images_root=root)
    assert report.n_errors == 0
    assert report.accuracy == 1.0, f"accuracy {report.accuracy}"
    p95 = report.stage_stats["server_total"]["p95"]
    assert p95 < 50.0, f"server_total p95 {p95:.1f} ms over the 50 ms budget"
    for s in report.samples:
        assert s.end_to_end_ms >= s.transmit_ms + s.server_total_ms - 1.0, \
            f"frame {s.frame_id}: decomposition violated"


def test_pipelining_overlap_and_isolation(served):
    """10-frame burst through 50 ms + 50 ms stubbed stages finishes in
    under 0.9x the sequential sum; a stage failure hits only its frame."""
    addr, ds, root = served
    payload = (root / ds.records[0].image_path).read_bytes()

    def post(proxy, frame_id):
        return requests.post(
            f"{addr}/proxies/{proxy}/frames", data=payload,
            headers={"Content-Type": "image/png", "X-Frame-Id": frame_id},
            timeout=30)

    n = 10
    with ThreadPoolExecutor(max_workers=n) as pool:
        t0 = time.perf_counter()
        results = list(pool.map(
            lambda _: post("pipelined", ds.records[0].image_id), range(n)))
        wall = time.perf_counter() - t0
    assert all(r.status_code == 200 for r in results)
    sequential = n * (0.050 + 0.050)
    assert wall < 0.9 * sequential, \
        f"burst took {wall:.3f}s; no overlap over sequential {sequential:.3f}s"

    ids = [r.image_id for r in ds.records[:5]]
    responses = {i: post("flaky", i) for i in ids}
    assert responses["synth_00002"].status_code == 502
    for i in ids:
        if i != "synth_00002":
            assert responses[i].status_code == 200, responses[i].text


def test_distance_sweep_monotone_and_stable():
    """Accuracy decays with distance (0.03 allowance for 200-sample binomial
    noise at plateaus) and the 50%-range is stable across seeds within one
    grid step."""
    distances = [float(d) for d in range(1, 11)]
    bests = []
    for seed in (1, 2):
        noise = OracleNoiseModel(sigma_px=0.5, distance_noise_gain=1.0, seed=seed)
        sweep, best = distance_sweep(None, "sspe_style", MODEL, K, distances,
                                     per_distance_n=200, noise=noise, seed=seed)
        accs = [acc for _, acc in sweep]
        for i in range(len(accs) - 1):
            assert accs[i + 1] <= accs[i] + 0.03, f"seed {seed}: not monotone: {accs}"
        assert best is not None, f"seed {seed}: 50% range undefined: {accs}"
        bests.append(best)
    assert abs(bests[0] - bests[1]) <= 1.0, f"50% range unstable across seeds: {bests}"


def test_dataset_round_trip_and_augmentation_consistency(tmp_path):
    """Exact save/load round trip; 500 scale/rotate records hold the 0.5 px
    invariant; hflip output is flagged and excluded from ADD scoring."""
    ds = synth_generate(MODEL, K, uniform_pose_sampler((1.5, 2.5), max_offset_frac=0.03),
                        n=250, seed=13, render=False)
    p1, p2 = tmp_path / "a.json", tmp_path / "b.json"
    save_dataset(ds, p1)
    save_dataset(load_dataset(p1), p2)
    assert p1.read_bytes() == p2.read_bytes(), "round trip not exact"

    base_img = Image.new("RGB", (K.width, K.height), (40, 40, 40))
    rng = np.random.default_rng(3)
    checked = 0
    for rec in ds.records:
        scaled, _ = augment(rec, base_img, Scale(float(rng.uniform(0.4, 1.6))))
        assert scaled.keypoint_consistency_px(MODEL) < 0.5
        rotated, _ = augment(rec, base_img, Rotate(float(rng.uniform(-180, 180))))
        assert rotated.keypoint_consistency_px(MODEL) < 0.5
        checked += 2
    assert checked == 500

    flipped, _ = augment(ds.records[0], base_img, HFlip(), model=MODEL)
    assert flipped.chirality_approximate
    scorable = [r for r in [flipped, ds.records[1]] if not r.chirality_approximate]
    assert len(scorable) == 1, "hflip record leaked into the ADD suite"
    assert add_accuracy([(r.pose, r.pose) for r in scorable], MODEL) == 1.0


def test_crop_invariance_100_random_crops():
    """betapose pose identical (1e-9) for any crop containing all keypoints."""
    ds = synth_generate(MODEL, K, uniform_pose_sampler((1.5, 2.2), max_offset_frac=0.02),
                        n=10, seed=17, render=False)
    backend = OracleBackend(lookup=ds, noise=OracleNoiseModel(sigma_px=1.0, seed=23))
    rng = np.random.default_rng(29)
    checked = 0
    for rec in ds.records:
        det = backend.detect(rec.image_id)
        pts = np.array(list(det.keypoints_2d.values()))
        lo = pts.min(axis=0)
        hi = pts.max(axis=0)
        reference = run_betapose_pipeline(backend, backend, rec.image_id, MODEL, K)
        for _ in range(10):
            u0 = int(rng.uniform(0, lo[0] - 1)) if lo[0] > 1 else 0
            v0 = int(rng.uniform(0, lo[1] - 1)) if lo[1] > 1 else 0
            u1 = int(rng.uniform(hi[0] + 1, K.width - 1))
            v1 = int(rng.uniform(hi[1] + 1, K.height - 1))
            out = run_betapose_pipeline(backend, backend, rec.image_id, MODEL, K,
                                        crop=(u0, v0, u1, v1))
            assert out.pose.rotation_angle_to(reference.pose) < 1e-9
            assert out.pose.translation_distance_to(reference.pose) < 1e-9
            checked += 1
    assert checked == 100
