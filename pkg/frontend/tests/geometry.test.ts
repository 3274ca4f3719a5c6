import { describe, expect, it } from "vitest";

import {
  applyNudgeDelta,
  axisAngleQuat,
  composePose,
  effectivePose,
  emptyNudges,
  projectPoint,
  quatMultiply,
  quatToMatrix,
  transformPoint,
} from "../src/geometry.js";
import type { Intrinsics, PoseData } from "../src/types.js";

const K: Intrinsics = {
  fx: 500, fy: 500, cx: 320, cy: 240, width: 640, height: 480, k1: 0, k2: 0,
};

const IDENTITY: PoseData = { q: [1, 0, 0, 0], t: [0, 0, 0] };

describe("quaternion math", () => {
  it("multiplies like the Hamilton product", () => {
    const qz90 = axisAngleQuat([0, 0, 1], Math.PI / 2);
    const qz180 = quatMultiply(qz90, qz90);
    expect(qz180[0]).toBeCloseTo(0, 12);
    expect(qz180[3]).toBeCloseTo(1, 12);
  });

  it("rotation matrix of a z-rotation", () => {
    const m = quatToMatrix(axisAngleQuat([0, 0, 1], Math.PI / 2));
    expect(m[0][0]).toBeCloseTo(0, 12);
    expect(m[0][1]).toBeCloseTo(-1, 12);
    expect(m[1][0]).toBeCloseTo(1, 12);
  });
});

describe("pose composition and transform", () => {
  it("translation then rotation moves the translation", () => {
    const trans: PoseData = { q: [1, 0, 0, 0], t: [1, 0, 0] };
    const rot: PoseData = { q: axisAngleQuat([0, 0, 1], Math.PI / 2), t: [0, 0, 0] };
    const out = composePose(rot, trans);
    expect(out.t[0]).toBeCloseTo(0, 12);
    expect(out.t[1]).toBeCloseTo(1, 12);
  });

  it("transformPoint applies rotation then translation", () => {
    const pose: PoseData = { q: axisAngleQuat([0, 0, 1], Math.PI / 2), t: [0, 0, 1] };
    const out = transformPoint(pose, [1, 0, 0]);
    expect(out[0]).toBeCloseTo(0, 12);
    expect(out[1]).toBeCloseTo(1, 12);
    expect(out[2]).toBeCloseTo(1, 12);
  });
});

describe("projection", () => {
  it("optical axis lands on the principal point", () => {
    expect(projectPoint([0, 0, 1], IDENTITY, K)).toEqual([320, 240]);
  });

  it("analytic lateral offset", () => {
    const [u, v] = projectPoint([0.1, 0, 1], IDENTITY, K);
    expect(u).toBeCloseTo(370, 10);
    expect(v).toBeCloseTo(240, 10);
  });

  it("rejects points behind the camera", () => {
    expect(() => projectPoint([0, 0, -1], IDENTITY, K)).toThrow(/behind/);
  });

  it("applies radial distortion to normalized coordinates", () => {
    const kd: Intrinsics = { ...K, k1: 0.1, k2: -0.02 };
    const [u] = projectPoint([0.2, 0, 1], IDENTITY, kd);
    const r2 = 0.04;
    const d = 1 + 0.1 * r2 - 0.02 * r2 * r2;
    expect(u).toBeCloseTo(320 + 500 * 0.2 * d, 10);
  });
});

describe("nudge accumulation", () => {
  it("inverse nudges restore the base pose bit-for-bit", () => {
    const base: PoseData = { q: axisAngleQuat([0.3, 0.8, 0.1], 0.7), t: [0.13, -0.27, 2.1] };
    let nudges = emptyNudges();
    nudges = applyNudgeDelta(nudges, { axis: "x", mode: "translate", delta: 0.01 });
    nudges = applyNudgeDelta(nudges, { axis: "x", mode: "translate", delta: -0.01 });
    const restored = effectivePose(base, nudges);
    expect(restored.q).toEqual([...base.q]);
    expect(restored.t).toEqual([...base.t]);
  });

  it("rotation nudges change the overlay pose", () => {
    const base: PoseData = { q: [1, 0, 0, 0], t: [0, 0, 2] };
    const nudges = applyNudgeDelta(emptyNudges(), {
      axis: "z", mode: "rotate", delta: (5 * Math.PI) / 180,
    });
    const posed = effectivePose(base, nudges);
    expect(posed.q[3]).not.toBe(0);
    expect(posed.t).toEqual([0, 0, 2]);
  });

  it("translation nudges shift only the translation", () => {
    const base: PoseData = { q: axisAngleQuat([1, 0, 0], 0.4), t: [0, 0, 2] };
    const nudges = applyNudgeDelta(emptyNudges(), {
      axis: "y", mode: "translate", delta: 0.05,
    });
    const posed = effectivePose(base, nudges);
    expect(posed.q).toEqual([...base.q]);
    expect(posed.t[1]).toBeCloseTo(0.05, 15);
  });
});
