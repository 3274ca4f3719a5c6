/**
 * Client-side pose and projection math for overlay rendering.
 *
 * This is an independent implementation of the same conventions the server
 * uses (quaternion w,x,y,z; pose maps object points into the camera frame;
 * pixel origin top-left, +v down; two-term radial distortion applied to
 * normalized coordinates). The server remains the single source of truth
 * for solving; the client only projects for display.
 */

import type { Intrinsics, Nudge, NudgeState, Pixel, PoseData, Vec3 } from "./types.js";

export function quatMultiply(
  a: PoseData["q"],
  b: PoseData["q"],
): PoseData["q"] {
  const [aw, ax, ay, az] = a;
  const [bw, bx, by, bz] = b;
  return [
    aw * bw - ax * bx - ay * by - az * bz,
    aw * bx + ax * bw + ay * bz - az * by,
    aw * by - ax * bz + ay * bw + az * bx,
    aw * bz + ax * by - ay * bx + az * bw,
  ];
}

export function quatNormalize(q: PoseData["q"]): PoseData["q"] {
  const n = Math.hypot(q[0], q[1], q[2], q[3]);
  if (!(n > 0) || !Number.isFinite(n)) {
    throw new Error("quaternion norm must be positive and finite");
  }
  if (Math.abs(n - 1) <= 1e-12) return [...q];
  return [q[0] / n, q[1] / n, q[2] / n, q[3] / n];
}

export function quatToMatrix(q: PoseData["q"]): number[][] {
  const [w, x, y, z] = q;
  return [
    [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
    [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
    [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
  ];
}

export function axisAngleQuat(axis: Vec3, angle: number): PoseData["q"] {
  const n = Math.hypot(axis[0], axis[1], axis[2]);
  if (n === 0) {
    if (angle !== 0) throw new Error("zero axis with nonzero angle");
    return [1, 0, 0, 0];
  }
  const s = Math.sin(angle / 2) / n;
  return [Math.cos(angle / 2), axis[0] * s, axis[1] * s, axis[2] * s];
}

/** compose(a, b): apply b first, then a. */
export function composePose(a: PoseData, b: PoseData): PoseData {
  const r = quatToMatrix(a.q);
  const t: Vec3 = [
    r[0][0] * b.t[0] + r[0][1] * b.t[1] + r[0][2] * b.t[2] + a.t[0],
    r[1][0] * b.t[0] + r[1][1] * b.t[1] + r[1][2] * b.t[2] + a.t[1],
    r[2][0] * b.t[0] + r[2][1] * b.t[1] + r[2][2] * b.t[2] + a.t[2],
  ];
  return { q: quatNormalize(quatMultiply(a.q, b.q)), t };
}

export function transformPoint(pose: PoseData, p: Vec3): Vec3 {
  const r = quatToMatrix(pose.q);
  return [
    r[0][0] * p[0] + r[0][1] * p[1] + r[0][2] * p[2] + pose.t[0],
    r[1][0] * p[0] + r[1][1] * p[1] + r[1][2] * p[2] + pose.t[1],
    r[2][0] * p[0] + r[2][1] * p[1] + r[2][2] * p[2] + pose.t[2],
  ];
}

export const MIN_DEPTH = 1e-6;

/** Pinhole projection with radial distortion; throws on points behind camera. */
export function projectPoint(p: Vec3, pose: PoseData, k: Intrinsics): Pixel {
  const cam = transformPoint(pose, p);
  if (cam[2] <= MIN_DEPTH) {
    throw new Error(`point behind camera (z=${cam[2]})`);
  }
  let xn = cam[0] / cam[2];
  let yn = cam[1] / cam[2];
  if (k.k1 !== 0 || k.k2 !== 0) {
    const r2 = xn * xn + yn * yn;
    const d = 1 + k.k1 * r2 + k.k2 * r2 * r2;
    xn *= d;
    yn *= d;
  }
  return [k.cx + k.fx * xn, k.cy + k.fy * yn];
}

export function emptyNudges(): NudgeState {
  return { rot: { x: 0, y: 0, z: 0 }, trans: { x: 0, y: 0, z: 0 } };
}

export function applyNudgeDelta(state: NudgeState, nudge: Nudge): NudgeState {
  const next: NudgeState = {
    rot: { ...state.rot },
    trans: { ...state.trans },
  };
  if (nudge.mode === "rotate") next.rot[nudge.axis] += nudge.delta;
  else next.trans[nudge.axis] += nudge.delta;
  return next;
}

export function nudgesAreZero(state: NudgeState): boolean {
  return (
    state.rot.x === 0 && state.rot.y === 0 && state.rot.z === 0 &&
    state.trans.x === 0 && state.trans.y === 0 && state.trans.z === 0
  );
}

/**
 * The pose actually displayed: camera-frame euler-offset rotations and a
 * translation offset applied on top of the solved base pose. Accumulating
 * offsets (rather than composing incremental poses) makes inverse nudges
 * cancel exactly, restoring the base pose bit-for-bit.
 */
export function effectivePose(base: PoseData, nudges: NudgeState): PoseData {
  if (nudgesAreZero(nudges)) return { q: [...base.q], t: [...base.t] };
  let pose = base;
  if (nudges.rot.x !== 0) {
    pose = composePose({ q: axisAngleQuat([1, 0, 0], nudges.rot.x), t: [0, 0, 0] }, pose);
  }
  if (nudges.rot.y !== 0) {
    pose = composePose({ q: axisAngleQuat([0, 1, 0], nudges.rot.y), t: [0, 0, 0] }, pose);
  }
  if (nudges.rot.z !== 0) {
    pose = composePose({ q: axisAngleQuat([0, 0, 1], nudges.rot.z), t: [0, 0, 0] }, pose);
  }
  return {
    q: pose.q,
    t: [
      pose.t[0] + nudges.trans.x,
      pose.t[1] + nudges.trans.y,
      pose.t[2] + nudges.trans.z,
    ],
  };
}

/** Edges of the 8-corner box in the order ObjectModel stores corners. */
export const BOX_EDGES: [number, number][] = [
  [0, 1], [0, 2], [1, 3], [2, 3],
  [4, 5], [4, 6], [5, 7], [6, 7],
  [0, 4], [1, 5], [2, 6], [3, 7],
];
