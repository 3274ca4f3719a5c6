/** Shared data shapes mirroring the server's wire formats. */

export interface Intrinsics {
  fx: number;
  fy: number;
  cx: number;
  cy: number;
  width: number;
  height: number;
  k1: number;
  k2: number;
}

/** Unit quaternion (w, x, y, z) plus translation in meters. */
export interface PoseData {
  q: [number, number, number, number];
  t: [number, number, number];
}

export type Vec3 = [number, number, number];
export type Pixel = [number, number];

/** Object model: the keypoint + bbox JSON the primary toolkit exports. */
export interface ModelData {
  name: string;
  keypoints: Record<string, Vec3>;
  bbox_corners: Vec3[];
  centroid: Vec3;
}

export interface SolveResponse {
  pose: PoseData;
  rms_reprojection_error: number;
  per_point_errors: number[];
  candidates_considered: number;
}

export interface ServerError {
  error: string;
  stage?: string;
  message: string;
}

export type SolveOutcome =
  | { ok: true; result: SolveResponse }
  | { ok: false; error: ServerError };

/** Euler-offset manual refinement applied on top of the solved pose. */
export interface NudgeState {
  rot: { x: number; y: number; z: number }; // radians, camera frame
  trans: { x: number; y: number; z: number }; // meters, camera frame
}

export interface Nudge {
  axis: "x" | "y" | "z";
  mode: "rotate" | "translate";
  delta: number; // radians or meters
}

export interface ImageEntry {
  imageId: string;
  imagePath: string;
  width: number;
  height: number;
  /** object URL or data URI for display; not exported */
  url?: string;
}
