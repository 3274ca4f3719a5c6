/**
 * Annotation session state: images, model keypoints, per-image
 * correspondences, solved poses, manual refinement and export.
 *
 * Pure state machine with the PnP call injected, so the whole workflow is
 * scriptable without a DOM. All numerics live server-side; this module only
 * projects for display.
 */

import {
  BOX_EDGES,
  applyNudgeDelta,
  effectivePose,
  emptyNudges,
  projectPoint,
} from "./geometry.js";
import { SCHEMA_VERSION, validateDataset } from "./schema.js";
import type {
  ImageEntry,
  Intrinsics,
  ModelData,
  Nudge,
  NudgeState,
  Pixel,
  PoseData,
  ServerError,
  SolveOutcome,
  SolveResponse,
} from "./types.js";

export const MIN_CORRESPONDENCES = 3;
export const UNDO_DEPTH = 50; // contract floor is 20

export type PlaceResult = "placed" | "replaced" | "ignored_outside";

export type PnpPoster = (payload: {
  correspondences: { model_point: number[]; image_point: number[] }[];
  intrinsics: Intrinsics;
}) => Promise<{ status: number; body: unknown }>;

interface PerImage {
  correspondences: Map<string, Pixel>;
  solve?: SolveResponse;
  nudges: NudgeState;
  undoStack: NudgeState[];
  dirty: boolean; // correspondences changed since the last solve
}

export interface OverlayData {
  /** model box centroid first, then the 8 corners, current-pose projection */
  corners: Pixel[];
  /** index pairs into corners[1..8] (already offset by one) */
  edges: [number, number][];
  /** clicked pixel vs current-pose projection, per named correspondence */
  perPoint: { name: string; clicked: Pixel; projected: Pixel; error: number }[];
  rms: number;
  ambiguous: boolean;
}

export interface ExportSuccess {
  ok: true;
  json: string;
  exported: number;
  skipped: number;
  notice: string;
}

export interface ExportBlocked {
  ok: false;
  notice: string;
}

export class AnnotationSession {
  model: ModelData | null = null;
  intrinsics: Intrinsics | null = null;
  images: ImageEntry[] = [];
  currentImageId: string | null = null;
  solveInFlight = false;

  private perImage = new Map<string, PerImage>();

  loadModel(model: ModelData): void {
    if (!model.keypoints || Object.keys(model.keypoints).length === 0) {
      throw new Error("model carries no named keypoints");
    }
    this.model = model;
  }

  setIntrinsics(k: Intrinsics): void {
    this.intrinsics = k;
  }

  addImages(entries: ImageEntry[]): void {
    for (const e of entries) {
      if (this.perImage.has(e.imageId)) continue;
      this.images.push(e);
      this.perImage.set(e.imageId, {
        correspondences: new Map(),
        nudges: emptyNudges(),
        undoStack: [],
        dirty: false,
      });
    }
    if (this.currentImageId === null && this.images.length > 0) {
      this.currentImageId = this.images[0].imageId;
    }
  }

  selectImage(imageId: string): void {
    if (!this.perImage.has(imageId)) throw new Error(`unknown image ${imageId}`);
    this.currentImageId = imageId;
  }

  private state(imageId?: string): PerImage {
    const id = imageId ?? this.currentImageId;
    if (id === null) throw new Error("no image selected");
    const st = this.perImage.get(id);
    if (!st) throw new Error(`unknown image ${id}`);
    return st;
  }

  private entry(imageId?: string): ImageEntry {
    const id = imageId ?? this.currentImageId;
    const e = this.images.find((i) => i.imageId === id);
    if (!e) throw new Error(`unknown image ${id}`);
    return e;
  }

  correspondenceCount(imageId?: string): number {
    return this.state(imageId).correspondences.size;
  }

  correspondences(imageId?: string): { name: string; pixel: Pixel }[] {
    return [...this.state(imageId).correspondences.entries()].map(
      ([name, pixel]) => ({ name, pixel }),
    );
  }

  /** Store or replace one named click; clicks outside the image are ignored. */
  placeCorrespondence(keypointName: string, click: Pixel, imageId?: string): PlaceResult {
    if (!this.model) throw new Error("load a model before placing correspondences");
    if (!(keypointName in this.model.keypoints)) {
      throw new Error(`model has no keypoint named ${keypointName}`);
    }
    const img = this.entry(imageId);
    if (click[0] < 0 || click[0] > img.width - 1 || click[1] < 0 || click[1] > img.height - 1) {
      return "ignored_outside";
    }
    const st = this.state(imageId);
    const had = st.correspondences.has(keypointName);
    st.correspondences.set(keypointName, [click[0], click[1]]);
    st.dirty = true;
    return had ? "replaced" : "placed";
  }

  canSolve(imageId?: string): boolean {
    return (
      !this.solveInFlight &&
      this.intrinsics !== null &&
      this.model !== null &&
      this.correspondenceCount(imageId) >= MIN_CORRESPONDENCES
    );
  }

  /** POST the correspondences to /pnp; on error the session is unchanged. */
  async solve(post: PnpPoster, imageId?: string): Promise<SolveOutcome> {
    if (!this.canSolve(imageId)) {
      throw new Error("solve requires >= 3 correspondences, intrinsics and no pending solve");
    }
    const st = this.state(imageId);
    const model = this.model!;
    const payload = {
      correspondences: [...st.correspondences.entries()].map(([name, pixel]) => ({
        model_point: [...model.keypoints[name]],
        image_point: [...pixel],
      })),
      intrinsics: this.intrinsics!,
    };
    this.solveInFlight = true;
    try {
      const { status, body } = await post(payload);
      if (status !== 200) {
        return { ok: false, error: body as ServerError };
      }
      const result = body as SolveResponse;
      st.solve = result;
      st.nudges = emptyNudges();
      st.undoStack = [];
      st.dirty = false;
      return { ok: true, result };
    } finally {
      this.solveInFlight = false;
    }
  }

  hasSolvedPose(imageId?: string): boolean {
    return this.state(imageId).solve !== undefined;
  }

  /** Pose currently displayed: solved base plus accumulated manual offsets. */
  currentPose(imageId?: string): PoseData {
    const st = this.state(imageId);
    if (!st.solve) throw new Error("no solved pose for this image");
    return effectivePose(st.solve.pose, st.nudges);
  }

  ambiguityWarning(imageId?: string): boolean {
    const st = this.state(imageId);
    return st.solve !== undefined && st.solve.candidates_considered > 1;
  }

  /** Manual refinement; each nudge pushes the prior state onto the undo stack. */
  applyNudge(nudge: Nudge, imageId?: string): void {
    const st = this.state(imageId);
    if (!st.solve) throw new Error("solve a pose before refining it");
    st.undoStack.push(st.nudges);
    if (st.undoStack.length > UNDO_DEPTH) st.undoStack.shift();
    st.nudges = applyNudgeDelta(st.nudges, nudge);
  }

  undo(imageId?: string): boolean {
    const st = this.state(imageId);
    const prev = st.undoStack.pop();
    if (prev === undefined) return false;
    st.nudges = prev;
    return true;
  }

  /** Wireframe + per-point reprojection errors under the current pose. */
  overlay(imageId?: string): OverlayData {
    const st = this.state(imageId);
    if (!st.solve) throw new Error("no solved pose for this image");
    const model = this.model!;
    const k = this.intrinsics!;
    const pose = this.currentPose(imageId);
    const corners: Pixel[] = [
      projectPoint(model.centroid, pose, k),
      ...model.bbox_corners.map((c) => projectPoint(c, pose, k)),
    ];
    const perPoint = [...st.correspondences.entries()].map(([name, clicked]) => {
      const projected = projectPoint(model.keypoints[name], pose, k);
      const error = Math.hypot(projected[0] - clicked[0], projected[1] - clicked[1]);
      return { name, clicked, projected, error };
    });
    const rms = perPoint.length
      ? Math.sqrt(perPoint.reduce((s, p) => s + p.error * p.error, 0) / perPoint.length)
      : 0;
    return {
      corners,
      edges: BOX_EDGES.map(([a, b]) => [a + 1, b + 1] as [number, number]),
      perPoint,
      rms,
      ambiguous: this.ambiguityWarning(imageId),
    };
  }

  /**
   * Dataset JSON export of every image with a solved pose. Keypoints are
   * written as projections of the model keypoints under the current
   * (refined) pose, so exported records satisfy the primary toolkit's
   * 0.5 px label-consistency invariant by construction.
   */
  exportDataset(bboxPad = 2.0): ExportSuccess | ExportBlocked {
    if (!this.model || !this.intrinsics) {
      return { ok: false, notice: "load a model and intrinsics before exporting" };
    }
    const records = [];
    let skipped = 0;
    for (const img of this.images) {
      const st = this.perImage.get(img.imageId)!;
      if (!st.solve) {
        skipped += 1;
        continue;
      }
      const pose = this.currentPose(img.imageId);
      const k = this.intrinsics;
      const keypoints: Record<string, Pixel> = {};
      for (const [name, p] of Object.entries(this.model.keypoints)) {
        keypoints[name] = projectPoint(p, pose, k);
      }
      const us = Object.values(keypoints).map((p) => p[0]);
      const vs = Object.values(keypoints).map((p) => p[1]);
      records.push({
        image_id: img.imageId,
        image_path: img.imagePath,
        object_class: this.model.name,
        pose: { q: [...pose.q], t: [...pose.t] },
        intrinsics: { ...k },
        keypoints_2d: keypoints,
        bbox_2d: [
          Math.min(...us) - bboxPad,
          Math.min(...vs) - bboxPad,
          Math.max(...us) + bboxPad,
          Math.max(...vs) + bboxPad,
        ],
        source: "real",
      });
    }
    if (records.length === 0) {
      return { ok: false, notice: "nothing to export: no image has a solved pose" };
    }
    const doc = {
      schema_version: SCHEMA_VERSION,
      model: this.model.name,
      records,
    };
    const problems = validateDataset(doc);
    if (problems.length > 0) {
      throw new Error(`export failed schema validation: ${problems.join("; ")}`);
    }
    const notice = skipped > 0
      ? `exported ${records.length}, skipped ${skipped} image(s) without a solved pose`
      : `exported ${records.length}`;
    return { ok: true, json: JSON.stringify(doc, null, 2), exported: records.length, skipped, notice };
  }
}
