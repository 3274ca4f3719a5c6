/** Validation for the dataset JSON (schema 1.0) the tool exports. */

export const SCHEMA_VERSION = "1.0";

const RECORD_REQUIRED = [
  "image_id", "image_path", "object_class", "pose", "intrinsics",
  "keypoints_2d", "bbox_2d", "source",
] as const;

const INTRINSICS_REQUIRED = ["fx", "fy", "cx", "cy", "width", "height", "k1", "k2"];

function isFiniteNumber(x: unknown): x is number {
  return typeof x === "number" && Number.isFinite(x);
}

function isNumberArray(x: unknown, n: number): boolean {
  return Array.isArray(x) && x.length === n && x.every(isFiniteNumber);
}

/** Returns a list of problems; empty means the document validates. */
export function validateDataset(doc: unknown): string[] {
  const problems: string[] = [];
  if (typeof doc !== "object" || doc === null) return ["document is not an object"];
  const d = doc as Record<string, unknown>;
  if (d.schema_version !== SCHEMA_VERSION) {
    problems.push(`schema_version must be "${SCHEMA_VERSION}"`);
  }
  if (typeof d.model !== "string") problems.push("model must be a string");
  if (!Array.isArray(d.records)) {
    problems.push("records must be an array");
    return problems;
  }
  const seen = new Set<string>();
  d.records.forEach((rec, i) => {
    const where = `records[${i}]`;
    if (typeof rec !== "object" || rec === null) {
      problems.push(`${where}: not an object`);
      return;
    }
    const r = rec as Record<string, unknown>;
    for (const key of RECORD_REQUIRED) {
      if (!(key in r)) problems.push(`${where}: missing field ${key}`);
    }
    if (typeof r.image_id === "string") {
      if (seen.has(r.image_id)) problems.push(`${where}: duplicate image_id ${r.image_id}`);
      seen.add(r.image_id);
    }
    const pose = r.pose as Record<string, unknown> | undefined;
    if (!pose || !isNumberArray(pose.q, 4) || !isNumberArray(pose.t, 3)) {
      problems.push(`${where}: pose must carry q[4] and t[3]`);
    }
    const intr = r.intrinsics as Record<string, unknown> | undefined;
    if (!intr || !INTRINSICS_REQUIRED.every((k) => isFiniteNumber(intr[k]))) {
      problems.push(`${where}: intrinsics must carry ${INTRINSICS_REQUIRED.join(", ")}`);
    }
    const kps = r.keypoints_2d as Record<string, unknown> | undefined;
    if (!kps || typeof kps !== "object") {
      problems.push(`${where}: keypoints_2d must be an object`);
    } else {
      for (const [name, val] of Object.entries(kps)) {
        if (!isNumberArray(val, 2)) problems.push(`${where}: keypoint ${name} must be [u, v]`);
      }
    }
    const bbox = r.bbox_2d;
    if (!isNumberArray(bbox, 4)) {
      problems.push(`${where}: bbox_2d must be [u_min, v_min, u_max, v_max]`);
    } else {
      const [u0, v0, u1, v1] = bbox as number[];
      if (!(u0 < u1 && v0 < v1)) problems.push(`${where}: degenerate bbox`);
      if (kps) {
        for (const [name, val] of Object.entries(kps)) {
          if (isNumberArray(val, 2)) {
            const [u, v] = val as number[];
            if (u < u0 || u > u1 || v < v0 || v > v1) {
              problems.push(`${where}: keypoint ${name} outside bbox`);
            }
          }
        }
      }
    }
    if (r.source !== "real" && r.source !== "synthetic" && r.source !== "augmented") {
      problems.push(`${where}: source must be real|synthetic|augmented`);
    }
  });
  return problems;
}
