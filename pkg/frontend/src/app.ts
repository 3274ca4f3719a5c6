/** DOM wiring: binds the annotation session to the canvas and controls. */

import { checkHealth, makePnpPoster } from "./api.js";
import { AnnotationSession } from "./session.js";
import type { Intrinsics, ModelData, Nudge } from "./types.js";

const session = new AnnotationSession();

function el<T extends HTMLElement>(id: string): T {
  const node = document.getElementById(id);
  if (!node) throw new Error(`missing element #${id}`);
  return node as T;
}

const canvas = el<HTMLCanvasElement>("canvas");
const ctx = canvas.getContext("2d")!;
const serverInput = el<HTMLInputElement>("server-url");
const healthLabel = el<HTMLSpanElement>("health");
const imageList = el<HTMLUListElement>("image-list");
const keypointList = el<HTMLUListElement>("keypoint-list");
const solveButton = el<HTMLButtonElement>("solve");
const undoButton = el<HTMLButtonElement>("undo");
const exportButton = el<HTMLButtonElement>("export");
const noticeBox = el<HTMLDivElement>("notices");
const warningBox = el<HTMLDivElement>("ambiguity");
const rmsLabel = el<HTMLSpanElement>("rms");
const errorTable = el<HTMLTableSectionElement>("errors-body");

let selectedKeypoint: string | null = null;
const bitmaps = new Map<string, ImageBitmap>();

function notify(text: string, kind: "info" | "error" = "info"): void {
  noticeBox.textContent = text;
  noticeBox.className = `notices ${kind}`;
}

async function refreshHealth(): Promise<void> {
  const { reachable } = await checkHealth(serverInput.value);
  healthLabel.textContent = reachable ? "server: ok" : "server: unreachable";
  healthLabel.className = reachable ? "ok" : "bad";
}

function renderImageList(): void {
  imageList.innerHTML = "";
  for (const img of session.images) {
    const li = document.createElement("li");
    li.textContent = `${img.imageId} (${session.correspondenceCount(img.imageId)} pts)`
      + (session.hasSolvedPose(img.imageId) ? " [solved]" : "");
    if (img.imageId === session.currentImageId) li.classList.add("selected");
    li.onclick = () => {
      session.selectImage(img.imageId);
      renderAll();
    };
    imageList.appendChild(li);
  }
}

function renderKeypointList(): void {
  keypointList.innerHTML = "";
  if (!session.model) return;
  const placed = new Set(session.currentImageId
    ? session.correspondences().map((c) => c.name) : []);
  for (const name of Object.keys(session.model.keypoints)) {
    const li = document.createElement("li");
    li.textContent = (placed.has(name) ? "● " : "○ ") + name;
    if (name === selectedKeypoint) li.classList.add("selected");
    li.onclick = () => {
      selectedKeypoint = name;
      renderKeypointList();
    };
    keypointList.appendChild(li);
  }
}

function renderCanvas(): void {
  ctx.clearRect(0, 0, canvas.width, canvas.height);
  const id = session.currentImageId;
  if (!id) return;
  const bitmap = bitmaps.get(id);
  if (bitmap) ctx.drawImage(bitmap, 0, 0);

  for (const { name, pixel } of session.correspondences()) {
    ctx.strokeStyle = "#ffcc00";
    ctx.beginPath();
    ctx.arc(pixel[0], pixel[1], 5, 0, 2 * Math.PI);
    ctx.stroke();
    ctx.fillStyle = "#ffcc00";
    ctx.font = "11px sans-serif";
    ctx.fillText(name, pixel[0] + 7, pixel[1] - 7);
  }

  if (session.hasSolvedPose(id)) {
    const overlay = session.overlay(id);
    ctx.strokeStyle = "#00e673";
    ctx.lineWidth = 1.5;
    for (const [a, b] of overlay.edges) {
      ctx.beginPath();
      ctx.moveTo(overlay.corners[a][0], overlay.corners[a][1]);
      ctx.lineTo(overlay.corners[b][0], overlay.corners[b][1]);
      ctx.stroke();
    }
    ctx.fillStyle = "#ff5050";
    const c = overlay.corners[0];
    ctx.beginPath();
    ctx.arc(c[0], c[1], 4, 0, 2 * Math.PI);
    ctx.fill();
    for (const p of overlay.perPoint) {
      ctx.strokeStyle = "#ff5050";
      ctx.beginPath();
      ctx.moveTo(p.clicked[0], p.clicked[1]);
      ctx.lineTo(p.projected[0], p.projected[1]);
      ctx.stroke();
    }
    rmsLabel.textContent = `${overlay.rms.toFixed(2)} px`;
    warningBox.hidden = !overlay.ambiguous;
    errorTable.innerHTML = "";
    for (const p of overlay.perPoint) {
      const row = document.createElement("tr");
      row.innerHTML = `<td>${p.name}</td><td>${p.error.toFixed(2)}</td>`;
      errorTable.appendChild(row);
    }
  } else {
    rmsLabel.textContent = "-";
    warningBox.hidden = true;
    errorTable.innerHTML = "";
  }
}

function renderControls(): void {
  solveButton.disabled = !(session.currentImageId && session.canSolve());
  undoButton.disabled = !(session.currentImageId
    && session.hasSolvedPose(session.currentImageId));
  exportButton.disabled = session.images.length === 0;
}

function renderAll(): void {
  renderImageList();
  renderKeypointList();
  renderCanvas();
  renderControls();
}

// --- input wiring ---------------------------------------------------------

el<HTMLInputElement>("model-file").onchange = async (ev) => {
  const file = (ev.target as HTMLInputElement).files?.[0];
  if (!file) return;
  try {
    session.loadModel(JSON.parse(await file.text()) as ModelData);
    notify(`model loaded: ${session.model!.name}`);
  } catch (err) {
    notify(`model load failed: ${err}`, "error");
  }
  renderAll();
};

el<HTMLInputElement>("intrinsics-file").onchange = async (ev) => {
  const file = (ev.target as HTMLInputElement).files?.[0];
  if (!file) return;
  try {
    const raw = JSON.parse(await file.text());
    session.setIntrinsics({ k1: 0, k2: 0, ...raw } as Intrinsics);
    notify("intrinsics set");
  } catch (err) {
    notify(`intrinsics load failed: ${err}`, "error");
  }
  renderControls();
};

el<HTMLInputElement>("image-files").onchange = async (ev) => {
  const files = (ev.target as HTMLInputElement).files;
  if (!files) return;
  for (const file of Array.from(files)) {
    const bitmap = await createImageBitmap(file);
    const imageId = file.name.replace(/\.[^.]+$/, "");
    bitmaps.set(imageId, bitmap);
    session.addImages([{
      imageId,
      imagePath: file.name,
      width: bitmap.width,
      height: bitmap.height,
      url: URL.createObjectURL(file),
    }]);
  }
  const current = session.images.find((i) => i.imageId === session.currentImageId);
  if (current) {
    canvas.width = current.width;
    canvas.height = current.height;
  }
  renderAll();
};

canvas.onclick = (ev) => {
  if (!session.currentImageId) return;
  if (!selectedKeypoint) {
    notify("pick a keypoint from the list first", "error");
    return;
  }
  const rect = canvas.getBoundingClientRect();
  const scaleX = canvas.width / rect.width;
  const scaleY = canvas.height / rect.height;
  const u = (ev.clientX - rect.left) * scaleX;
  const v = (ev.clientY - rect.top) * scaleY;
  const placed = session.placeCorrespondence(selectedKeypoint, [u, v]);
  if (placed === "ignored_outside") {
    notify("click landed outside the image; ignored", "error");
    return;
  }
  notify(`${selectedKeypoint} ${placed} at (${u.toFixed(1)}, ${v.toFixed(1)})`);
  renderAll();
};

solveButton.onclick = async () => {
  solveButton.disabled = true; // one in-flight solve at a time
  try {
    const outcome = await session.solve(makePnpPoster(serverInput.value));
    if (outcome.ok) {
      notify(`solved: rms ${outcome.result.rms_reprojection_error.toFixed(3)} px, `
        + `${outcome.result.candidates_considered} candidate(s)`);
    } else {
      notify(`solve failed [${outcome.error.error}`
        + `${outcome.error.stage ? ` @ ${outcome.error.stage}` : ""}]: `
        + outcome.error.message, "error");
    }
  } catch (err) {
    notify(`solve failed: ${err}`, "error");
  }
  renderAll();
};

function nudgeHandler(mode: Nudge["mode"], axis: Nudge["axis"], sign: number) {
  return () => {
    const step = mode === "rotate"
      ? (parseFloat(el<HTMLInputElement>("rot-step").value) * Math.PI) / 180
      : parseFloat(el<HTMLInputElement>("trans-step").value);
    session.applyNudge({ mode, axis, delta: sign * step });
    renderAll();
  };
}

for (const axis of ["x", "y", "z"] as const) {
  el<HTMLButtonElement>(`rot-${axis}-plus`).onclick = nudgeHandler("rotate", axis, 1);
  el<HTMLButtonElement>(`rot-${axis}-minus`).onclick = nudgeHandler("rotate", axis, -1);
  el<HTMLButtonElement>(`trans-${axis}-plus`).onclick = nudgeHandler("translate", axis, 1);
  el<HTMLButtonElement>(`trans-${axis}-minus`).onclick = nudgeHandler("translate", axis, -1);
}

undoButton.onclick = () => {
  if (!session.undo()) notify("nothing to undo");
  renderAll();
};

exportButton.onclick = () => {
  const result = session.exportDataset();
  if (!result.ok) {
    notify(result.notice, "error");
    return;
  }
  const blob = new Blob([result.json], { type: "application/json" });
  const a = document.createElement("a");
  a.href = URL.createObjectURL(blob);
  a.download = "annotations.json";
  a.click();
  URL.revokeObjectURL(a.href);
  notify(result.notice);
};

serverInput.onchange = refreshHealth;
void refreshHealth();
setInterval(refreshHealth, 5000);
renderAll();
