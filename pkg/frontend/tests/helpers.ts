/** Test plumbing: drive the real Python server and toolkit from vitest. */

import { execFileSync, spawn, type ChildProcess } from "node:child_process";
import { mkdtempSync } from "node:fs";
import { tmpdir } from "node:os";
import { join } from "node:path";

export const PYTHON = process.env.EDGEPOSE_PYTHON ?? "python3";

export function runPython(code: string, args: string[] = []): string {
  return execFileSync(PYTHON, ["-c", code, ...args], { encoding: "utf-8" }).trim();
}

export function runCli(args: string[]): string {
  return execFileSync(PYTHON, ["-m", "edgepose.cli", ...args], { encoding: "utf-8" });
}

export function tempDir(prefix: string): string {
  return mkdtempSync(join(tmpdir(), prefix));
}

export interface LiveServer {
  url: string;
  proc: ChildProcess;
  stop: () => void;
}

export async function startServer(): Promise<LiveServer> {
  const port = Number(runPython("from edgepose.server import free_port; print(free_port())"));
  const intrinsics = JSON.stringify({
    fx: 500, fy: 500, cx: 320, cy: 240, width: 640, height: 480,
  });
  const proc = spawn(
    PYTHON,
    ["-m", "edgepose.cli", "serve", "--bind", `127.0.0.1:${port}`,
     "--intrinsics", intrinsics],
    { stdio: ["ignore", "ignore", "pipe"] },
  );
  const url = `http://127.0.0.1:${port}`;
  const deadline = Date.now() + 20_000;
  for (;;) {
    try {
      const resp = await fetch(`${url}/health`);
      if (resp.ok) break;
    } catch {
      // not up yet
    }
    if (Date.now() > deadline) {
      proc.kill();
      throw new Error("python server did not come up within 20s");
    }
    await new Promise((r) => setTimeout(r, 150));
  }
  return { url, proc, stop: () => proc.kill("SIGINT") };
}
