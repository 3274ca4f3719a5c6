/** Thin client for the edge server's /pnp and /health endpoints. */

import type { PnpPoster } from "./session.js";

export function makePnpPoster(serverUrl: string, fetchImpl: typeof fetch = fetch): PnpPoster {
  const base = serverUrl.replace(/\/$/, "");
  return async (payload) => {
    const resp = await fetchImpl(`${base}/pnp`, {
      method: "POST",
      headers: { "Content-Type": "application/json" },
      body: JSON.stringify(payload),
    });
    return { status: resp.status, body: await resp.json() };
  };
}

export async function checkHealth(
  serverUrl: string,
  fetchImpl: typeof fetch = fetch,
): Promise<{ reachable: boolean; proxies: { name: string; status: string }[] }> {
  try {
    const resp = await fetchImpl(`${serverUrl.replace(/\/$/, "")}/health`);
    if (!resp.ok) return { reachable: false, proxies: [] };
    const body = (await resp.json()) as { proxies: { name: string; status: string }[] };
    return { reachable: true, proxies: body.proxies };
  } catch {
    return { reachable: false, proxies: [] };
  }
}
