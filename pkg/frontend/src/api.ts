/** Thin fetch wrapper around the render service endpoints. */

import type { RenderRequest, ServiceMeta } from "./types.js";
import type { RenderResult } from "./scheduler.js";

export async function fetchMeta(baseUrl: string): Promise<ServiceMeta> {
  const resp = await fetch(`${baseUrl}/meta`);
  if (!resp.ok) {
    throw new Error(`/meta failed: HTTP ${resp.status}`);
  }
  return (await resp.json()) as ServiceMeta;
}

export async function fetchHealth(baseUrl: string): Promise<boolean> {
  try {
    const resp = await fetch(`${baseUrl}/health`);
    return resp.ok;
  } catch {
    return false;
  }
}

export async function postRender(
  baseUrl: string,
  request: RenderRequest,
): Promise<RenderResult> {
  const resp = await fetch(`${baseUrl}/render`, {
    method: "POST",
    headers: { "Content-Type": "application/json" },
    body: JSON.stringify(request),
  });
  if (!resp.ok) {
    let detail = `HTTP ${resp.status}`;
    try {
      const body = (await resp.json()) as { error?: string };
      if (body.error) detail = body.error;
    } catch {
      /* non-JSON error body */
    }
    throw new Error(`render failed: ${detail}`);
  }
  const millis = Number(resp.headers.get("X-Render-Millis") ?? "0");
  return { blob: await resp.blob(), millis };
}
