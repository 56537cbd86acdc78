/** Thin typed client over the control-service endpoints.
 *
 * `fetchImpl` is injectable so tests can stub the server without a network.
 */

import type { MetricsSnapshot, ParamResult, PendingQuery } from "./types.js";

export type FetchLike = (
  url: string,
  init?: { method?: string; headers?: Record<string, string>; body?: string },
) => Promise<{ status: number; json(): Promise<unknown> }>;

export class ApiError extends Error {
  constructor(
    public status: number,
    public detail: string,
  ) {
    super(`HTTP ${status}: ${detail}`);
  }
}

export class Api {
  constructor(
    private base: string,
    private fetchImpl: FetchLike = (u, i) => fetch(u, i),
  ) {}

  private async request<T>(path: string, init?: Parameters<FetchLike>[1]): Promise<T> {
    const resp = await this.fetchImpl(this.base + path, init);
    const body = (await resp.json()) as Record<string, unknown>;
    if (resp.status >= 400) {
      throw new ApiError(resp.status, String(body?.detail ?? resp.status));
    }
    return body as T;
  }

  metrics(): Promise<MetricsSnapshot> {
    return this.request<MetricsSnapshot>("/metrics");
  }

  pendingQueries(): Promise<{ pending: PendingQuery[] }> {
    return this.request("/queries");
  }

  async setParam(name: string, value: number | string): Promise<ParamResult> {
    const body = await this.request<{ results: ParamResult[] }>("/params", {
      method: "POST",
      headers: { "content-type": "application/json" },
      body: JSON.stringify({ [name]: value }),
    });
    return body.results[0];
  }

  answerQuery(qid: number, action: number): Promise<{ ok: boolean; provenance: string }> {
    return this.request(`/queries/${qid}/answer`, {
      method: "POST",
      headers: { "content-type": "application/json" },
      body: JSON.stringify({ action }),
    });
  }

  pause(): Promise<{ ok: boolean }> {
    return this.request("/pause", { method: "POST" });
  }

  resume(): Promise<{ ok: boolean }> {
    return this.request("/resume", { method: "POST" });
  }
}
