/** In-memory stand-in for the control service: implements just enough of the
 * endpoint contract for the console tests, with controllable time. */

import type { FetchLike } from "../src/api.js";
import type { MetricsSnapshot, ParamResult, PendingQuery } from "../src/types.js";

const TIER1 = new Set(["tau", "batch_size", "rate_hz", "candidate_n", "phi"]);
const TIER2 = new Set(["gamma", "rho", "lambda_reg", "beta"]);
const TIER3 = new Set(["architecture", "feature_space"]);

export class StubServer {
  step = 40;
  hot: Record<string, number | string> = {
    tau: 0.2, batch_size: 32, rate_hz: 10, candidate_n: 5,
    gamma: 0.99, rho: 0.995, lambda_reg: 0.01,
  };
  pending: PendingQuery[] = [];
  answered = new Set<number>();
  paramLog: Array<{ name: string; value: unknown }> = [];

  snapshot(): MetricsSnapshot {
    return {
      steps: this.step, step: this.step, query_rate: 0.13, labels_added: 60,
      final_buffer: 60, weak_buffer: this.step, updates: 3, safety_rate: 1.0,
      forced_queries: 1, substitutions: 9, pending_queries: this.pending.length,
      mean_latency_s: 0.0012, throughput_hz: 9.95,
      hot: this.hot as MetricsSnapshot["hot"],
    };
  }

  addQuery(q: PendingQuery): void {
    this.pending.push(q);
  }

  expire(qid: number): void {
    this.pending = this.pending.filter((q) => q.qid !== qid);
  }

  fetch: FetchLike = async (url, init) => {
    const path = url.replace(/^https?:\/\/[^/]+/, "");
    const reply = (status: number, body: unknown) =>
      ({ status, json: async () => body }) as Awaited<ReturnType<FetchLike>>;
    if (path === "/metrics") return reply(200, this.snapshot());
    if (path === "/queries") return reply(200, { pending: this.pending });
    if (path === "/params" && init?.method === "POST") {
      const body = JSON.parse(init.body ?? "{}") as Record<string, unknown>;
      const [name, value] = Object.entries(body)[0];
      this.paramLog.push({ name, value });
      if (TIER3.has(name)) {
        return reply(409, { detail: "rejected: full retrain required" });
      }
      if (!TIER1.has(name) && !TIER2.has(name)) {
        return reply(400, { detail: `unknown hot parameter '${name}'` });
      }
      const tier = TIER1.has(name) ? 1 : 2;
      this.hot[name] = value as number | string;
      const result: ParamResult = {
        param: name, tier: tier as 1 | 2, applied: true,
        message: tier === 1 ? "applied instantly; no weight change"
                            : "500 focused gradient steps scheduled",
        focused_steps: tier === 2 ? 500 : 0,
        effective_at_step: this.step + 1,
      };
      return reply(200, { results: [result] });
    }
    const answer = path.match(/^\/queries\/(\d+)\/answer$/);
    if (answer && init?.method === "POST") {
      const qid = Number(answer[1]);
      const action = (JSON.parse(init.body ?? "{}") as { action: number }).action;
      if (!Number.isInteger(action) || action < 0 || action > 4) {
        return reply(422, { detail: "action out of range" });
      }
      if (this.answered.has(qid)) {
        return reply(409, { detail: "duplicate answer: query already resolved" });
      }
      if (!this.pending.some((q) => q.qid === qid)) {
        return reply(410, { detail: "query expired; fallback label stored" });
      }
      this.answered.add(qid);
      this.expire(qid);
      return reply(200, { ok: true, qid, provenance: "human" });
    }
    if (path === "/pause" || path === "/resume") return reply(200, { ok: true });
    return reply(404, { detail: `no stub for ${path}` });
  };
}

export function pendingQuery(qid: number, originStep: number,
                             expiresIn = 30): PendingQuery {
  return {
    qid, origin_step: originStep, proposed: 0, u: 0.42,
    state: Array(10).fill(0.5), expires_in_s: expiresIn,
  };
}
