/** Session state: everything the three modes render.
 *
 * Single source of truth is the server. Parameter values shown in the
 * configuration form come only from acknowledged snapshots/results, never
 * from local form state; pending expert queries resolve only on a label
 * event or server response.
 */

import type {
  LabelEvent,
  LoopEvent,
  MetricsSnapshot,
  ParamResult,
  PendingQuery,
  StepEvent,
} from "./types.js";

export const EVENT_WINDOW = 600; // one minute at 10 Hz

export interface InboxRow {
  query: PendingQuery;
  deadlineMs: number;            // local clock deadline for the countdown
  resolution: "pending" | "human" | "fallback" | "rejected";
}

export interface AckedParam {
  value: number | string;
  tier: number;
  effectiveAtStep?: number;
  message: string;
}

export class SessionStore {
  snapshot: MetricsSnapshot | null = null;
  events: StepEvent[] = [];
  labels: LabelEvent[] = [];
  inbox = new Map<number, InboxRow>();
  ackedParams = new Map<string, AckedParam>();
  connected = false;
  lastEventAtMs: number | null = null;

  applySnapshot(snap: MetricsSnapshot): void {
    this.snapshot = snap;
  }

  applyEvent(event: LoopEvent, nowMs: number): void {
    this.lastEventAtMs = nowMs;
    if (event.type === "step") {
      this.events.push(event as StepEvent);
      if (this.events.length > EVENT_WINDOW) {
        this.events.splice(0, this.events.length - EVENT_WINDOW);
      }
    } else if (event.type === "label") {
      const label = event as LabelEvent;
      this.labels.push(label);
      for (const row of this.inbox.values()) {
        if (
          row.resolution === "pending" &&
          row.query.origin_step === label.origin_step
        ) {
          row.resolution = label.provenance === "human" ? "human" : "fallback";
        }
      }
    }
  }

  setConnected(up: boolean, nowMs: number): void {
    this.connected = up;
    if (up) this.lastEventAtMs = nowMs;
  }

  /** Stale when connected but silent past one pacing interval (plus grace). */
  isStale(nowMs: number): boolean {
    if (!this.connected) return true;
    if (this.lastEventAtMs === null) return false;
    const rate = this.snapshot?.hot?.rate_hz ?? 10;
    const interval = 1000 / Number(rate || 10);
    return nowMs - this.lastEventAtMs > Math.max(2 * interval, 1500);
  }

  /** Merge the polled pending list; rows keep stable admission order. */
  syncPending(pending: PendingQuery[], nowMs: number): void {
    const seen = new Set<number>();
    for (const q of pending) {
      seen.add(q.qid);
      const existing = this.inbox.get(q.qid);
      if (existing) {
        existing.query = q;
        existing.deadlineMs = nowMs + q.expires_in_s * 1000;
      } else {
        this.inbox.set(q.qid, {
          query: q,
          deadlineMs: nowMs + q.expires_in_s * 1000,
          resolution: "pending",
        });
      }
    }
    // rows that vanished server-side without an answer expired to fallback
    for (const row of this.inbox.values()) {
      if (row.resolution === "pending" && !seen.has(row.query.qid)) {
        row.resolution = "fallback";
      }
    }
  }

  markAnswered(qid: number, outcome: "human" | "rejected"): void {
    const row = this.inbox.get(qid);
    if (row) row.resolution = outcome === "human" ? "human" : row.resolution;
    if (row && outcome === "rejected" && row.resolution === "pending") {
      row.resolution = "rejected";
    }
  }

  ackParam(result: ParamResult, value: number | string): void {
    if (!result.applied) return; // rejected changes never touch displayed state
    this.ackedParams.set(result.param, {
      value,
      tier: result.tier,
      effectiveAtStep: result.effective_at_step,
      message: result.message,
    });
  }

  /** Displayed value: last server acknowledgment, else the last snapshot. */
  displayedParam(name: string): number | string | null {
    const acked = this.ackedParams.get(name);
    if (acked !== undefined) return acked.value;
    const hot = this.snapshot?.hot as Record<string, unknown> | undefined;
    const v = hot?.[name];
    return typeof v === "number" || typeof v === "string" ? v : null;
  }

  inboxRows(): InboxRow[] {
    return [...this.inbox.values()].sort(
      (a, b) => a.query.origin_step - b.query.origin_step,
    );
  }
}
