/** Monitoring mode: live gauges, the uncertainty sparkline with the tau
 * threshold line, gate-violation highlights, and the stale-data banner. */

import { sparklineSvg } from "./charts.js";
import type { SessionStore } from "./store.js";

function gauge(label: string, value: string, cls = ""): string {
  return (
    `<div class="gauge ${cls}"><div class="gauge-value">${value}</div>` +
    `<div class="gauge-label">${label}</div></div>`
  );
}

export function renderMonitor(root: HTMLElement, store: SessionStore, nowMs: number): void {
  const snap = store.snapshot;
  const stale = store.isStale(nowMs);
  const banner = stale
    ? `<div class="banner" data-role="stale-banner">stream disconnected or stale;` +
      ` reconnecting&hellip;</div>`
    : "";
  const tau = Number(snap?.hot?.tau ?? 0.2);
  const recent = store.events.slice(-600);
  const uSeries = recent.map((e) => e.u);
  const queryCount = recent.filter((e) => e.queried).length;
  const violating = recent.filter((e) => !e.passed).length;
  const gauges = snap
    ? gauge("query rate", snap.query_rate.toFixed(4)) +
      gauge("throughput (Hz)", snap.throughput_hz ? snap.throughput_hz.toFixed(2) : "n/a") +
      gauge("latency (ms)", snap.mean_latency_s ? (snap.mean_latency_s * 1000).toFixed(2) : "n/a") +
      gauge("safety", snap.safety_rate != null ? snap.safety_rate.toFixed(3) : "n/a") +
      gauge("labeled buffer", String(snap.final_buffer)) +
      gauge("weak buffer", String(snap.weak_buffer)) +
      gauge("updates", String(snap.updates)) +
      gauge("step", String(snap.step))
    : `<div class="empty">waiting for the first snapshot&hellip;</div>`;
  const badges = recent.length
    ? `<span class="badge query-badge">${queryCount} queried</span>` +
      `<span class="badge ${violating ? "badge-alert" : ""}">${violating} gate hits</span>`
    : "";
  root.innerHTML =
    banner +
    `<div class="gauges">${gauges}</div>` +
    `<h3>per-step uncertainty (tau = ${tau.toFixed(2)}) ${badges}</h3>` +
    `<div class="chart" data-role="uncertainty-chart">` +
    (uSeries.length ? sparklineSvg(uSeries, { threshold: tau }) : "no events yet") +
    `</div>` +
    `<h3>labeled-buffer growth</h3>` +
    `<div class="chart">` +
    (recent.length
      ? sparklineSvg(recent.map((e) => e.bl_size),
                     { max: Math.max(...recent.map((e) => e.bl_size), 10) })
      : "no events yet") +
    `</div>`;
}
