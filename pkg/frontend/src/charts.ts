/** Inline-SVG charts; no chart library, the series are tiny. */

import type { StepEvent } from "./types.js";

export interface SparkOptions {
  width?: number;
  height?: number;
  threshold?: number | null; // horizontal marker line, e.g. the tau threshold
  max?: number;
}

/** Polyline sparkline of a [0, max] series with an optional threshold line. */
export function sparklineSvg(series: number[], opts: SparkOptions = {}): string {
  const width = opts.width ?? 560;
  const height = opts.height ?? 90;
  const max = opts.max ?? 1.0;
  const n = Math.max(series.length, 2);
  const x = (i: number) => 4 + (i * (width - 8)) / (n - 1);
  const y = (v: number) =>
    height - 6 - (Math.min(Math.max(v, 0), max) / max) * (height - 12);
  const points = series.map((v, i) => `${x(i).toFixed(1)},${y(v).toFixed(1)}`).join(" ");
  let threshold = "";
  if (opts.threshold != null) {
    const ty = y(opts.threshold).toFixed(1);
    threshold =
      `<line x1="4" y1="${ty}" x2="${width - 4}" y2="${ty}" ` +
      `class="threshold" stroke-dasharray="6 4"/>`;
  }
  return (
    `<svg viewBox="0 0 ${width} ${height}" width="${width}" height="${height}" ` +
    `role="img" xmlns="http://www.w3.org/2000/svg">${threshold}` +
    `<polyline fill="none" class="series" points="${points}"/></svg>`
  );
}

/** Points above the threshold get a query badge in the uncertainty chart. */
export function queryMarkers(events: StepEvent[], tau: number): number[] {
  return events.flatMap((e, i) => (e.u > tau ? [i] : []));
}
