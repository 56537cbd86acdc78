/** Configuration mode: hot-parameter form with tier feedback.
 *
 * Displayed values mirror the last server acknowledgment; a submission only
 * changes the display after the server replies. Tier-3 style rejections
 * render as a retrain advisory.
 */

import { Api, ApiError } from "./api.js";
import type { SessionStore } from "./store.js";

interface Field {
  name: string;
  label: string;
  step: string;
  hint: string;
}

export const FIELDS: Field[] = [
  { name: "tau", label: "query threshold tau", step: "0.05", hint: "tier 1" },
  { name: "batch_size", label: "online batch size", step: "1", hint: "tier 1" },
  { name: "rate_hz", label: "stream rate (Hz)", step: "1", hint: "tier 1" },
  { name: "candidate_n", label: "candidate actions N", step: "1", hint: "tier 1" },
  { name: "gamma", label: "discount gamma", step: "0.01", hint: "tier 2" },
  { name: "rho", label: "target EMA rho", step: "0.001", hint: "tier 2" },
  { name: "lambda_reg", label: "regularizer weight", step: "0.01", hint: "tier 2" },
  { name: "feature_space", label: "feature space (structural)", step: "", hint: "tier 3" },
];

export function tierBadgeHtml(tier: number, applied: boolean): string {
  if (!applied) {
    return `<span class="badge tier-badge tier-3" data-tier="3">tier 3: full retrain required</span>`;
  }
  const note = tier === 1 ? "instant" : "focused fine-tune scheduled";
  return `<span class="badge tier-badge tier-${tier}" data-tier="${tier}">tier ${tier}: ${note}</span>`;
}

export function renderConfig(root: HTMLElement, store: SessionStore, api: Api): void {
  if (!root.dataset.built) {
    root.innerHTML =
      `<p class="note">values shown are the server-acknowledged state; edits` +
      ` apply at the next step boundary.</p>` +
      FIELDS.map(
        (f) =>
          `<div class="param-row" data-param="${f.name}">` +
          `<label>${f.label}</label>` +
          `<input name="${f.name}" ${f.step ? `type="number" step="${f.step}"` : `type="text"`}/>` +
          `<button data-role="submit">apply</button>` +
          `<span class="ack" data-role="ack"></span>` +
          `<span class="hint">${f.hint}</span></div>`,
      ).join("") +
      `<div class="param-feedback" data-role="feedback"></div>`;
    root.dataset.built = "1";
    root.addEventListener("click", (ev) => {
      const target = ev.target as HTMLElement;
      if (target.dataset.role !== "submit") return;
      const row = target.closest(".param-row") as HTMLElement;
      const input = row.querySelector("input") as HTMLInputElement;
      const name = row.dataset.param!;
      const value: number | string =
        input.type === "number" ? Number(input.value) : input.value;
      void submitParam(root, store, api, name, value);
    });
  }
  for (const f of FIELDS) {
    const row = root.querySelector(`[data-param="${f.name}"]`) as HTMLElement;
    const ack = row.querySelector(`[data-role="ack"]`) as HTMLElement;
    const shown = store.displayedParam(f.name);
    const acked = store.ackedParams.get(f.name);
    ack.innerHTML =
      (shown != null ? `<code>${shown}</code> ` : "") +
      (acked
        ? tierBadgeHtml(acked.tier, true) +
          (acked.effectiveAtStep != null
            ? ` <span class="effective">effective at step ${acked.effectiveAtStep}</span>`
            : "")
        : "");
  }
}

export async function submitParam(
  root: HTMLElement,
  store: SessionStore,
  api: Api,
  name: string,
  value: number | string,
): Promise<void> {
  const feedback = root.querySelector(`[data-role="feedback"]`) as HTMLElement;
  try {
    const result = await api.setParam(name, value);
    store.ackParam(result, value);
    feedback.innerHTML =
      tierBadgeHtml(result.tier, result.applied) +
      ` <span class="msg">${result.message}</span>` +
      (result.tier === 2 && result.focused_steps
        ? ` <span class="msg">${result.focused_steps} focused gradient steps scheduled</span>`
        : "");
  } catch (err) {
    const detail = err instanceof ApiError ? err.detail : String(err);
    const advisory = /retrain/.test(detail)
      ? tierBadgeHtml(3, false) + ` <span class="advisory">${detail}</span>`
      : `<span class="error">rejected: ${detail}</span>`;
    feedback.innerHTML = advisory; // server rejection rendered verbatim
  }
}
