/** Expert-duty mode: the pending-query inbox.
 *
 * Rows are ordered by admission step and never reorder; countdowns tick down
 * from the server-reported expiry. Answering before the deadline resolves
 * the row with human provenance; expiry shows the fallback mark without any
 * user action; a second answer renders the duplicate rejection.
 */

import { Api, ApiError } from "./api.js";
import type { SessionStore } from "./store.js";
import { ACTION_NAMES } from "./types.js";

export function renderInbox(root: HTMLElement, store: SessionStore, api: Api,
                            nowMs: number): void {
  const rows = store.inboxRows();
  if (!rows.length) {
    root.innerHTML = `<div class="empty">no expert queries yet</div>`;
    return;
  }
  root.innerHTML = rows
    .map((row) => {
      const q = row.query;
      const remaining = Math.max(0, (row.deadlineMs - nowMs) / 1000);
      const countdown =
        row.resolution === "pending"
          ? `<span class="countdown" data-role="countdown">${remaining.toFixed(1)}s</span>`
          : "";
      const mark =
        row.resolution === "human"
          ? `<span class="prov prov-human" data-prov="human">answered: human</span>`
          : row.resolution === "fallback"
            ? `<span class="prov prov-fallback" data-prov="fallback">answered by fallback</span>`
            : row.resolution === "rejected"
              ? `<span class="prov prov-rejected" data-prov="rejected">duplicate rejected</span>`
              : "";
      const buttons =
        row.resolution === "pending"
          ? ACTION_NAMES.map(
              (name, a) =>
                `<button data-role="answer" data-qid="${q.qid}" data-action="${a}">${name}</button>`,
            ).join("")
          : "";
      return (
        `<div class="query-row" data-qid="${q.qid}">` +
        `<span class="qmeta">#${q.qid} step ${q.origin_step} ` +
        `u=${q.u.toFixed(3)} proposed ${ACTION_NAMES[q.proposed]}</span>` +
        `${countdown}${buttons}${mark}</div>`
      );
    })
    .join("");
  if (!root.dataset.wired) {
    root.dataset.wired = "1";
    root.addEventListener("click", (ev) => {
      const el = ev.target as HTMLElement;
      if (el.dataset.role !== "answer") return;
      void answerQuery(store, api, Number(el.dataset.qid), Number(el.dataset.action));
    });
  }
}

export async function answerQuery(store: SessionStore, api: Api, qid: number,
                                  action: number): Promise<void> {
  try {
    await api.answerQuery(qid, action);
    store.markAnswered(qid, "human");
  } catch (err) {
    if (err instanceof ApiError && err.status === 409) {
      store.markAnswered(qid, "rejected");
    } else if (err instanceof ApiError && err.status === 410) {
      // expiry race: the loop already stored the fallback label
      const row = store.inbox.get(qid);
      if (row && row.resolution === "pending") row.resolution = "fallback";
    } else {
      throw err;
    }
  }
}
