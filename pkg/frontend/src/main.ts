/** App wiring: one SSE consumer, 1 Hz metric polling, three mode tabs. */

import { Api } from "./api.js";
import { renderConfig } from "./config.js";
import { renderInbox } from "./inbox.js";
import { renderMonitor } from "./monitor.js";
import { SessionStore } from "./store.js";
import type { LoopEvent } from "./types.js";

const BASE = (window as { CARELOOP_BASE?: string }).CARELOOP_BASE ?? "";

export function startApp(root: HTMLElement): void {
  const store = new SessionStore();
  const api = new Api(BASE);
  root.innerHTML =
    `<header><h1>careloop operator console</h1>` +
    `<nav>` +
    `<button data-mode="monitor" class="active">monitoring</button>` +
    `<button data-mode="config">configuration</button>` +
    `<button data-mode="inbox">expert duty</button>` +
    `<button data-role="pause">pause</button>` +
    `<button data-role="resume">resume</button>` +
    `</nav></header>` +
    `<main>` +
    `<section data-panel="monitor"></section>` +
    `<section data-panel="config" hidden></section>` +
    `<section data-panel="inbox" hidden></section>` +
    `</main>`;
  const panels = {
    monitor: root.querySelector(`[data-panel="monitor"]`) as HTMLElement,
    config: root.querySelector(`[data-panel="config"]`) as HTMLElement,
    inbox: root.querySelector(`[data-panel="inbox"]`) as HTMLElement,
  };
  let mode: keyof typeof panels = "monitor";
  root.querySelector("nav")!.addEventListener("click", (ev) => {
    const el = ev.target as HTMLElement;
    if (el.dataset.mode) {
      mode = el.dataset.mode as keyof typeof panels;
      for (const [name, panel] of Object.entries(panels)) {
        panel.hidden = name !== mode;
      }
      root.querySelectorAll("nav [data-mode]").forEach((b) =>
        b.classList.toggle("active", (b as HTMLElement).dataset.mode === mode),
      );
      draw();
    } else if (el.dataset.role === "pause") {
      void api.pause();
    } else if (el.dataset.role === "resume") {
      void api.resume();
    }
  });

  // push stream: per-step events
  let source: EventSource | null = null;
  const connect = () => {
    source?.close();
    source = new EventSource(`${BASE}/events`);
    source.onopen = () => store.setConnected(true, Date.now());
    source.onmessage = (msg) => {
      store.applyEvent(JSON.parse(msg.data) as LoopEvent, Date.now());
    };
    source.onerror = () => {
      store.setConnected(false, Date.now());
      setTimeout(connect, 1000); // auto-reconnect; banner shows meanwhile
    };
  };
  connect();

  // 1 Hz polling keeps snapshots and the query inbox fresh
  const poll = async () => {
    try {
      store.applySnapshot(await api.metrics());
      const { pending } = await api.pendingQueries();
      store.syncPending(pending, Date.now());
      store.setConnected(true, store.lastEventAtMs ?? Date.now());
    } catch {
      store.setConnected(false, Date.now());
    }
  };
  void poll();
  setInterval(() => void poll(), 1000);

  const draw = () => {
    const now = Date.now();
    if (mode === "monitor") renderMonitor(panels.monitor, store, now);
    if (mode === "config") renderConfig(panels.config, store, api);
    if (mode === "inbox") renderInbox(panels.inbox, store, api, now);
  };
  setInterval(draw, 250);
  draw();
}

if (typeof document !== "undefined" && document.getElementById("app")) {
  startApp(document.getElementById("app") as HTMLElement);
}
