// @vitest-environment jsdom
import { beforeEach, describe, expect, it } from "vitest";

import { Api } from "../src/api.js";
import { renderConfig, submitParam } from "../src/config.js";
import { SessionStore } from "../src/store.js";
import { StubServer } from "./stub.js";

describe("configuration mode", () => {
  let stub: StubServer;
  let api: Api;
  let store: SessionStore;
  let root: HTMLElement;

  beforeEach(() => {
    stub = new StubServer();
    api = new Api("http://stub", stub.fetch);
    store = new SessionStore();
    store.applySnapshot(stub.snapshot());
    root = document.createElement("div");
    document.body.replaceChildren(root);
    renderConfig(root, store, api);
  });

  it("tier-1 acknowledgment renders a tier-1 badge and effective step", async () => {
    await submitParam(root, store, api, "tau", 0.3);
    renderConfig(root, store, api);
    const feedback = root.querySelector(`[data-role="feedback"]`)!;
    const badge = feedback.querySelector(".tier-badge") as HTMLElement;
    expect(badge.dataset.tier).toBe("1");
    expect(badge.textContent).toContain("instant");
    const ack = root.querySelector(`[data-param="tau"] [data-role="ack"]`)!;
    expect(ack.textContent).toContain("0.3");
    expect(ack.textContent).toContain("effective at step 41");
    expect(stub.paramLog).toEqual([{ name: "tau", value: 0.3 }]);
  });

  it("tier-2 acknowledgment advertises the 500 focused steps", async () => {
    await submitParam(root, store, api, "gamma", 0.95);
    const feedback = root.querySelector(`[data-role="feedback"]`)!;
    const badge = feedback.querySelector(".tier-badge") as HTMLElement;
    expect(badge.dataset.tier).toBe("2");
    expect(feedback.textContent).toContain("500 focused gradient steps");
  });

  it("tier-3 rejection renders a retrain advisory and keeps old value", async () => {
    await submitParam(root, store, api, "feature_space", "labs-20d");
    renderConfig(root, store, api);
    const feedback = root.querySelector(`[data-role="feedback"]`)!;
    const badge = feedback.querySelector(".tier-badge") as HTMLElement;
    expect(badge.dataset.tier).toBe("3");
    expect(feedback.textContent).toContain("full retrain required");
    expect(store.displayedParam("tau")).toBe(0.2); // untouched
  });

  it("displayed values come from acknowledgments, not the input field", async () => {
    const input = root.querySelector(
      `[data-param="tau"] input`,
    ) as HTMLInputElement;
    input.value = "0.77"; // typed but never applied
    renderConfig(root, store, api);
    const ack = root.querySelector(`[data-param="tau"] [data-role="ack"]`)!;
    expect(ack.textContent).toContain("0.2");
    expect(ack.textContent).not.toContain("0.77");
  });
});
