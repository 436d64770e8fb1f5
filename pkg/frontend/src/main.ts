/** Bootstrap: wire the store to the DOM and the keyboard. The API base
 * defaults to the page origin; `?api=http://host:port` points the app
 * at a session server elsewhere (the server allows cross-origin use). */

import { HttpApi, type Api } from "./api.js";
import { Store } from "./store.js";
import { render, type Actions } from "./ui.js";
import type { Decision } from "./types.js";

export const KEYMAP: Record<string, Decision> = {
  k: "keep",
  f: "forbid",
  s: "skip",
};

/** k/f/s give the focused patch its verdict, then move focus to the
 * next patch, so annotating a round is a stream of single keystrokes. */
export function bindKeyboard(root: HTMLElement, actions: Actions): void {
  root.addEventListener("keydown", (event) => {
    const decision = KEYMAP[event.key.toLowerCase()];
    if (!decision || event.ctrlKey || event.metaKey || event.altKey) return;
    const cell = (event.target as HTMLElement).closest<HTMLElement>("[data-image]");
    if (!cell) return;
    event.preventDefault();
    const cells = [...root.querySelectorAll<HTMLElement>("[data-image]")];
    const next = cells[cells.indexOf(cell) + 1];
    // the verdict re-renders synchronously (optimistic update), so the
    // next cell must be re-found by key, not by the stale node
    const key = next && {
      prototype: next.dataset.prototype,
      image: next.dataset.image,
    };
    actions.verdict(
      Number(cell.dataset.prototype),
      cell.dataset.image!,
      decision,
    );
    if (key) {
      root
        .querySelector<HTMLElement>(
          `[data-prototype="${key.prototype}"][data-image="${key.image}"]`,
        )
        ?.focus();
    }
  });
}

/** Everything but the HTTP transport: tests plug in an API double. */
export function wire(
  root: HTMLElement,
  api: Api,
  apiBase = "",
  pollMs = 1000,
): Store {
  const store = new Store(api, pollMs);
  const actions: Actions = {
    verdict: (prototype, imageId, decision) =>
      void store.submitVerdict(prototype, imageId, decision),
    finishRound: () => void store.finishRound(),
    setScopeAll: (value) => store.setScopeAll(value),
    dismissBanner: () => store.dismissBanner(),
    reload: () => void store.load(),
  };
  store.subscribe(() => render(root, store.state, actions, { apiBase }));
  bindKeyboard(root, actions);
  return store;
}

export function start(root: HTMLElement, apiBase: string): Store {
  const store = wire(root, new HttpApi(apiBase), apiBase);
  void store.load();
  return store;
}

// browser entry; tests import wire()/start() directly instead
if (typeof document !== "undefined" && document.getElementById("app")) {
  const params = new URLSearchParams(window.location.search);
  const base = params.get("api") ?? "";
  start(document.getElementById("app")!, base.replace(/\/$/, ""));
}
