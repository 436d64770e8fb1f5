/** DOM rendering. Pure functions from state to elements; every user
 * action calls back through `Actions` (one API call each, handled by the
 * store). The whole app re-renders on each store change — the view is
 * small enough that diffing would be noise. */

import type { AppState } from "./store.js";
import {
  accepted,
  canFinetune,
  cardReady,
  chartPoints,
  sortedCards,
  topImageId,
  verdictFor,
} from "./model.js";
import type {
  CardImage,
  Decision,
  MetricsPayload,
  PrototypeCard,
} from "./types.js";

export interface Actions {
  verdict(prototype: number, imageId: string, decision: Decision): void;
  finishRound(): void;
  setScopeAll(value: boolean): void;
  dismissBanner(): void;
  reload(): void;
}

export interface RenderOptions {
  /** Prefix for server-relative URLs (overlay images). */
  apiBase: string;
}

function el<K extends keyof HTMLElementTagNameMap>(
  tag: K,
  attrs: Record<string, string> = {},
  ...children: (Node | string)[]
): HTMLElementTagNameMap[K] {
  const node = document.createElement(tag);
  for (const [k, v] of Object.entries(attrs)) {
    if (k === "class") node.className = v;
    else node.setAttribute(k, v);
  }
  node.append(...children);
  return node;
}

const DECISION_LABEL: Record<Decision, string> = {
  keep: "object part",
  forbid: "background only",
  skip: "skip",
};

const INSTRUCTIONS = [
  "Each card below is one prototype: a visual concept the classifier " +
    "uses as evidence, shown as the training patches it responds to " +
    "most strongly (strongest first).",
  "Look at the outlined region of each patch and judge what the " +
    "concept covers: press K (object part) if it covers some part of " +
    "the class object, F (background only) if it covers exclusively — " +
    "or very nearly so — the background, a watermark, or another " +
    "artifact, and S to skip patches you cannot call.",
  "Rejections apply to the prototype's own class; tick the checkbox " +
    "under the cards to forbid a concept for every class instead.",
  "When every card's first patch has a verdict, press “Finish round & " +
    "fine-tune”. The model unlearns the rejected concepts and the next " +
    "round starts with fresh patches. The session converges when a " +
    "whole round contains no rejection.",
];

export function render(
  root: HTMLElement,
  state: AppState,
  actions: Actions,
  opts: RenderOptions,
): void {
  // rebuilding the tree would silently drop focus mid keyboard flow, so
  // remember which patch is focused and restore it afterwards
  const active =
    document.activeElement instanceof HTMLElement
      ? document.activeElement.closest<HTMLElement>("[data-image]")
      : null;
  const focused =
    active && root.contains(active)
      ? { p: active.dataset.prototype, i: active.dataset.image }
      : null;
  root.replaceChildren();
  if (state.loadError !== null) {
    root.append(
      el(
        "div",
        { class: "load-error", role: "alert" },
        el("p", {}, `cannot reach the session server: ${state.loadError}`),
        button("retry", "btn", () => actions.reload()),
      ),
    );
    return;
  }
  if (!state.session || !state.cards || !state.metrics) {
    root.append(el("p", { class: "loading" }, "loading session…"));
    return;
  }

  root.append(renderHeader(state));
  if (state.banner) {
    root.append(
      el(
        "div",
        { class: `banner banner-${state.banner.kind}`, role: "status" },
        el("span", {}, state.banner.text),
        button("dismiss", "btn btn-small", () => actions.dismissBanner()),
      ),
    );
  }

  const converged = state.session.converged;
  if (converged) {
    root.append(
      el(
        "div",
        { class: "terminal", "data-converged": "true" },
        el("h2", {}, "converged"),
        el(
          "p",
          {},
          "The last round contained no rejected concept — the session is " +
            "complete. The fine-tuned checkpoint and session report were " +
            "written on the server side.",
        ),
      ),
    );
  } else if (isEmptySession(state)) {
    root.append(renderOnboarding());
  }

  root.append(renderCards(state, actions, opts));
  root.append(renderControls(state, actions));
  root.append(renderChartSection(state.metrics));

  if (focused) {
    root
      .querySelector<HTMLElement>(
        `[data-prototype="${focused.p}"][data-image="${focused.i}"]`,
      )
      ?.focus();
  }
}

function isEmptySession(state: AppState): boolean {
  const s = state.session!;
  return s.rounds_done === 0 && s.staged === 0 && s.n_feedback === 0;
}

function renderHeader(state: AppState): HTMLElement {
  const s = state.session!;
  const round = state.cards!.round_index;
  return el(
    "header",
    { class: "header" },
    el("h1", {}, "prototype debugging"),
    el(
      "div",
      { class: "header-stats" },
      chip(`status: ${state.job ? "fine-tuning" : s.status}`, "status"),
      chip(`round ${round + 1} / ${s.config.max_rounds}`, "round"),
      chip(`${s.staged} staged verdict(s)`, "staged"),
      chip(`${s.pool_size} pool images`, "pool"),
    ),
  );
}

function chip(text: string, kind: string): HTMLElement {
  return el("span", { class: `chip chip-${kind}` }, text);
}

function renderOnboarding(): HTMLElement {
  return el(
    "section",
    { class: "onboarding" },
    el("h2", {}, "how to annotate"),
    ...INSTRUCTIONS.map((p) => el("p", {}, p)),
  );
}

function button(
  label: string,
  cls: string,
  onClick: () => void,
  disabled = false,
): HTMLButtonElement {
  const b = el("button", { class: cls, type: "button" }, label);
  b.disabled = disabled;
  b.addEventListener("click", onClick);
  return b;
}

function renderCards(
  state: AppState,
  actions: Actions,
  opts: RenderOptions,
): HTMLElement {
  const grid = el("section", { class: "cards" });
  const frozen = state.job !== null || state.session!.converged;
  for (const card of sortedCards(state.cards!.prototypes)) {
    grid.append(renderCard(card, state, actions, opts, frozen));
  }
  return grid;
}

function renderCard(
  card: PrototypeCard,
  state: AppState,
  actions: Actions,
  opts: RenderOptions,
  frozen: boolean,
): HTMLElement {
  const ok = accepted(card, state.overlay);
  const ready = cardReady(card, state.overlay);
  const badge = el(
    "span",
    {
      class: `badge ${ok ? "badge-accepted" : "badge-rejected"}`,
      "data-accepted": String(ok),
      title: ok
        ? "accepted: the most-activated patch has no rejection"
        : "rejected: the most-activated patch is marked background-only",
    },
    ok ? "✓" : "✗",
  );
  const head = el(
    "div",
    { class: "card-head" },
    el(
      "span",
      { class: "card-title" },
      `class ${card.class} · prototype ${card.prototype}`,
    ),
    ready ? el("span", { class: "ready", title: "top patch has a verdict" }, "●") : "",
    badge,
  );
  const top = topImageId(card);
  const imgRow = el("div", { class: "card-images" });
  for (const image of card.images) {
    imgRow.append(
      renderImageCell(card, image, image.image_id === top, state, actions, opts, frozen),
    );
  }
  return el(
    "article",
    { class: "card", "data-prototype": String(card.prototype) },
    head,
    imgRow,
  );
}

function renderImageCell(
  card: PrototypeCard,
  image: CardImage,
  isTop: boolean,
  state: AppState,
  actions: Actions,
  opts: RenderOptions,
  frozen: boolean,
): HTMLElement {
  const verdict = verdictFor(card, image.image_id, state.overlay);
  const cell = el("div", {
    class: `image-cell${isTop ? " image-top" : ""}${
      verdict ? ` verdict-${verdict.decision}` : ""
    }`,
    tabindex: "0",
    "data-prototype": String(card.prototype),
    "data-image": image.image_id,
    "data-top": String(isTop),
  });
  const img = el("img", {
    class: "overlay",
    alt: `prototype ${card.prototype} on ${image.image_id}`,
    src: opts.apiBase + image.overlay_url,
    loading: "lazy",
  });
  cell.append(img);
  if (isTop) cell.append(el("span", { class: "top-tag" }, "top"));
  if (verdict) {
    cell.append(
      el(
        "span",
        { class: "verdict-tag", "data-decision": verdict.decision },
        DECISION_LABEL[verdict.decision] +
          (verdict.scope === "all" ? " (all classes)" : ""),
      ),
    );
  }
  const displayable = image.area > 0;
  const row = el("div", { class: "verdict-buttons" });
  const make = (decision: Decision, cls: string, enabled: boolean) => {
    const b = button(
      DECISION_LABEL[decision],
      `btn btn-verdict btn-${decision}`,
      () => actions.verdict(card.prototype, image.image_id, decision),
      frozen || !enabled,
    );
    b.dataset.decision = decision;
    return b;
  };
  row.append(
    make("keep", "keep", displayable),
    make("forbid", "forbid", displayable),
    make("skip", "skip", true),
  );
  if (!displayable) {
    cell.append(
      el(
        "span",
        { class: "no-patch" },
        "no displayable patch — skip only",
      ),
    );
  }
  cell.append(row);
  return cell;
}

function renderControls(state: AppState, actions: Actions): HTMLElement {
  const s = state.session!;
  const scope = el("input", { type: "checkbox", id: "scope-all" });
  scope.checked = state.scopeAll;
  scope.addEventListener("change", () => actions.setScopeAll(scope.checked));
  const scopeLabel = el(
    "label",
    { class: "scope-label", for: "scope-all" },
    scope,
    " apply rejections to all classes",
  );

  const gateOpen =
    canFinetune(state.cards!.prototypes, state.overlay) &&
    state.job === null &&
    !s.converged &&
    state.cards!.round_index < s.config.max_rounds;
  const finish = button(
    "Finish round & fine-tune",
    "btn btn-finish",
    () => actions.finishRound(),
    !gateOpen,
  );
  finish.id = "finish-round";
  if (!gateOpen && !s.converged && state.job === null) {
    finish.title = "give the top patch of every prototype a verdict first";
  }

  const controls = el(
    "section",
    { class: "controls" },
    scopeLabel,
    finish,
  );
  if (state.job) {
    const pct = Math.round(state.job.progress * 100);
    const bar = el("div", { class: "progress" });
    const fill = el("div", { class: "progress-fill" });
    fill.style.width = `${pct}%`;
    bar.append(fill);
    controls.append(
      el(
        "div",
        { class: "job", "data-state": state.job.state },
        el("span", {}, `${state.job.kind}: ${state.job.state} ${pct}%`),
        bar,
        el("span", { class: "job-message" }, state.job.message),
      ),
    );
  }
  return controls;
}

function renderChartSection(metrics: MetricsPayload): HTMLElement {
  const section = el("section", { class: "metrics" }, el("h2", {}, "per-round metrics"));
  if (metrics.rounds.length === 0) {
    section.append(el("p", { class: "metrics-empty" }, "no completed rounds yet"));
    return section;
  }
  section.append(renderChart(metrics));
  return section;
}

const CHART = {
  width: 560,
  height: 200,
  left: 40,
  right: 150,
  top: 14,
  bottom: 28,
};

const SERIES: {
  key: "f1" | "ap";
  label: string;
  cls: string;
}[] = [
  { key: "f1", label: "test macro-F1", cls: "series-f1" },
  { key: "ap", label: "mean activation precision", cls: "series-ap" },
];

/** Line chart of the metrics payload; every plotted point carries the
 * raw value in data attributes so fidelity is testable. */
export function renderChart(metrics: MetricsPayload): SVGSVGElement {
  const points = chartPoints(metrics);
  const svg = document.createElementNS("http://www.w3.org/2000/svg", "svg");
  svg.setAttribute("viewBox", `0 0 ${CHART.width} ${CHART.height}`);
  svg.setAttribute("class", "chart");
  svg.setAttribute("role", "img");

  const plotW = CHART.width - CHART.left - CHART.right;
  const plotH = CHART.height - CHART.top - CHART.bottom;
  const x = (i: number) =>
    CHART.left + (points.length === 1 ? plotW / 2 : (i * plotW) / (points.length - 1));
  const y = (v: number) => CHART.top + (1 - v) * plotH;

  const ns = svg.namespaceURI!;
  const mk = (tag: string, attrs: Record<string, string>, text?: string) => {
    const node = document.createElementNS(ns, tag);
    for (const [k, v] of Object.entries(attrs)) node.setAttribute(k, v);
    if (text !== undefined) node.textContent = text;
    svg.append(node);
    return node;
  };

  for (const tick of [0, 0.5, 1]) {
    mk("line", {
      x1: String(CHART.left),
      x2: String(CHART.width - CHART.right),
      y1: String(y(tick)),
      y2: String(y(tick)),
      class: "gridline",
    });
    mk(
      "text",
      { x: String(CHART.left - 6), y: String(y(tick) + 4), class: "tick", "text-anchor": "end" },
      tick.toFixed(1),
    );
  }
  points.forEach((p, i) => {
    mk(
      "text",
      {
        x: String(x(i)),
        y: String(CHART.height - 8),
        class: "tick",
        "text-anchor": "middle",
      },
      String(p.round),
    );
  });

  SERIES.forEach((series, si) => {
    const xs = points
      .map((p, i) => ({ i, v: p[series.key] }))
      .filter((d): d is { i: number; v: number } => d.v !== null);
    if (xs.length > 1) {
      mk("polyline", {
        points: xs.map((d) => `${x(d.i)},${y(d.v)}`).join(" "),
        class: `line ${series.cls}`,
        fill: "none",
      });
    }
    for (const d of xs) {
      mk("circle", {
        cx: String(x(d.i)),
        cy: String(y(d.v)),
        r: "3.5",
        class: `point ${series.cls}`,
        "data-series": series.key,
        "data-round": String(points[d.i]!.round),
        "data-value": String(d.v),
      });
    }
    const ly = CHART.top + 10 + si * 18;
    mk("rect", {
      x: String(CHART.width - CHART.right + 12),
      y: String(ly - 8),
      width: "10",
      height: "10",
      class: `swatch ${series.cls}`,
    });
    mk(
      "text",
      { x: String(CHART.width - CHART.right + 28), y: String(ly + 1), class: "legend" },
      series.label,
    );
  });

  return svg;
}
