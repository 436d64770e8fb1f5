import { describe, expect, it, vi } from "vitest";

import { wire } from "../src/main.js";
import { chartPoints } from "../src/model.js";
import { FakeApi } from "./fakeServer.js";

function mount(fake: FakeApi, pollMs = 5) {
  const root = document.createElement("main");
  document.body.replaceChildren(root);
  const store = wire(root, fake, "", pollMs);
  return { root, store };
}

const flush = () => new Promise((resolve) => setTimeout(resolve, 0));

function cell(root: HTMLElement, prototype: number, image: string): HTMLElement {
  return root.querySelector<HTMLElement>(
    `[data-prototype="${prototype}"][data-image="${image}"]`,
  )!;
}

async function loaded(fake: FakeApi) {
  const m = mount(fake);
  await m.store.load();
  await flush();
  return m;
}

describe("card grid", () => {
  it("renders one card per prototype: 5 classes × 2 = 10", async () => {
    const { root } = await loaded(new FakeApi());
    const cards = root.querySelectorAll("article.card");
    expect(cards).toHaveLength(10);
  });

  it("orders cards by prototype index even when the payload is scrambled", async () => {
    const fake = new FakeApi({ scrambleCards: true });
    const { root, store } = await loaded(fake);
    const order = () =>
      [...root.querySelectorAll<HTMLElement>("article.card")].map((c) =>
        Number(c.dataset.prototype),
      );
    expect(order()).toEqual([0, 1, 2, 3, 4, 5, 6, 7, 8, 9]);
    const before = order();
    await store.load(); // refresh
    await flush();
    expect(order()).toEqual(before);
  });

  it("marks the first (most-activated) image as the top patch", async () => {
    const { root } = await loaded(new FakeApi());
    const top = cell(root, 0, "r0-p0-i0");
    expect(top.dataset.top).toBe("true");
    expect(top.querySelector(".top-tag")).not.toBeNull();
    expect(cell(root, 0, "r0-p0-i1").dataset.top).toBe("false");
  });

  it("shows onboarding on an empty session and hides it after feedback", async () => {
    const fake = new FakeApi();
    const { root, store } = await loaded(fake);
    expect(root.querySelector(".onboarding")).not.toBeNull();
    await store.submitVerdict(0, "r0-p0-i0", "keep");
    expect(root.querySelector(".onboarding")).toBeNull();
  });

  it("flips the badge to a cross when the top image is forbidden", async () => {
    const fake = new FakeApi();
    const { root } = await loaded(fake);
    const badge = () =>
      root.querySelector<HTMLElement>('article[data-prototype="2"] .badge')!;
    expect(badge().dataset.accepted).toBe("true");
    cell(root, 2, "r0-p2-i0")
      .querySelector<HTMLButtonElement>('button[data-decision="forbid"]')!
      .click();
    await flush();
    await flush();
    expect(badge().dataset.accepted).toBe("false");
    expect(badge().textContent).toBe("✗");
    // a forbid on a lesser image of another card leaves its badge green
    cell(root, 3, "r0-p3-i1")
      .querySelector<HTMLButtonElement>('button[data-decision="forbid"]')!
      .click();
    await flush();
    await flush();
    expect(
      root.querySelector<HTMLElement>('article[data-prototype="3"] .badge')!
        .dataset.accepted,
    ).toBe("true");
  });

  it("disables forbid/keep on a slot with no displayable patch", async () => {
    const fake = new FakeApi({ emptySlots: ["1:0"] });
    const { root } = await loaded(fake);
    const c = cell(root, 1, "r0-p1-i0");
    expect(
      c.querySelector<HTMLButtonElement>('button[data-decision="forbid"]')!
        .disabled,
    ).toBe(true);
    expect(
      c.querySelector<HTMLButtonElement>('button[data-decision="keep"]')!
        .disabled,
    ).toBe(true);
    expect(
      c.querySelector<HTMLButtonElement>('button[data-decision="skip"]')!
        .disabled,
    ).toBe(false);
    expect(c.textContent).toContain("skip only");
  });
});

describe("verdict wiring", () => {
  it("posts scope all when the checkbox is ticked", async () => {
    const fake = new FakeApi();
    const { root } = await loaded(fake);
    const box = root.querySelector<HTMLInputElement>("#scope-all")!;
    box.checked = true;
    box.dispatchEvent(new Event("change", { bubbles: true }));
    await flush();
    cell(root, 0, "r0-p0-i0")
      .querySelector<HTMLButtonElement>('button[data-decision="forbid"]')!
      .click();
    await flush();
    expect(fake.log).toContain("POST /api/feedback 0 r0-p0-i0 forbid all");
    await flush();
    expect(
      cell(root, 0, "r0-p0-i0").querySelector(".verdict-tag")!.textContent,
    ).toContain("all classes");
  });

  it("keyboard shortcuts judge the focused patch and advance focus", async () => {
    const fake = new FakeApi();
    const { root } = await loaded(fake);
    const first = cell(root, 0, "r0-p0-i0");
    first.focus();
    first.dispatchEvent(
      new KeyboardEvent("keydown", { key: "f", bubbles: true }),
    );
    await flush();
    expect(fake.log).toContain("POST /api/feedback 0 r0-p0-i0 forbid class");
    await flush();
    // focus moved to the next patch, so k lands there
    const second = document.activeElement as HTMLElement;
    expect(second.dataset.image).toBe("r0-p0-i1");
    second.dispatchEvent(
      new KeyboardEvent("keydown", { key: "k", bubbles: true }),
    );
    await flush();
    expect(fake.log).toContain("POST /api/feedback 0 r0-p0-i1 keep class");
  });

  it("shows the 409 banner and drops the verdict while a job runs", async () => {
    const fake = new FakeApi({ jobTicks: 5 });
    const { root } = await loaded(fake);
    await fake.finetune(); // job running server-side
    cell(root, 0, "r0-p0-i0")
      .querySelector<HTMLButtonElement>('button[data-decision="keep"]')!
      .click();
    await flush();
    await flush();
    const banner = root.querySelector<HTMLElement>(".banner")!;
    expect(banner.textContent).toContain("fine-tuning in progress");
    expect(cell(root, 0, "r0-p0-i0").querySelector(".verdict-tag")).toBeNull();
  });
});

describe("round controls", () => {
  it("gates the finish button on a verdict for every card's top image", async () => {
    const fake = new FakeApi();
    const { root, store } = await loaded(fake);
    const finish = () =>
      root.querySelector<HTMLButtonElement>("#finish-round")!;
    expect(finish().disabled).toBe(true);
    const cards = store.state.cards!.prototypes;
    for (const card of cards.slice(0, -1)) {
      await store.submitVerdict(card.prototype, card.images[0]!.image_id, "keep");
    }
    expect(finish().disabled).toBe(true); // one card still unjudged
    const last = cards[cards.length - 1]!;
    await store.submitVerdict(last.prototype, last.images[0]!.image_id, "skip");
    expect(finish().disabled).toBe(false);
  });

  it("shows job progress while fine-tuning and freezes the cards", async () => {
    const fake = new FakeApi({ jobTicks: 40 });
    const { root, store } = await loaded(fake);
    for (const card of store.state.cards!.prototypes) {
      await store.submitVerdict(card.prototype, card.images[0]!.image_id, "forbid");
    }
    root.querySelector<HTMLButtonElement>("#finish-round")!.click();
    await vi.waitFor(() =>
      expect(root.querySelector(".job")).not.toBeNull(),
    );
    expect(root.querySelector(".progress-fill")).not.toBeNull();
    expect(
      root.querySelector<HTMLButtonElement>('button[data-decision="keep"]')!
        .disabled,
    ).toBe(true);
    expect(
      root.querySelector<HTMLButtonElement>("#finish-round")!.disabled,
    ).toBe(true);
    await vi.waitFor(() => expect(fake.committed).toHaveLength(1), {
      timeout: 3000,
    });
  });

  it("renders the chart points verbatim from the metrics payload", async () => {
    const fake = new FakeApi({ jobTicks: 1 });
    // two completed rounds straight through the API
    for (const card of (await fake.prototypes()).prototypes) {
      await fake.feedback(card.prototype, card.images[0]!.image_id, "forbid", "class");
    }
    let job = await fake.finetune();
    while (job.state !== "done") job = await fake.job(job.id);
    for (const card of (await fake.prototypes()).prototypes) {
      await fake.feedback(card.prototype, card.images[0]!.image_id, "keep", "class");
    }
    job = await fake.finetune();
    while (job.state !== "done") job = await fake.job(job.id);

    const { root } = await loaded(fake);
    const payload = await fake.metrics();
    const points = chartPoints(payload);
    expect(points).toHaveLength(2);
    for (const p of points) {
      const f1 = root.querySelector<SVGElement>(
        `.point[data-series="f1"][data-round="${p.round}"]`,
      )!;
      expect(Number(f1.getAttribute("data-value"))).toBe(p.f1);
      expect(Number(f1.getAttribute("data-value"))).toBe(
        payload.rounds.find((r) => r.round === p.round)!.test_macro_f1,
      );
      const ap = root.querySelector<SVGElement>(
        `.point[data-series="ap"][data-round="${p.round}"]`,
      )!;
      expect(Number(ap.getAttribute("data-value"))).toBeCloseTo(p.ap!, 12);
    }
    expect(root.querySelectorAll(".point")).toHaveLength(4);
  });

  it("reconstructs mid-round state from the API after a reload", async () => {
    const fake = new FakeApi();
    const first = await loaded(fake);
    await first.store.submitVerdict(0, "r0-p0-i0", "forbid");
    await first.store.submitVerdict(3, "r0-p3-i0", "keep");

    // fresh page, same server
    const second = await loaded(fake);
    expect(
      cell(second.root, 0, "r0-p0-i0").querySelector(".verdict-tag")!
        .textContent,
    ).toContain("background only");
    expect(
      cell(second.root, 3, "r0-p3-i0").querySelector(".verdict-tag")!
        .textContent,
    ).toContain("object part");
    expect(
      second.root.querySelector<HTMLElement>(
        'article[data-prototype="0"] .badge',
      )!.dataset.accepted,
    ).toBe("false");
    expect(second.root.textContent).toContain("2 staged verdict(s)");
  });

  it("shows a retryable error screen when the server is unreachable", async () => {
    const fake = new FakeApi();
    let broken = true;
    const flaky = new Proxy(fake, {
      get(target, prop, receiver) {
        if (prop === "metrics" && broken) {
          return () => Promise.reject(new Error("fetch failed"));
        }
        return Reflect.get(target, prop, receiver);
      },
    });
    const root = document.createElement("main");
    document.body.replaceChildren(root);
    const store = wire(root, flaky, "", 5);
    await store.load();
    await flush();
    expect(root.querySelector(".load-error")).not.toBeNull();
    broken = false;
    root.querySelector<HTMLButtonElement>(".load-error button")!.click();
    await vi.waitFor(() =>
      expect(root.querySelectorAll("article.card")).toHaveLength(10),
    );
  });
});
