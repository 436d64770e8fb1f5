/** Application state and actions. The server is the single source of
 * truth: every mutation here is one API call, and the only client-side
 * state is the in-flight optimistic overlay plus UI chrome (banner,
 * scope toggle). Reloading mid-round rebuilds everything from three
 * GETs. */

import { ApiError, type Api } from "./api.js";
import { slotKey } from "./model.js";
import type {
  Decision,
  JobStatus,
  MetricsPayload,
  PrototypesPayload,
  SessionSummary,
  Verdict,
} from "./types.js";

export interface Banner {
  kind: "info" | "error";
  text: string;
}

export interface AppState {
  session: SessionSummary | null;
  cards: PrototypesPayload | null;
  metrics: MetricsPayload | null;
  /** Optimistic verdicts keyed by slotKey, shown until the POST settles. */
  overlay: Map<string, Verdict>;
  banner: Banner | null;
  /** Job currently being watched (fine-tune in progress). */
  job: JobStatus | null;
  scopeAll: boolean;
  /** Fatal load failure (server unreachable). */
  loadError: string | null;
}

const TERMINAL = new Set(["done", "failed"]);

export class Store {
  readonly state: AppState = {
    session: null,
    cards: null,
    metrics: null,
    overlay: new Map(),
    banner: null,
    job: null,
    scopeAll: false,
    loadError: null,
  };

  private listeners = new Set<() => void>();
  private watching = false;

  constructor(
    private readonly api: Api,
    private readonly pollMs: number = 1000,
  ) {}

  subscribe(fn: () => void): () => void {
    this.listeners.add(fn);
    return () => this.listeners.delete(fn);
  }

  private emit(): void {
    for (const fn of this.listeners) fn();
  }

  private sleep(ms: number): Promise<void> {
    return new Promise((resolve) => setTimeout(resolve, ms));
  }

  /** Initial load and post-round refresh: session, cards, metrics. */
  async load(): Promise<void> {
    try {
      const [session, cards, metrics] = await Promise.all([
        this.api.session(),
        this.api.prototypes(),
        this.api.metrics(),
      ]);
      this.state.session = session;
      this.state.cards = cards;
      this.state.metrics = metrics;
      this.state.overlay.clear(); // server state supersedes in-flight guesses
      this.state.loadError = null;
      this.emit();
      if (session.job && !TERMINAL.has(session.job.state)) {
        void this.watchJob(session.job);
      }
    } catch (err) {
      this.state.loadError = err instanceof Error ? err.message : String(err);
      this.emit();
    }
  }

  setScopeAll(value: boolean): void {
    this.state.scopeAll = value;
    this.emit();
  }

  dismissBanner(): void {
    this.state.banner = null;
    this.emit();
  }

  /** Stage one verdict: optimistic flip, single POST, rollback on error. */
  async submitVerdict(
    prototype: number,
    imageId: string,
    decision: Decision,
  ): Promise<void> {
    const verdict: Verdict = {
      prototype,
      image_id: imageId,
      decision,
      scope: this.state.scopeAll ? "all" : "class",
    };
    const key = slotKey(prototype, imageId);
    this.state.overlay.set(key, verdict);
    this.emit();
    try {
      const ack = await this.api.feedback(
        prototype,
        imageId,
        decision,
        verdict.scope,
      );
      // bake the acknowledged verdict into the cards payload so the
      // overlay stays empty outside in-flight requests
      const card = this.state.cards?.prototypes.find(
        (c) => c.prototype === prototype,
      );
      const image = card?.images.find((im) => im.image_id === imageId);
      if (image) image.verdict = verdict;
      if (this.state.session) {
        this.state.session.staged = ack.staged;
        this.state.session.forbidden_counts = ack.forbidden_counts;
        this.state.session.valid_counts = ack.valid_counts;
      }
    } catch (err) {
      this.bannerFor(err, "verdict rejected");
    } finally {
      this.state.overlay.delete(key);
      this.emit();
    }
  }

  /** Close the round: commit staged verdicts and fine-tune (server job),
   * then poll at 1 Hz until it settles and reload everything. */
  async finishRound(): Promise<void> {
    let job: JobStatus;
    try {
      job = await this.api.finetune();
    } catch (err) {
      this.bannerFor(err, "could not start fine-tuning");
      this.emit();
      return;
    }
    await this.watchJob(job);
  }

  private async watchJob(job: JobStatus): Promise<void> {
    if (this.watching) return;
    this.watching = true;
    this.state.job = job;
    this.state.banner = null;
    this.emit();
    try {
      while (!TERMINAL.has(job.state)) {
        await this.sleep(this.pollMs);
        try {
          job = await this.api.job(job.id);
        } catch (err) {
          this.bannerFor(err, "lost the fine-tune job");
          return;
        }
        this.state.job = job;
        this.emit();
      }
      if (job.state === "failed") {
        this.state.banner = {
          kind: "error",
          text: `fine-tuning failed: ${job.message}`,
        };
      }
    } finally {
      this.watching = false;
      this.state.job = null;
      await this.load();
    }
  }

  private bannerFor(err: unknown, fallback: string): void {
    if (err instanceof ApiError) {
      if (err.status === 409) {
        // a 409 is "busy" — either a running job or the round cap
        this.state.banner = {
          kind: "error",
          text: err.detail.includes("round cap")
            ? err.detail
            : "fine-tuning in progress",
        };
        return;
      }
      if (err.status === 410) {
        this.state.banner = { kind: "info", text: "session already converged" };
        return;
      }
      this.state.banner = { kind: "error", text: err.detail };
      return;
    }
    const msg = err instanceof Error ? err.message : String(err);
    this.state.banner = { kind: "error", text: `${fallback}: ${msg}` };
  }
}
