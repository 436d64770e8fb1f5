/** Thin typed client for the debugging-session API. Every method is one
 * HTTP call; no caching, no interpretation. */

import type {
  Decision,
  FeedbackAck,
  JobStatus,
  MetricsPayload,
  PrototypesPayload,
  Scope,
  SessionSummary,
} from "./types.js";

export class ApiError extends Error {
  constructor(
    readonly status: number,
    readonly detail: string,
  ) {
    super(`HTTP ${status}: ${detail}`);
    this.name = "ApiError";
  }
}

/** The surface the app consumes; tests substitute an in-memory double. */
export interface Api {
  session(): Promise<SessionSummary>;
  prototypes(): Promise<PrototypesPayload>;
  metrics(): Promise<MetricsPayload>;
  feedback(
    prototype: number,
    image: string,
    decision: Decision,
    scope: Scope,
  ): Promise<FeedbackAck>;
  finetune(): Promise<JobStatus>;
  job(id: string): Promise<JobStatus>;
  overlayUrl(imageId: string, prototype: number): string;
}

async function parse<T>(res: Response): Promise<T> {
  if (res.ok) return (await res.json()) as T;
  let detail = res.statusText;
  try {
    const body = (await res.json()) as { detail?: string };
    if (typeof body.detail === "string") detail = body.detail;
  } catch {
    // non-JSON error body; keep the status text
  }
  throw new ApiError(res.status, detail);
}

export class HttpApi implements Api {
  constructor(
    readonly base: string = "",
    private readonly fetchFn: typeof fetch = fetch,
  ) {}

  private get<T>(path: string): Promise<T> {
    return this.fetchFn(this.base + path).then((res) => parse<T>(res));
  }

  private post<T>(path: string, body?: unknown): Promise<T> {
    return this.fetchFn(this.base + path, {
      method: "POST",
      headers: { "content-type": "application/json" },
      body: body === undefined ? null : JSON.stringify(body),
    }).then((res) => parse<T>(res));
  }

  session(): Promise<SessionSummary> {
    return this.get("/api/session");
  }

  prototypes(): Promise<PrototypesPayload> {
    return this.get("/api/prototypes");
  }

  metrics(): Promise<MetricsPayload> {
    return this.get("/api/metrics");
  }

  feedback(
    prototype: number,
    image: string,
    decision: Decision,
    scope: Scope,
  ): Promise<FeedbackAck> {
    return this.post("/api/feedback", { prototype, image, decision, scope });
  }

  finetune(): Promise<JobStatus> {
    return this.post("/api/rounds/finetune");
  }

  job(id: string): Promise<JobStatus> {
    return this.get(`/api/jobs/${id}`);
  }

  overlayUrl(imageId: string, prototype: number): string {
    return `${this.base}/api/images/${imageId}/overlay/${prototype}`;
  }
}
