/** Payload shapes of the debugging-session HTTP API, mirrored verbatim. */

export type Decision = "forbid" | "keep" | "skip";
export type Scope = "class" | "all";

export interface Verdict {
  prototype: number;
  image_id: string;
  decision: Decision;
  scope: Scope;
}

export interface JobStatus {
  id: string;
  kind: string;
  state: "queued" | "running" | "done" | "failed";
  progress: number;
  message: string;
}

export interface SessionSummary {
  status: string; // collecting | finetuning | converged
  converged: boolean;
  k: number;
  v: number;
  pool_size: number;
  forbidden_counts: Record<string, number>;
  valid_counts: Record<string, number>;
  staged: number;
  n_feedback: number;
  rounds_done: number;
  config: {
    a: number;
    max_rounds: number;
    overlap_threshold: number;
    min_display_area: number;
    tau: number;
    finetune: Record<string, unknown>;
  };
  job: JobStatus | null;
}

export interface CardImage {
  image_id: string;
  area: number; // 0 means no displayable patch: only "skip" is valid
  overlay_url: string;
  pixels_shape: number[];
  pixels_b64: string;
  verdict: Verdict | null; // verdict staged on the server for this round
}

/** One prototype's inspection row; images arrive most-activated first. */
export interface PrototypeCard {
  prototype: number;
  class: number;
  images: CardImage[];
}

export interface PrototypesPayload {
  round_index: number;
  status: string;
  prototypes: PrototypeCard[];
}

export interface FeedbackAck {
  staged: number;
  round_index: number;
  forbidden_counts: Record<string, number>;
  valid_counts: Record<string, number>;
}

/** One round of session history as served by /api/metrics. */
export interface RoundMetrics {
  round: number;
  n_forbid: number;
  n_keep: number;
  n_skip: number;
  train_macro_f1?: number;
  test_macro_f1?: number;
  test_eval?: Record<string, unknown>;
  prototype_ap?: (number | null)[];
}

export interface MetricsPayload {
  rounds: RoundMetrics[];
  converged: boolean;
}
