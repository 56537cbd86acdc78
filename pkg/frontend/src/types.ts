/** Wire types for the careloop control service. */

export interface HotParams {
  tau: number;
  batch_size: number;
  rate_hz: number;
  candidate_n: number;
  gamma: number;
  rho: number;
  lambda_reg: number;
  [key: string]: number | string | null | undefined;
}

export interface MetricsSnapshot {
  steps: number;
  step: number;
  query_rate: number;
  labels_added: number;
  final_buffer: number;
  weak_buffer: number;
  updates: number;
  safety_rate: number | null;
  forced_queries: number;
  substitutions: number;
  pending_queries: number;
  mean_latency_s?: number;
  throughput_hz?: number;
  hot: HotParams;
  ts?: number;
}

export interface StepEvent {
  type: "step";
  step: number;
  ts: number;
  phase: string;
  u: number;
  proposed: number;
  emitted: number;
  passed: boolean;
  violations: string[];
  forced: boolean;
  queried: boolean;
  bl_size: number;
  bw_size: number;
  updates: number;
  latency_s: number;
}

export interface LabelEvent {
  type: "label";
  step: number;
  origin_step: number;
  provenance: "simulated" | "human" | "fallback";
  action: number;
}

export type LoopEvent = StepEvent | LabelEvent | { type: string; [k: string]: unknown };

export interface PendingQuery {
  qid: number;
  state: number[];
  proposed: number;
  u: number;
  origin_step: number;
  expires_in_s: number;
}

export interface ParamResult {
  param: string;
  tier: 1 | 2 | 3;
  applied: boolean;
  message: string;
  focused_steps?: number;
  effective_at_step?: number;
}

export const ACTION_NAMES = ["MedA", "MedB", "MedC", "Combo", "Placebo"];
