// View models and wire types for the train dashboard.
// The dashboard is strictly a client of the documented HTTP APIs; no private
// keys live in the browser and no view ever contains raw dataset rows.

export type Verdict = 'Approve' | 'Reject';

export type RouteStatus =
  | 'Pending'
  | 'Approved'
  | 'InTransit'
  | 'AwaitingApproval'
  | 'Completed'
  | 'Rejected'
  | 'Blocked';

/** Station admin API: one hop held for review (aggregates and digests only). */
export interface PendingApprovalView {
  train_id: string;
  task_kind: string;
  record_count: number;
  pre_metric: Record<string, number>;
  post_metric: Record<string, number>;
  state_digest_in: string;
  state_digest_out: string;
  created_at: string;
  decided: boolean;
}

export type StationHopState =
  | 'waiting'
  | 'fetched'
  | 'awaiting-approval'
  | 'pushed'
  | 'rejected'
  | 'blocked';

export interface RouteProgressView {
  train_id: string;
  status: RouteStatus;
  stations: { station_id: string; state: StationHopState }[];
  approvals_outstanding: string[];
  results_available: boolean;
}

/** Center status endpoint payload (subset the dashboard consumes). */
export interface TrainStatusPayload {
  train_id: string;
  status: RouteStatus;
  cursor: number;
  stations: string[];
  pending_approvals: string[];
  hops_completed: { station_id: string; pushed_at: string }[];
  results_available: boolean;
}

export interface ExitControlCheck {
  name: string;
  passed: boolean;
  detail: string;
}

export interface ResultSummaryPayload {
  task_kind: string;
  metrics: Record<string, string | number>;
  total_records: number;
  exit_control_report: ExitControlCheck[];
  released_params: unknown | null;
}

/** Result view: three mutually exclusive render states, never partial numbers. */
export type ResultView =
  | { kind: 'not-ready'; status: RouteStatus }
  | { kind: 'blocked'; violations: ExitControlCheck[] }
  | { kind: 'released'; summary: ResultSummaryPayload | null };

export interface DashboardConfig {
  station_admin_url?: string;
  center_url?: string;
  key_id?: string;
  poll_interval_ms: number;
}
