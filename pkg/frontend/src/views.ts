// Pure view-model construction: wire payloads in, render-ready views out.

import type { ApiError, CenterApi, ResultDecryptor } from './api.js';
import type {
  ResultView,
  RouteProgressView,
  StationHopState,
  TrainStatusPayload,
} from './types.js';

export function routeProgressView(payload: TrainStatusPayload): RouteProgressView {
  const pushed = new Set(payload.hops_completed.map((h) => h.station_id));
  const stations = payload.stations.map((stationId, index) => ({
    station_id: stationId,
    state: stationState(payload, stationId, index, pushed),
  }));
  return {
    train_id: payload.train_id,
    status: payload.status,
    stations,
    approvals_outstanding: payload.pending_approvals,
    // Never report availability from anything but the status itself.
    results_available: payload.status === 'Completed' && payload.results_available,
  };
}

function stationState(
  payload: TrainStatusPayload,
  stationId: string,
  index: number,
  pushed: Set<string>,
): StationHopState {
  if (pushed.has(stationId)) return 'pushed';
  if (index === payload.cursor) {
    if (payload.status === 'Rejected') return 'rejected';
    if (payload.status === 'Blocked') return 'blocked';
    if (payload.status === 'AwaitingApproval') return 'awaiting-approval';
    if (payload.status === 'InTransit') return 'fetched';
  }
  return 'waiting';
}

/**
 * Resolve the three result render states. Before completion this never
 * surfaces partial numbers: NotReady and BlockedByExitControl map to their
 * distinct views and everything metric-shaped stays absent.
 */
export async function fetchReleasedResults(
  center: CenterApi,
  trainId: string,
  decryptor?: ResultDecryptor,
): Promise<ResultView> {
  const status = await center.trainStatus(trainId);
  if (status.status === 'Blocked') {
    return { kind: 'blocked', violations: [] };
  }
  try {
    const fetched = await center.trainResults(trainId);
    if (!decryptor) return { kind: 'released', summary: null };
    const summary = await decryptor(fetched);
    const violations = summary.exit_control_report.filter((c) => !c.passed);
    if (violations.length > 0) return { kind: 'blocked', violations };
    return { kind: 'released', summary };
  } catch (error) {
    const code = (error as ApiError).code;
    if (code === 'NotReady') return { kind: 'not-ready', status: status.status };
    if (code === 'BlockedByExitControl') return { kind: 'blocked', violations: [] };
    throw error;
  }
}
