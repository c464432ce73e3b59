// Polling loop with staleness tracking: refresh the pending-approval and
// route-progress views on an interval; surface connection failures as a
// banner and mark data stale after three consecutive missed polls.

import type { CenterApi, StationAdminApi } from './api.js';
import { routeProgressView } from './views.js';
import type { PendingApprovalView, RouteProgressView } from './types.js';

export const STALE_AFTER_MISSES = 3;

export interface PollerState {
  pending: PendingApprovalView[];
  routes: Map<string, RouteProgressView>;
  stale: boolean;
  errorBanner: string | null;
  missedPolls: number;
}

export interface PollerOptions {
  station?: StationAdminApi;
  center?: CenterApi;
  trainIds?: string[];
  intervalMs: number;
  onUpdate: (state: PollerState) => void;
  setIntervalFn?: typeof setInterval;
  clearIntervalFn?: typeof clearInterval;
}

export class ViewPoller {
  private readonly state: PollerState = {
    pending: [],
    routes: new Map(),
    stale: false,
    errorBanner: null,
    missedPolls: 0,
  };
  private timer: ReturnType<typeof setInterval> | null = null;
  private inFlight = false;

  constructor(private readonly options: PollerOptions) {}

  start(): void {
    const schedule = this.options.setIntervalFn ?? setInterval;
    this.timer = schedule(() => void this.pollOnce(), this.options.intervalMs);
    void this.pollOnce();
  }

  stop(): void {
    if (this.timer !== null) {
      (this.options.clearIntervalFn ?? clearInterval)(this.timer);
      this.timer = null;
    }
  }

  snapshot(): PollerState {
    return { ...this.state, routes: new Map(this.state.routes) };
  }

  /** One refresh pass; at most one in flight per interval tick. */
  async pollOnce(): Promise<void> {
    if (this.inFlight) return;
    this.inFlight = true;
    try {
      if (this.options.station) {
        this.state.pending = await this.options.station.listPending();
      }
      if (this.options.center) {
        for (const trainId of this.options.trainIds ?? []) {
          const status = await this.options.center.trainStatus(trainId);
          this.state.routes.set(trainId, routeProgressView(status));
        }
      }
      this.state.missedPolls = 0;
      this.state.stale = false;
      this.state.errorBanner = null;
    } catch (error) {
      // Connection errors become a banner, never silent staleness.
      this.state.missedPolls += 1;
      this.state.errorBanner = error instanceof Error ? error.message : String(error);
      this.state.stale = this.state.missedPolls >= STALE_AFTER_MISSES;
    } finally {
      this.inFlight = false;
      this.options.onUpdate(this.snapshot());
    }
  }
}
