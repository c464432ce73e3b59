import { afterEach, beforeEach, describe, expect, it, vi } from 'vitest';

import { StationAdminApi, type FetchLike } from '../src/api.js';
import { STALE_AFTER_MISSES, ViewPoller, type PollerState } from '../src/poller.js';
import type { PendingApprovalView } from '../src/types.js';

const PENDING: PendingApprovalView = {
  train_id: 'train-1',
  task_kind: 'NbSentiment',
  record_count: 100,
  pre_metric: { accuracy: 0.5 },
  post_metric: { accuracy: 0.9 },
  state_digest_in: 'a'.repeat(64),
  state_digest_out: 'b'.repeat(64),
  created_at: '2026-02-01T00:00:00Z',
  decided: false,
};

function jsonResponse(body: unknown): Response {
  return new Response(JSON.stringify(body), { status: 200 });
}

describe('ViewPoller', () => {
  beforeEach(() => vi.useFakeTimers());
  afterEach(() => vi.useRealTimers());

  function makePoller(fetchFn: FetchLike, intervalMs = 2000) {
    const updates: PollerState[] = [];
    const poller = new ViewPoller({
      station: new StationAdminApi('http://station', fetchFn),
      intervalMs,
      onUpdate: (state) => updates.push(state),
    });
    return { poller, updates };
  }

  it('surfaces a new pending approval within one interval', async () => {
    let pending: PendingApprovalView[] = [];
    const { poller, updates } = makePoller(() =>
      Promise.resolve(jsonResponse({ pending })),
    );
    poller.start();
    await vi.advanceTimersByTimeAsync(0);
    expect(updates.at(-1)?.pending).toEqual([]);

    pending = [PENDING];
    await vi.advanceTimersByTimeAsync(2000);
    expect(updates.at(-1)?.pending).toEqual([PENDING]);
    poller.stop();
  });

  it('turns connection errors into a banner and staleness after 3 misses', async () => {
    let up = true;
    const { poller, updates } = makePoller(() =>
      up
        ? Promise.resolve(jsonResponse({ pending: [PENDING] }))
        : Promise.reject(new Error('connection refused')),
    );
    poller.start();
    await vi.advanceTimersByTimeAsync(0);
    expect(updates.at(-1)?.errorBanner).toBeNull();

    up = false;
    await vi.advanceTimersByTimeAsync(2000);
    let last = updates.at(-1)!;
    expect(last.errorBanner).toContain('connection refused');
    expect(last.stale).toBe(false); // banner immediately, stale later

    await vi.advanceTimersByTimeAsync(2000 * (STALE_AFTER_MISSES - 1));
    last = updates.at(-1)!;
    expect(last.stale).toBe(true);
    expect(last.pending).toEqual([PENDING]); // last good data kept, marked stale

    up = true;
    await vi.advanceTimersByTimeAsync(2000);
    last = updates.at(-1)!;
    expect(last.stale).toBe(false);
    expect(last.errorBanner).toBeNull();
    poller.stop();
  });

  it('keeps at most one poll in flight', async () => {
    let inFlight = 0;
    let maxInFlight = 0;
    const fetchFn: FetchLike = async () => {
      inFlight += 1;
      maxInFlight = Math.max(maxInFlight, inFlight);
      await new Promise((resolve) => setTimeout(resolve, 5000)); // slower than interval
      inFlight -= 1;
      return jsonResponse({ pending: [] });
    };
    const { poller } = makePoller(fetchFn, 1000);
    poller.start();
    await vi.advanceTimersByTimeAsync(4500);
    expect(maxInFlight).toBe(1);
    poller.stop();
    await vi.advanceTimersByTimeAsync(10000);
  });
});
