// Page bootstrap: fetch the JSON config, build API clients over the real
// fetch, start the poller, and keep the three regions of the page rendered.
// Decision submission is disabled while a prior submission is in flight.

import { CenterApi, StationAdminApi, nullAuth, type AuthProvider } from './api.js';
import { ViewPoller, type PollerState } from './poller.js';
import { renderBanner, renderPendingApproval, renderRouteProgress } from './render.js';
import type { DashboardConfig, Verdict } from './types.js';

export async function loadConfig(configUrl: string, fetchFn = fetch): Promise<DashboardConfig> {
  const response = await fetchFn(configUrl);
  if (!response.ok) throw new Error(`config fetch failed: ${response.status}`);
  return (await response.json()) as DashboardConfig;
}

export interface AppHandles {
  poller: ViewPoller;
  stop: () => void;
}

export function startApp(
  root: {
    banner: HTMLElement;
    pending: HTMLElement;
    routes: HTMLElement;
  },
  config: DashboardConfig,
  options: {
    fetchFn?: typeof fetch;
    auth?: AuthProvider;
    trainIds?: string[];
  } = {},
): AppHandles {
  const fetchFn = options.fetchFn ?? fetch.bind(globalThis);
  const station = config.station_admin_url
    ? new StationAdminApi(config.station_admin_url, fetchFn)
    : undefined;
  const center = config.center_url
    ? new CenterApi(config.center_url, fetchFn, options.auth ?? nullAuth)
    : undefined;

  let submitting = false;

  const render = (state: PollerState) => {
    root.banner.innerHTML = renderBanner(state);
    root.pending.innerHTML = state.pending.map(renderPendingApproval).join('');
    root.routes.innerHTML = [...state.routes.values()].map(renderRouteProgress).join('');
    wireDecisionForms(state);
  };

  const wireDecisionForms = (state: PollerState) => {
    for (const card of root.pending.querySelectorAll<HTMLElement>('.pending-card')) {
      const trainId = card.dataset['train'];
      if (trainId === undefined || station === undefined) continue;
      const reason = card.querySelector<HTMLInputElement>('input[name=reason]');
      const validation = card.querySelector<HTMLElement>('.validation');
      const submit = async (verdict: Verdict) => {
        const reasonText = reason?.value.trim() ?? '';
        if (verdict === 'Reject' && reasonText === '') {
          if (validation) validation.hidden = false; // client-side rule
          return;
        }
        if (submitting) return;
        submitting = true;
        try {
          await station.submitDecision(trainId, verdict, reasonText);
          await poller.pollOnce();
        } finally {
          submitting = false;
        }
      };
      card
        .querySelector('button[name=approve]')
        ?.addEventListener('click', () => void submit('Approve'));
      card
        .querySelector('button[name=reject]')
        ?.addEventListener('click', () => void submit('Reject'));
    }
    void state;
  };

  const poller = new ViewPoller({
    station,
    center,
    trainIds: options.trainIds ?? [],
    intervalMs: config.poll_interval_ms,
    onUpdate: render,
  });
  poller.start();
  return { poller, stop: () => poller.stop() };
}
